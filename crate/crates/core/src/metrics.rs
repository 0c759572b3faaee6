//! Classification metrics: top-1 accuracy, mean class accuracy, confusion
//! counts, and the report type shared by evaluation and training history.

use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index so metric runs
/// are deterministic.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Config(format!(
            "predictions/labels must be same nonzero length, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanClassAccuracy {
    pub value: f64,
    /// Classes with zero test examples, excluded from the mean.
    pub excluded: Vec<usize>,
}

pub fn mean_class_accuracy(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<MeanClassAccuracy> {
    check_lengths(predictions, labels)?;
    let mut totals = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= num_classes {
            return Err(Error::IndexOutOfRange {
                index: l,
                limit: num_classes,
            });
        }
        totals[l] += 1;
        hits[l] += (p == l) as usize;
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        if totals[c] == 0 {
            excluded.push(c);
        } else {
            sum += hits[c] as f64 / totals[c] as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Config("no class has any test example".into()));
    }
    Ok(MeanClassAccuracy {
        value: sum / counted as f64,
        excluded,
    })
}

/// Full evaluation summary. `confusion` is row-major `[num_classes^2]`;
/// row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub num_classes: usize,
    pub total: usize,
    pub top1: f64,
    pub mean_class: f64,
    /// `None` for classes with no test examples.
    pub per_class: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub confusion: Vec<usize>,
}

pub fn eval_report(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    check_lengths(predictions, labels)?;
    let mut confusion = vec![0usize; num_classes * num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= num_classes || p >= num_classes {
            return Err(Error::IndexOutOfRange {
                index: l.max(p),
                limit: num_classes,
            });
        }
        confusion[l * num_classes + p] += 1;
    }
    let top1 = top1_accuracy(predictions, labels)?;
    let mca = mean_class_accuracy(predictions, labels, num_classes)?;
    let per_class = (0..num_classes)
        .map(|c| {
            let row = &confusion[c * num_classes..(c + 1) * num_classes];
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        num_classes,
        total: labels.len(),
        top1,
        mean_class: mca.value,
        per_class,
        excluded_classes: mca.excluded,
        confusion,
    })
}

impl EvalReport {
    pub fn class_total(&self, class: usize) -> usize {
        self.confusion[class * self.num_classes..(class + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("top1,{}\n", self.top1));
        s.push_str(&format!("mean_class_acc,{}\n", self.mean_class));
        s.push_str(&format!("examples,{}\n", self.total));
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => s.push_str(&format!("class_{c},{a}\n")),
                None => s.push_str(&format!("class_{c},excluded\n")),
            }
        }
        s
    }
}

/// Render a fraction as a percentage with two decimals (0.9346 -> "93.46").
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}
