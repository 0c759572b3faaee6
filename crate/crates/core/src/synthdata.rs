//! Synthetic fine-grained benchmark.
//!
//! Classes are length-T' sequences of attribute prototypes. A configurable
//! fraction of classes come in pairs that share the same attribute multiset
//! and differ only in temporal order, so any order-blind classifier has a
//! hard accuracy ceiling that order-aware models can beat.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::BackboneStub;
use crate::error::{Error, Result};
use crate::streams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_attributes: usize,
    pub num_classes: usize,
    pub t_prime: usize,
    pub c_prime: usize,
    pub noise_sigma: f64,
    /// Fraction of classes that belong to order-permutation pairs.
    pub ordered_pair_fraction: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Zipf exponent for class-frequency skew; `None` keeps classes balanced.
    pub long_tail_exponent: Option<f64>,
    /// Emit raw videos (routed through the frozen backbone) instead of
    /// feature sequences.
    pub video_mode: bool,
    pub video_frames: usize,
    pub video_height: usize,
    pub video_width: usize,
}

impl SyntheticSpec {
    /// Feature-level benchmark that trains in minutes on one core.
    pub fn desk_default() -> Self {
        Self {
            n_attributes: 12,
            num_classes: 16,
            t_prime: 8,
            c_prime: 64,
            noise_sigma: 0.1,
            ordered_pair_fraction: 0.5,
            train_per_class: 100,
            test_per_class: 50,
            seed: 1,
            long_tail_exponent: None,
            video_mode: false,
            video_frames: 23,
            video_height: 8,
            video_width: 8,
        }
    }

    /// Tiny raw-video variant; attribute codes live in RGB space, so at most
    /// 3 attributes stay nearly orthogonal.
    pub fn desk_video() -> Self {
        Self {
            n_attributes: 3,
            num_classes: 4,
            t_prime: 4,
            c_prime: 32,
            noise_sigma: 0.05,
            ordered_pair_fraction: 0.5,
            train_per_class: 50,
            test_per_class: 25,
            video_mode: true,
            ..Self::desk_default()
        }
    }

    /// Dimensionality of the attribute prototypes: feature channels in
    /// feature mode, RGB in video mode.
    pub fn prototype_dim(&self) -> usize {
        if self.video_mode {
            3
        } else {
            self.c_prime
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attributes < 2 || self.num_classes < 2 || self.t_prime < 2 || self.c_prime == 0 {
            return Err(Error::Config(
                "need n_attributes >= 2, num_classes >= 2, t_prime >= 2, c_prime >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ordered_pair_fraction) {
            return Err(Error::Config("ordered_pair_fraction must be in [0, 1]".into()));
        }
        if self.ordered_pair_fraction > 0.0 && self.num_classes % 2 != 0 {
            return Err(Error::Config(
                "num_classes must be even when ordered_pair_fraction > 0".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class example counts must be >= 1".into()));
        }
        if let Some(s) = self.long_tail_exponent {
            if s <= 0.0 {
                return Err(Error::Config("long_tail_exponent must be > 0".into()));
            }
        }
        if self.video_mode {
            if self.video_frames < self.t_prime || self.video_height == 0 || self.video_width == 0 {
                return Err(Error::Config(
                    "video extents must be positive with frames >= t_prime".into(),
                ));
            }
            if self.n_attributes > 3 {
                return Err(Error::Config(
                    "video mode encodes attributes as RGB directions; at most 3 stay nearly orthogonal".into(),
                ));
            }
        }
        Ok(())
    }

    /// Class frequency weights; Zipf 1/(rank+1)^s when long-tailed.
    fn class_weight(&self, class: usize) -> f64 {
        match self.long_tail_exponent {
            Some(s) => 1.0 / ((class + 1) as f64).powf(s),
            None => 1.0,
        }
    }

    pub fn train_count(&self, class: usize) -> usize {
        ((self.train_per_class as f64 * self.class_weight(class)).round() as usize).max(1)
    }

    pub fn test_count(&self, class: usize) -> usize {
        ((self.test_per_class as f64 * self.class_weight(class)).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// `[C', T']` feature sequence (model input, backbone bypassed).
    Features(Tensor),
    /// `[frames, H, W, 3]` raw video for the frozen backbone.
    Video(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub label: usize,
    /// Hidden ground-truth attribute sequence; diagnostics only, never fed
    /// to a model.
    pub attrs: Vec<usize>,
    pub payload: Payload,
}

impl Example {
    /// Resolve the payload to model-ready `[C', T']` features, running the
    /// frozen backbone when the payload is raw video.
    pub fn features(&self, stub: Option<&BackboneStub>) -> Result<Tensor> {
        match &self.payload {
            Payload::Features(f) => Ok(f.clone()),
            Payload::Video(v) => {
                let stub = stub.ok_or_else(|| {
                    Error::Config("video payload needs a backbone to produce features".into())
                })?;
                let frames = v.shape()[0];
                let stride = frames / stub.t_prime;
                let vol = stub.forward_strided(v, 0, stride)?;
                Ok(crate::arch::spatial_avg_pool(&vol))
            }
        }
    }
}

/// Unit-norm prototype rows with pairwise |cosine| below this bound.
pub const PROTOTYPE_COS_BOUND: f64 = 0.3;
const MAX_RESAMPLE: usize = 1000;

/// Sample `n` unit-norm rows of dimension `dim` whose pairwise |cosine| is
/// below [`PROTOTYPE_COS_BOUND`], resampling violators up to 1000 times.
pub fn generate_prototypes(n: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if dim < n {
        return Err(Error::Infeasible(format!(
            "{n} nearly-orthogonal prototypes need dimension >= {n}, got {dim}"
        )));
    }
    let mut rng = streams::derive(seed, streams::TAG_PROTOTYPES, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_RESAMPLE {
                return Err(Error::Infeasible(format!(
                    "could not place {n} prototypes with |cos| < {PROTOTYPE_COS_BOUND} in dimension {dim}"
                )));
            }
            let mut cand: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            cand.iter_mut().for_each(|v| *v /= norm);
            let ok = rows.iter().all(|r| {
                let dot: f64 = r.iter().zip(&cand).map(|(a, b)| a * b).sum();
                dot.abs() < PROTOTYPE_COS_BOUND
            });
            if ok {
                rows.push(cand);
                break;
            }
        }
    }
    Tensor::new(vec![n, dim], rows.concat())
}

/// Per-class attribute sequences. Classes covered by `ordered_pair_fraction`
/// come in pairs sharing a multiset but not an order; all other classes have
/// pairwise-distinct multisets; all sequences are distinct.
pub fn define_classes(spec: &SyntheticSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let mut rng = streams::derive(spec.seed, streams::TAG_CLASSES, 0);
    let pairs = (spec.ordered_pair_fraction * spec.num_classes as f64 / 2.0).round() as usize;
    let unpaired = spec.num_classes - 2 * pairs;

    let mut classes: Vec<Vec<usize>> = Vec::with_capacity(spec.num_classes);
    let mut used_multisets: Vec<Vec<usize>> = Vec::new();

    let fresh_multiset_seq = |rng: &mut rand_chacha::ChaCha8Rng,
                                  used: &[Vec<usize>],
                                  need_mixed: bool|
     -> Result<Vec<usize>> {
        for _ in 0..MAX_RESAMPLE {
            let seq: Vec<usize> = (0..spec.t_prime)
                .map(|_| rng.random_range(0..spec.n_attributes))
                .collect();
            if need_mixed && seq.iter().all(|&a| a == seq[0]) {
                continue; // a constant sequence has no nontrivial permutation
            }
            let mut sorted = seq.clone();
            sorted.sort_unstable();
            if used.iter().all(|m| *m != sorted) {
                return Ok(seq);
            }
        }
        Err(Error::Infeasible(format!(
            "could not find {} classes with distinct attribute multisets (T'={}, N={})",
            spec.num_classes, spec.t_prime, spec.n_attributes
        )))
    };

    for _ in 0..unpaired {
        let seq = fresh_multiset_seq(&mut rng, &used_multisets, false)?;
        let mut sorted = seq.clone();
        sorted.sort_unstable();
        used_multisets.push(sorted);
        classes.push(seq);
    }
    for _ in 0..pairs {
        let first = fresh_multiset_seq(&mut rng, &used_multisets, true)?;
        let mut sorted = first.clone();
        sorted.sort_unstable();
        used_multisets.push(sorted);
        let mut twin = first.clone();
        for _ in 0..MAX_RESAMPLE {
            twin.shuffle(&mut rng);
            if twin != first {
                break;
            }
        }
        if twin == first {
            return Err(Error::Infeasible("could not permute a pair partner".into()));
        }
        classes.push(first);
        classes.push(twin);
    }
    debug_assert_eq!(classes.len(), spec.num_classes);
    Ok(classes)
}

/// Best accuracy any classifier that only sees the attribute multiset can
/// reach on a balanced, noise-free test set (closed form).
pub fn bag_of_features_bayes_bound(spec: &SyntheticSpec) -> f64 {
    let pairs = (spec.ordered_pair_fraction * spec.num_classes as f64 / 2.0).round();
    let ambiguous = 2.0 * pairs / spec.num_classes as f64;
    (1.0 - ambiguous) + ambiguous / 2.0
}

/// Same bound read off a concrete class table: distinct-multiset groups over
/// classes (each group contributes one recoverable class).
pub fn bayes_bound_bruteforce(classes: &[Vec<usize>]) -> f64 {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for seq in classes {
        let mut sorted = seq.clone();
        sorted.sort_unstable();
        if !groups.iter().any(|g| *g == sorted) {
            groups.push(sorted);
        }
    }
    groups.len() as f64 / classes.len() as f64
}

fn sample_example(
    spec: &SyntheticSpec,
    classes: &[Vec<usize>],
    prototypes: &Tensor,
    class: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Example {
    let seq = &classes[class];
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    let dim = spec.prototype_dim();
    let payload = if spec.video_mode {
        let (frames, height, width) = (spec.video_frames, spec.video_height, spec.video_width);
        let seg = (frames / spec.t_prime).max(1);
        let mut data = vec![0.0f64; frames * height * width * 3];
        for f in 0..frames {
            let attr = seq[(f / seg).min(spec.t_prime - 1)];
            let code = prototypes.row(attr);
            for px in 0..height * width {
                for ch in 0..3 {
                    let v = code[ch] + spec.noise_sigma * normal.sample(rng);
                    data[(f * height * width + px) * 3 + ch] = (v as f32) as f64;
                }
            }
        }
        Payload::Video(Tensor::new(vec![frames, height, width, 3], data).expect("video shape"))
    } else {
        // features are [C', T']: column t carries prototype seq[t] plus noise
        let mut data = vec![0.0f64; dim * spec.t_prime];
        for (t, &attr) in seq.iter().enumerate() {
            let code = prototypes.row(attr);
            for c in 0..dim {
                let v = code[c] + spec.noise_sigma * normal.sample(rng);
                data[c * spec.t_prime + t] = (v as f32) as f64;
            }
        }
        Payload::Features(Tensor::new(vec![dim, spec.t_prime], data).expect("feature shape"))
    };
    Example {
        label: class,
        attrs: seq.clone(),
        payload,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub classes: Vec<Vec<usize>>,
    pub prototypes: Tensor,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Generate the full benchmark. Pure in `spec`: identical specs produce
/// bit-identical datasets. Values are rounded through f32 at generation time
/// so the serialized file loses nothing.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let prototypes = generate_prototypes(spec.n_attributes, spec.prototype_dim(), spec.seed)?;
    let classes = define_classes(spec)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.num_classes {
        for i in 0..spec.train_count(class) {
            let mut rng = streams::derive(
                spec.seed,
                streams::TAG_TRAIN_EXAMPLE,
                (class as u64) << 32 | i as u64,
            );
            train.push(sample_example(spec, &classes, &prototypes, class, &mut rng));
        }
        for i in 0..spec.test_count(class) {
            let mut rng = streams::derive(
                spec.seed,
                streams::TAG_TEST_EXAMPLE,
                (class as u64) << 32 | i as u64,
            );
            test.push(sample_example(spec, &classes, &prototypes, class, &mut rng));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        classes,
        prototypes,
        train,
        test,
    })
}

/// Nearest prototype (by dot product, ties to the lowest id) per column.
pub fn decode_attributes(features: &Tensor, prototypes: &Tensor) -> Vec<usize> {
    let (dim, t) = (features.rows(), features.cols());
    let n = prototypes.rows();
    let mut out = Vec::with_capacity(t);
    for col in 0..t {
        let mut best = 0usize;
        let mut best_dot = f64::NEG_INFINITY;
        for p in 0..n {
            let proto = prototypes.row(p);
            let mut dot = 0.0;
            for c in 0..dim {
                dot += features.at(c, col) * proto[c];
            }
            if dot > best_dot {
                best_dot = dot;
                best = p;
            }
        }
        out.push(best);
    }
    out
}

/// Accuracy of the strongest order-blind strategy: decode each column to its
/// nearest prototype, sort the result into a multiset, and answer with the
/// lowest-indexed class owning that multiset.
pub fn order_blind_oracle_accuracy(ds: &Dataset) -> Result<f64> {
    let sorted_per_class: Vec<Vec<usize>> = ds
        .classes
        .iter()
        .map(|seq| {
            let mut s = seq.clone();
            s.sort_unstable();
            s
        })
        .collect();
    let class_for_multiset = |m: &[usize]| -> Option<usize> {
        sorted_per_class.iter().position(|s| s.as_slice() == m)
    };
    let mut correct = 0usize;
    for ex in &ds.test {
        let feats = ex.features(None).map_err(|_| {
            Error::Config("order-blind oracle runs on feature-mode datasets".into())
        })?;
        let mut decoded = decode_attributes(&feats, &ds.prototypes);
        decoded.sort_unstable();
        let predicted = class_for_multiset(&decoded).unwrap_or(0);
        if predicted == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.test.len() as f64)
}

// ── FFDS1 serialization ─────────────────────────────────────────────────
//
// Layout:
//   "FFDS1\n"
//   key=value lines (spec fields + train_count/test_count), "end_header\n"
//   per example, train block then test block:
//     u32 label | u32 x T' attribute ids | f32 x payload (row-major)
// All integers and floats little-endian.

const DATASET_MAGIC: &[u8] = b"FFDS1\n";

fn spec_header(spec: &SyntheticSpec, train_count: usize, test_count: usize) -> String {
    let mut s = String::new();
    s.push_str(&format!("n_attributes={}\n", spec.n_attributes));
    s.push_str(&format!("num_classes={}\n", spec.num_classes));
    s.push_str(&format!("t_prime={}\n", spec.t_prime));
    s.push_str(&format!("c_prime={}\n", spec.c_prime));
    s.push_str(&format!("noise_sigma={}\n", spec.noise_sigma));
    s.push_str(&format!("ordered_pair_fraction={}\n", spec.ordered_pair_fraction));
    s.push_str(&format!("train_per_class={}\n", spec.train_per_class));
    s.push_str(&format!("test_per_class={}\n", spec.test_per_class));
    s.push_str(&format!("seed={}\n", spec.seed));
    if let Some(e) = spec.long_tail_exponent {
        s.push_str(&format!("long_tail_exponent={e}\n"));
    }
    s.push_str(&format!("video_mode={}\n", spec.video_mode as u8));
    s.push_str(&format!("video_frames={}\n", spec.video_frames));
    s.push_str(&format!("video_height={}\n", spec.video_height));
    s.push_str(&format!("video_width={}\n", spec.video_width));
    s.push_str(&format!("train_count={train_count}\n"));
    s.push_str(&format!("test_count={test_count}\n"));
    s.push_str("end_header\n");
    s
}

fn payload_len(spec: &SyntheticSpec) -> usize {
    if spec.video_mode {
        spec.video_frames * spec.video_height * spec.video_width * 3
    } else {
        spec.c_prime * spec.t_prime
    }
}

fn write_example(buf: &mut Vec<u8>, ex: &Example) {
    buf.extend_from_slice(&(ex.label as u32).to_le_bytes());
    for &a in &ex.attrs {
        buf.extend_from_slice(&(a as u32).to_le_bytes());
    }
    let data = match &ex.payload {
        Payload::Features(t) => t.data(),
        Payload::Video(t) => t.data(),
    };
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(spec_header(&ds.spec, ds.train.len(), ds.test.len()).as_bytes());
    for ex in ds.train.iter().chain(&ds.test) {
        write_example(&mut buf, ex);
    }
    fs::write(path, buf)?;
    Ok(())
}

fn bad_format(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "FFDS1",
        reason: reason.into(),
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad_format("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let raw = fs::read(path)?;
    let mut file = std::io::Cursor::new(&raw);
    let mut magic = [0u8; 6];
    file.read_exact(&mut magic).map_err(|_| bad_format("file too short"))?;
    if magic != DATASET_MAGIC {
        return Err(bad_format("bad magic"));
    }

    // header: newline-terminated key=value lines until end_header
    let mut header_end = 6usize;
    let mut fields = std::collections::HashMap::new();
    loop {
        let rest = &raw[header_end..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad_format("unterminated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad_format("non-utf8 header"))?;
        header_end += nl + 1;
        if line == "end_header" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad_format(format!("malformed header line: {line}")))?;
        fields.insert(k.to_string(), v.to_string());
    }

    fn req<T: std::str::FromStr>(fields: &std::collections::HashMap<String, String>, key: &str) -> Result<T> {
        fields
            .get(key)
            .ok_or_else(|| bad_format(format!("missing header field {key}")))?
            .parse::<T>()
            .map_err(|_| bad_format(format!("unparsable header field {key}")))
    }

    let spec = SyntheticSpec {
        n_attributes: req(&fields, "n_attributes")?,
        num_classes: req(&fields, "num_classes")?,
        t_prime: req(&fields, "t_prime")?,
        c_prime: req(&fields, "c_prime")?,
        noise_sigma: req(&fields, "noise_sigma")?,
        ordered_pair_fraction: req(&fields, "ordered_pair_fraction")?,
        train_per_class: req(&fields, "train_per_class")?,
        test_per_class: req(&fields, "test_per_class")?,
        seed: req(&fields, "seed")?,
        long_tail_exponent: match fields.get("long_tail_exponent") {
            Some(v) => Some(v.parse().map_err(|_| bad_format("bad long_tail_exponent"))?),
            None => None,
        },
        video_mode: req::<u8>(&fields, "video_mode")? != 0,
        video_frames: req(&fields, "video_frames")?,
        video_height: req(&fields, "video_height")?,
        video_width: req(&fields, "video_width")?,
    };
    spec.validate()?;
    let train_count: usize = req(&fields, "train_count")?;
    let test_count: usize = req(&fields, "test_count")?;

    let mut r = ByteReader {
        buf: &raw,
        pos: header_end,
    };
    let plen = payload_len(&spec);
    let read_example = |r: &mut ByteReader| -> Result<Example> {
        let label = r.u32()? as usize;
        if label >= spec.num_classes {
            return Err(bad_format(format!("label {label} out of range")));
        }
        let mut attrs = Vec::with_capacity(spec.t_prime);
        for _ in 0..spec.t_prime {
            let a = r.u32()? as usize;
            if a >= spec.n_attributes {
                return Err(bad_format(format!("attribute id {a} out of range")));
            }
            attrs.push(a);
        }
        let mut data = Vec::with_capacity(plen);
        for _ in 0..plen {
            data.push(r.f32()? as f64);
        }
        let payload = if spec.video_mode {
            Payload::Video(Tensor::new(
                vec![spec.video_frames, spec.video_height, spec.video_width, 3],
                data,
            )?)
        } else {
            Payload::Features(Tensor::new(vec![spec.c_prime, spec.t_prime], data)?)
        };
        Ok(Example {
            label,
            attrs,
            payload,
        })
    };

    let mut train = Vec::with_capacity(train_count);
    for _ in 0..train_count {
        train.push(read_example(&mut r)?);
    }
    let mut test = Vec::with_capacity(test_count);
    for _ in 0..test_count {
        test.push(read_example(&mut r)?);
    }
    if r.pos != raw.len() {
        return Err(bad_format("trailing bytes after last example"));
    }

    let prototypes = generate_prototypes(spec.n_attributes, spec.prototype_dim(), spec.seed)?;
    let classes = define_classes(&spec)?;
    Ok(Dataset {
        spec,
        classes,
        prototypes,
        train,
        test,
    })
}
