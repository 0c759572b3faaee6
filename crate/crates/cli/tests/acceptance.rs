//! Acceptance gate. One test per criterion, so the test harness prints one
//! pass/fail line for each. Run with `-- --nocapture` to see the measured
//! numbers behind every verdict.
//!
//! The ordering criteria (3, 4, 5) share one set of training runs: five
//! seeds of each model variant on the default synthetic benchmark, built
//! lazily on first use. Expect the full gate to take on the order of ten
//! minutes on one core; the gradient suite alone is sub-second.

use std::sync::LazyLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use fineformer_core::metrics::{mean_class_accuracy, top1_accuracy};
use fineformer_core::nn::AttentionTrace;
use fineformer_core::synthdata::{
    bag_of_features_bayes_bound, bayes_bound_bruteforce, define_classes,
};
use fineformer_core::{
    clip_gradients, cross_attention_diagnostic, generate, lr_schedule, run_full_suite, train,
    BackboneStub, CrossEncoderModel, Dataset, Graph, MeanPoolBaseline, Model, ModelConfig,
    OptimizerKind, OptimizerState, ParamStore, ScheduleKind, SyntheticSpec, Tensor,
    TrainConfig, TrainOptions, VisionEncoderModel,
};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn protocol(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::desk_sgd() }
}

fn final_top1<M: Model + ?Sized>(
    model: &M,
    store: &mut ParamStore,
    ds: &Dataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> f64 {
    let out = train(
        model,
        store,
        None,
        &ds.train,
        &ds.test,
        mcfg,
        tcfg,
        &TrainOptions::default(),
    )
    .expect("training run");
    out.history.last().expect("at least one epoch").top1
}

struct CrossRun {
    top1: f64,
    model: CrossEncoderModel,
    store: ParamStore,
}

struct Fixture {
    ds: Dataset,
    baseline: Vec<f64>,
    vision_b1: Vec<f64>,
    vision_b3: Vec<f64>,
    vision_b2: Vec<f64>,
    cross: Vec<CrossRun>,
    /// Wall time of the criterion-3 runs (baseline, B=1, B=3).
    ordering_runtime: Duration,
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(|| {
    let ds = generate(&SyntheticSpec::desk_default()).expect("benchmark generates");
    let base_cfg = ModelConfig::desk_default();

    let vision_runs = |layers: usize| -> Vec<f64> {
        let mcfg = ModelConfig { vision_layers: layers, ..base_cfg.clone() };
        SEEDS
            .iter()
            .map(|&s| {
                let mut store = ParamStore::new();
                let model = VisionEncoderModel::init(&mut store, &mcfg, 100 + s).expect("init");
                final_top1(&model, &mut store, &ds, &mcfg, &protocol(s))
            })
            .collect()
    };

    let started = Instant::now();
    let baseline = SEEDS
        .iter()
        .map(|&s| {
            let mut store = ParamStore::new();
            let model = MeanPoolBaseline::init(&mut store, &base_cfg, 100 + s).expect("init");
            final_top1(&model, &mut store, &ds, &base_cfg, &protocol(s))
        })
        .collect();
    let vision_b1 = vision_runs(1);
    let vision_b3 = vision_runs(3);
    let ordering_runtime = started.elapsed();

    let vision_b2 = vision_runs(2);
    let cross = SEEDS
        .iter()
        .map(|&s| {
            let mut store = ParamStore::new();
            let model = CrossEncoderModel::init(&mut store, &base_cfg, 100 + s).expect("init");
            let top1 = final_top1(&model, &mut store, &ds, &base_cfg, &protocol(s));
            CrossRun { top1, model, store }
        })
        .collect();

    Fixture { ds, baseline, vision_b1, vision_b3, vision_b2, cross, ordering_runtime }
});

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let report = run_full_suite().expect("suite evaluates");
    let elapsed = started.elapsed();
    let worst = report.worst().expect("non-empty suite");
    println!(
        "criterion 1: {} checks, worst {} at rel err {:.3e} (tol {:.0e}), {:.1?}",
        report.results.len(),
        worst.name,
        worst.max_rel_err,
        worst.tolerance,
        elapsed
    );
    let failures: Vec<String> = report
        .results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.to_string())
        .collect();
    assert!(failures.is_empty(), "gradient checks failed:\n{}", failures.join("\n"));
    assert!(elapsed < Duration::from_secs(120), "suite took {elapsed:?}, budget is 2 min");
}

fn tiny_arch() -> ModelConfig {
    ModelConfig {
        h: 8,
        heads: 2,
        vision_layers: 2,
        cross_layers: 2,
        c_prime: 6,
        t_prime: 4,
        n_attributes: 3,
        num_classes: 5,
        h_prime: 2,
        w_prime: 2,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn permute_cols(x: &Tensor, perm: &[usize]) -> Tensor {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        for (dst, &src) in perm.iter().enumerate() {
            data[r * cols + dst] = x.at(r, src);
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[test]
fn criterion_2_architectural_invariants() {
    let cfg = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // Permutation equivariance: zero the positional table and time order
    // must stop mattering, to 1e-9.
    let mut store = ParamStore::new();
    let vision = VisionEncoderModel::init(&mut store, &cfg, 1).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let pos = store.find("vision.pos").unwrap();
    let pos_shape = store.value(pos).shape().to_vec();
    *store.value_mut(pos) = Tensor::zeros(pos_shape);
    let feats = rand_tensor(&mut rng, vec![cfg.c_prime, cfg.t_prime], 1.0);
    let mut perm: Vec<usize> = (0..cfg.t_prime).collect();
    perm.shuffle(&mut rng);
    let a = vision.logits_for(&store, &feats).unwrap();
    let b = vision.logits_for(&store, &permute_cols(&feats, &perm)).unwrap();
    let equivariance_dev = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(equivariance_dev < 1e-9, "equivariance deviation {equivariance_dev:.3e}");

    // Attention rows are probability distributions, to 1e-12, in both
    // architectures.
    let mut row_dev: f64 = 0.0;
    {
        let mut check_rows = |trace: &AttentionTrace, g: &Graph| {
            for layer in &trace.layers {
                for &head in layer {
                    let p = g.value(head);
                    for r in 0..p.rows() {
                        let sum: f64 = p.row(r).iter().sum();
                        row_dev = row_dev.max((sum - 1.0).abs());
                    }
                }
            }
        };
        let mut g = Graph::new();
        let fv = g.constant(feats.clone());
        let mut trace = AttentionTrace::default();
        vision.forward_traced(&mut g, &store, fv, Some(&mut trace)).unwrap();
        check_rows(&trace, &g);

        let mut cross_store = ParamStore::new();
        let cross = CrossEncoderModel::init(&mut cross_store, &cfg, 2).unwrap();
        randomize(&mut cross_store, &mut rng, 0.5);
        let mut g = Graph::new();
        let fv = g.constant(feats.clone());
        let mut trace = AttentionTrace::default();
        cross.forward_traced(&mut g, &cross_store, fv, Some(&mut trace)).unwrap();
        check_rows(&trace, &g);
    }
    assert!(row_dev < 1e-12, "attention row sums deviate by {row_dev:.3e}");

    // The cross encoder splits back into exactly T'xh visual and Nxh text
    // states.
    let mut cross_store = ParamStore::new();
    let cross = CrossEncoderModel::init(&mut cross_store, &cfg, 3).unwrap();
    let mut g = Graph::new();
    let fv = g.constant(feats.clone());
    let (vis, txt) = cross.encode_split(&mut g, &cross_store, fv, None).unwrap();
    assert_eq!(g.shape(vis), &[cfg.t_prime, cfg.h]);
    assert_eq!(g.shape(txt), &[cfg.n_attributes, cfg.h]);

    // The backbone is frozen: training updates no backbone state, and its
    // features stay bit-identical.
    let spec = SyntheticSpec {
        train_per_class: 12,
        test_per_class: 6,
        ..SyntheticSpec::desk_video()
    };
    let ds = generate(&spec).unwrap();
    let mcfg = ModelConfig {
        h: 16,
        heads: 2,
        vision_layers: 1,
        cross_layers: 1,
        c_prime: spec.c_prime,
        t_prime: spec.t_prime,
        n_attributes: spec.n_attributes,
        num_classes: spec.num_classes,
        h_prime: 2,
        w_prime: 2,
    };
    let stub = BackboneStub::new(&mcfg, 7);
    let before = ds.train[0].features(Some(&stub)).unwrap();
    let mut store = ParamStore::new();
    let model = VisionEncoderModel::init(&mut store, &mcfg, 8).unwrap();
    for (_, entry) in store.iter() {
        assert!(
            entry.name.starts_with("vision."),
            "backbone state leaked into the trainable store: {}",
            entry.name
        );
    }
    let tcfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::desk_sgd() };
    train(&model, &mut store, Some(&stub), &ds.train, &ds.test, &mcfg, &tcfg, &TrainOptions::default())
        .unwrap();
    let after = ds.train[0].features(Some(&stub)).unwrap();
    let backbone_same = before
        .data()
        .iter()
        .zip(after.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    assert!(backbone_same, "backbone features changed across training");

    // Interrupt/resume reproduces the uninterrupted run bit-exactly.
    let spec = SyntheticSpec {
        n_attributes: 4,
        num_classes: 4,
        t_prime: 4,
        c_prime: 8,
        train_per_class: 8,
        test_per_class: 4,
        ..SyntheticSpec::desk_default()
    };
    let ds = generate(&spec).unwrap();
    let mcfg = ModelConfig {
        h: 16,
        heads: 2,
        vision_layers: 1,
        cross_layers: 1,
        c_prime: spec.c_prime,
        t_prime: spec.t_prime,
        n_attributes: spec.n_attributes,
        num_classes: spec.num_classes,
        h_prime: 2,
        w_prime: 2,
    };
    let tcfg = TrainConfig { epochs: 4, batch_size: 8, seed: 3, ..TrainConfig::desk_sgd() };

    let mut ref_store = ParamStore::new();
    let ref_model = VisionEncoderModel::init(&mut ref_store, &mcfg, 9).unwrap();
    let reference = train(
        &ref_model, &mut ref_store, None, &ds.train, &ds.test, &mcfg, &tcfg,
        &TrainOptions::default(),
    )
    .unwrap();

    let dir = TempDir::new().unwrap();
    let mut store = ParamStore::new();
    let model = VisionEncoderModel::init(&mut store, &mcfg, 9).unwrap();
    let first_half = TrainOptions {
        out_dir: Some(dir.path()),
        resume_from: None,
        epoch_limit: Some(2),
    };
    train(&model, &mut store, None, &ds.train, &ds.test, &mcfg, &tcfg, &first_half).unwrap();
    let ckpt = dir.path().join("checkpoint_final.ffck");
    let mut resumed_store = ParamStore::new();
    let resumed_model = VisionEncoderModel::init(&mut resumed_store, &mcfg, 9).unwrap();
    let second_half = TrainOptions {
        out_dir: Some(dir.path()),
        resume_from: Some(&ckpt),
        epoch_limit: None,
    };
    let resumed = train(
        &resumed_model, &mut resumed_store, None, &ds.train, &ds.test, &mcfg, &tcfg, &second_half,
    )
    .unwrap();
    for (a, b) in reference.history[2..].iter().zip(&resumed.history) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "resumed loss diverged");
        assert_eq!(a.top1.to_bits(), b.top1.to_bits(), "resumed accuracy diverged");
    }
    let resume_same = ref_store.ids().all(|id| {
        ref_store
            .value(id)
            .data()
            .iter()
            .zip(resumed_store.value(id).data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    assert!(resume_same, "resumed parameters diverged from the uninterrupted run");

    println!(
        "criterion 2: equivariance dev {equivariance_dev:.2e}, row-sum dev {row_dev:.2e}, \
         split shapes exact, backbone bit-identical, resume bit-exact"
    );
}

#[test]
fn criterion_3_temporal_semantics_ordering() {
    let spec = SyntheticSpec::desk_default();
    let closed_form = bag_of_features_bayes_bound(&spec);
    let brute = bayes_bound_bruteforce(&define_classes(&spec).unwrap());
    assert_eq!(closed_form, 0.75, "order-blind bound should be exactly 3/4");
    assert!((brute - closed_form).abs() < 1e-12, "brute force bound {brute}");

    let f = &*FIXTURE;
    let base = mean(&f.baseline);
    let b1 = mean(&f.vision_b1);
    let b3 = mean(&f.vision_b3);
    println!(
        "criterion 3: order-blind bound 0.75; baseline {base:.4} (cap 0.78), vision B=1 {b1:.4} \
         (floor 0.92), B=3 {b3:.4} (floor B1-0.01); runs took {:.0?}",
        f.ordering_runtime
    );
    assert!(base <= 0.78, "mean-pool baseline at {base:.4} beats the order-blind cap");
    assert!(b1 >= 0.92, "vision encoder B=1 at {b1:.4} misses the 0.92 floor");
    assert!(b3 >= b1 - 0.01, "B=3 at {b3:.4} fell more than 0.01 below B=1 at {b1:.4}");
    assert!(
        f.ordering_runtime < Duration::from_secs(900),
        "ordering runs took {:?}, budget is 15 min",
        f.ordering_runtime
    );
}

#[test]
fn criterion_4_cross_modal_parity() {
    let f = &*FIXTURE;
    let cross: Vec<f64> = f.cross.iter().map(|r| r.top1).collect();
    let cross_mean = mean(&cross);
    let b2 = mean(&f.vision_b2);
    println!(
        "criterion 4: cross encoder {cross_mean:.4} vs vision B=2 {b2:.4} (allowed gap 0.02, \
         floor 0.92)"
    );
    assert!(cross_mean >= 0.92, "cross encoder at {cross_mean:.4} misses the 0.92 floor");
    assert!(
        cross_mean >= b2 - 0.02,
        "cross encoder at {cross_mean:.4} trails capacity-matched vision {b2:.4} by more than 0.02"
    );
}

#[test]
fn criterion_5_attention_match_ratio_is_reported() {
    let f = &*FIXTURE;
    let spec = &f.ds.spec;
    let (n, t) = (spec.n_attributes, spec.t_prime);

    // Per attribute: mean over seeds of (mean over examples of
    // on-attribute mass / off-attribute mass) from the text-to-video rows.
    let mut seed_means = vec![0.0; n];
    let mut seed_counts = vec![0usize; n];
    for run in &f.cross {
        let mut ratio_sum = vec![0.0; n];
        let mut ratio_count = vec![0usize; n];
        for ex in &f.ds.test {
            let feats = ex.features(None).expect("feature payload");
            let diag = cross_attention_diagnostic(&run.model, &run.store, &feats).unwrap();
            let d = diag.data();
            for attr in 0..n {
                let (mut on, mut on_n, mut off, mut off_n) = (0.0, 0usize, 0.0, 0usize);
                for (step, &a) in ex.attrs.iter().enumerate() {
                    if a == attr {
                        on += d[attr * t + step];
                        on_n += 1;
                    } else {
                        off += d[attr * t + step];
                        off_n += 1;
                    }
                }
                if on_n > 0 && off_n > 0 {
                    ratio_sum[attr] += (on / on_n as f64) / (off / off_n as f64);
                    ratio_count[attr] += 1;
                }
            }
        }
        for attr in 0..n {
            if ratio_count[attr] > 0 {
                seed_means[attr] += ratio_sum[attr] / ratio_count[attr] as f64;
                seed_counts[attr] += 1;
            }
        }
    }

    let mut covered = 0usize;
    let mut matched = 0usize;
    let mut ratios = Vec::new();
    for attr in 0..n {
        if seed_counts[attr] == 0 {
            ratios.push("n/a".to_string());
            continue;
        }
        let r = seed_means[attr] / seed_counts[attr] as f64;
        ratios.push(format!("{r:.3}"));
        covered += 1;
        matched += (r > 1.0) as usize;
    }
    let threshold_met = matched * 2 >= covered;
    println!(
        "criterion 5 (soft, reported not gated): match ratio > 1.0 for {matched}/{covered} \
         attributes ({}); per-attribute [{}]",
        if threshold_met { "threshold met" } else { "threshold missed" },
        ratios.join(", ")
    );
    // Only the report itself is required.
    assert!(covered > 0, "diagnostic produced no attribute coverage");
}

#[test]
fn criterion_6_metric_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..100 {
        let classes = rng.random_range(2..=10usize);
        let len = rng.random_range(1..=60usize);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let preds: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();

        let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let top1_oracle = hits as f64 / len as f64;
        assert_eq!(top1_accuracy(&preds, &labels).unwrap(), top1_oracle);

        let mut sum = 0.0;
        let mut included = 0usize;
        for c in 0..classes {
            let total = labels.iter().filter(|&&l| l == c).count();
            if total == 0 {
                continue;
            }
            let class_hits = preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| **l == c && p == l)
                .count();
            sum += class_hits as f64 / total as f64;
            included += 1;
        }
        let mca = mean_class_accuracy(&preds, &labels, classes).unwrap();
        assert_eq!(mca.value, sum / included as f64);
    }

    // Under a Zipf-skewed class distribution, a predictor that only knows
    // the two head classes looks strong on top-1 while mean class accuracy
    // exposes it.
    let spec = SyntheticSpec {
        long_tail_exponent: Some(1.0),
        ..SyntheticSpec::desk_default()
    };
    let ds = generate(&spec).unwrap();
    let labels: Vec<usize> = ds.test.iter().map(|e| e.label).collect();
    let preds: Vec<usize> = labels.iter().map(|&l| if l <= 1 { l } else { 0 }).collect();
    let top1 = top1_accuracy(&preds, &labels).unwrap();
    let mca = mean_class_accuracy(&preds, &labels, spec.num_classes).unwrap().value;
    let gap = top1 - mca;
    println!(
        "criterion 6: 100 oracle sets exact; Zipf head-biased predictor top1 {top1:.4} vs mean \
         class {mca:.4}, gap {gap:.4} (> 0.15)"
    );
    assert!(gap > 0.15, "top1/mean-class gap {gap:.4} too small to show the divergence");
}

#[test]
fn criterion_7_schedule_and_optimizer_conformance() {
    // Step decay protocol: base 0.01, tenfold drops after epochs 90 and 110.
    let fixed = TrainConfig {
        lr: 0.01,
        milestones: vec![90, 110],
        epochs: 120,
        ..TrainConfig::desk_sgd()
    };
    assert_eq!(lr_schedule(&fixed, 89), 0.01);
    assert!((lr_schedule(&fixed, 90) - 0.001).abs() < 1e-15);
    assert!((lr_schedule(&fixed, 110) - 0.0001).abs() < 1e-15);

    // Cosine: exactly base/2 at the span midpoint and 0 at the final epoch.
    let cosine = TrainConfig {
        lr: 0.4,
        schedule: ScheduleKind::CosineWarmup,
        warmup_epochs: 0,
        epochs: 11,
        milestones: vec![],
        ..TrainConfig::desk_sgd()
    };
    assert!((lr_schedule(&cosine, 5) - 0.2).abs() < 1e-12);
    assert!(lr_schedule(&cosine, 10).abs() < 1e-12);

    // Clipping caps the global norm at 40 and preserves direction.
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::zeros(vec![2]), true).unwrap();
    let b = store.register("b", Tensor::zeros(vec![1]), true).unwrap();
    store.accumulate_grad(a, &[48.0, 36.0]);
    store.accumulate_grad(b, &[48.0]);
    let before: Vec<f64> = [store.grad(a), store.grad(b)].concat();
    let reported = clip_gradients(&mut store, 40.0).unwrap();
    let after: Vec<f64> = [store.grad(a), store.grad(b)].concat();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((reported - norm(&before)).abs() < 1e-9);
    assert!((norm(&after) - 40.0).abs() < 1e-9, "clipped norm {}", norm(&after));
    let cosine_sim = before.iter().zip(&after).map(|(x, y)| x * y).sum::<f64>()
        / (norm(&before) * norm(&after));
    assert!((cosine_sim - 1.0).abs() < 1e-9, "direction changed, cosine {cosine_sim}");

    // AdamW decoupling: with zero gradient the whole update is the decay
    // term, bit for bit.
    let adamw = TrainConfig {
        optimizer: OptimizerKind::AdamW,
        lr: 0.1,
        weight_decay: 0.05,
        clip_max_norm: None,
        ..TrainConfig::desk_adamw()
    };
    let mut store = ParamStore::new();
    let w = store
        .register("w", Tensor::new(vec![1], vec![2.0]).unwrap(), true)
        .unwrap();
    let mut opt = OptimizerState::new(OptimizerKind::AdamW, &store);
    store.zero_grads();
    opt.apply(&mut store, &adamw, adamw.lr).unwrap();
    let expected: f64 = 2.0 - 0.1 * 0.05 * 2.0;
    let got = store.value(w).item();
    assert_eq!(got.to_bits(), expected.to_bits(), "got {got}, want {expected}");

    println!(
        "criterion 7: step decay at 89/90/110 ok, cosine midpoint/endpoint ok, clip norm 40 \
         direction-preserving, AdamW zero-grad update equals decay term exactly"
    );
}
