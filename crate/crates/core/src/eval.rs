//! Dataset evaluation. The model is read-only here, so test examples can
//! fan out across worker threads; `FINEFORMER_THREADS` caps the worker
//! count (default 1). Predictions are reassembled in input order, keeping
//! results identical at any thread count.

use std::env;

use crate::arch::{spatial_avg_pool, BackboneStub, Model};
use crate::error::{Error, Result};
use crate::metrics::{argmax_lowest, eval_report, EvalReport};
use crate::params::ParamStore;
use crate::synthdata::Example;
use crate::tensor::Tensor;

pub fn thread_count() -> usize {
    env::var("FINEFORMER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn predict_one<M: Model + ?Sized>(
    model: &M,
    store: &ParamStore,
    example: &Example,
    stub: Option<&BackboneStub>,
) -> Result<usize> {
    let feats = example.features(stub)?;
    let logits = model.logits_for(store, &feats)?;
    Ok(argmax_lowest(logits.data()))
}

pub fn predict_examples<M: Model + ?Sized>(
    model: &M,
    store: &ParamStore,
    examples: &[Example],
    stub: Option<&BackboneStub>,
) -> Result<Vec<usize>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let threads = thread_count().min(examples.len());
    if threads <= 1 {
        return examples
            .iter()
            .map(|ex| predict_one(model, store, ex, stub))
            .collect();
    }
    let chunk = examples.len().div_ceil(threads);
    let collected: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|slice| {
                s.spawn(move || {
                    slice
                        .iter()
                        .map(|ex| predict_one(model, store, ex, stub))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(examples.len());
    for r in collected {
        out.extend(r?);
    }
    Ok(out)
}

pub fn evaluate<M: Model + ?Sized>(
    model: &M,
    store: &ParamStore,
    examples: &[Example],
    stub: Option<&BackboneStub>,
) -> Result<EvalReport> {
    let predictions = predict_examples(model, store, examples, stub)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    eval_report(&predictions, &labels, model.num_classes())
}

/// Average the logits of `num_clips` temporally-strided windows with evenly
/// spaced start offsets. One clip reduces to a single forward.
pub fn multi_clip_logits<M: Model + ?Sized>(
    model: &M,
    store: &ParamStore,
    stub: &BackboneStub,
    video: &Tensor,
    num_clips: usize,
) -> Result<Tensor> {
    if num_clips == 0 {
        return Err(Error::Config("num_clips must be >= 1".into()));
    }
    let shape = video.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::ShapeMismatch {
            op: "multi_clip_eval",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0, 3],
        });
    }
    let frames = shape[0];
    let stride = frames / stub.t_prime;
    if stride == 0 {
        return Err(Error::Config(format!(
            "video of {frames} frames is too short for {} tokens",
            stub.t_prime
        )));
    }
    let span = (stub.t_prime - 1) * stride + 1;
    let avail = frames - span;
    if avail + 1 < num_clips {
        return Err(Error::Config(format!(
            "video of {frames} frames fits only {} of {num_clips} requested clip offsets",
            avail + 1
        )));
    }
    let mut sum: Option<Vec<f64>> = None;
    for clip in 0..num_clips {
        let offset = if num_clips == 1 {
            0
        } else {
            ((clip as f64) * (avail as f64) / (num_clips as f64 - 1.0)).round() as usize
        };
        let volume = stub.forward_strided(video, offset, stride)?;
        let feats = spatial_avg_pool(&volume);
        let logits = model.logits_for(store, &feats)?;
        match &mut sum {
            Some(acc) => acc.iter_mut().zip(logits.data()).for_each(|(a, v)| *a += v),
            None => sum = Some(logits.data().to_vec()),
        }
    }
    let mut data = sum.expect("at least one clip");
    let inv = 1.0 / num_clips as f64;
    data.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![model.num_classes()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{MeanPoolBaseline, ModelConfig};
    use crate::synthdata::{generate, SyntheticSpec};

    fn video_setup() -> (SyntheticSpec, ModelConfig, BackboneStub) {
        let spec = SyntheticSpec::desk_video();
        let cfg = ModelConfig {
            c_prime: spec.c_prime,
            t_prime: spec.t_prime,
            n_attributes: spec.n_attributes,
            num_classes: spec.num_classes,
            ..ModelConfig::desk_default()
        };
        let stub = BackboneStub::new(&cfg, 11);
        (spec, cfg, stub)
    }

    #[test]
    fn prediction_order_is_thread_independent() {
        let spec = SyntheticSpec {
            train_per_class: 2,
            test_per_class: 4,
            ..SyntheticSpec::desk_default()
        };
        let ds = generate(&spec).unwrap();
        let cfg = ModelConfig::desk_default();
        let mut store = ParamStore::new();
        let model = MeanPoolBaseline::init(&mut store, &cfg, 3).unwrap();

        env::remove_var("FINEFORMER_THREADS");
        let serial = predict_examples(&model, &store, &ds.test, None).unwrap();
        env::set_var("FINEFORMER_THREADS", "4");
        let parallel = predict_examples(&model, &store, &ds.test, None).unwrap();
        env::remove_var("FINEFORMER_THREADS");
        assert_eq!(serial, parallel);
        assert_eq!(serial.len(), ds.test.len());
    }

    #[test]
    fn single_clip_equals_plain_forward() {
        let (spec, cfg, stub) = video_setup();
        let ds = generate(&spec).unwrap();
        let mut store = ParamStore::new();
        let model = MeanPoolBaseline::init(&mut store, &cfg, 5).unwrap();
        let video = match &ds.test[0].payload {
            crate::synthdata::Payload::Video(v) => v.clone(),
            _ => unreachable!(),
        };
        let single = multi_clip_logits(&model, &store, &stub, &video, 1).unwrap();
        let direct = model
            .logits_for(&store, &ds.test[0].features(Some(&stub)).unwrap())
            .unwrap();
        assert_eq!(single.data(), direct.data());
    }

    #[test]
    fn constant_video_multi_clip_equals_single() {
        let (_, cfg, stub) = video_setup();
        let mut store = ParamStore::new();
        let model = MeanPoolBaseline::init(&mut store, &cfg, 5).unwrap();
        let video = Tensor::filled(vec![23, 8, 8, 3], 0.4);
        let one = multi_clip_logits(&model, &store, &stub, &video, 1).unwrap();
        let eight = multi_clip_logits(&model, &store, &stub, &video, 8).unwrap();
        for (a, b) in one.data().iter().zip(eight.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_clip_is_mean_of_per_clip_logits() {
        let (spec, cfg, stub) = video_setup();
        let ds = generate(&spec).unwrap();
        let mut store = ParamStore::new();
        let model = MeanPoolBaseline::init(&mut store, &cfg, 5).unwrap();
        let video = match &ds.test[1].payload {
            crate::synthdata::Payload::Video(v) => v.clone(),
            _ => unreachable!(),
        };
        let num_clips = 4;
        let combined = multi_clip_logits(&model, &store, &stub, &video, num_clips).unwrap();

        let frames = video.shape()[0];
        let stride = frames / stub.t_prime;
        let avail = frames - ((stub.t_prime - 1) * stride + 1);
        let mut manual = vec![0.0; cfg.num_classes];
        for clip in 0..num_clips {
            let offset =
                ((clip as f64) * (avail as f64) / (num_clips as f64 - 1.0)).round() as usize;
            let feats = spatial_avg_pool(&stub.forward_strided(&video, offset, stride).unwrap());
            let logits = model.logits_for(&store, &feats).unwrap();
            manual.iter_mut().zip(logits.data()).for_each(|(m, v)| *m += v);
        }
        manual.iter_mut().for_each(|v| *v /= num_clips as f64);
        for (a, b) in combined.data().iter().zip(&manual) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_video_rejected() {
        let (_, cfg, stub) = video_setup();
        let mut store = ParamStore::new();
        let model = MeanPoolBaseline::init(&mut store, &cfg, 5).unwrap();
        // t_prime=4: 3 frames cannot host one window
        let video = Tensor::zeros(vec![3, 8, 8, 3]);
        assert!(multi_clip_logits(&model, &store, &stub, &video, 1).is_err());
        // 8 frames: stride 2, span 7, only 2 offsets available
        let video = Tensor::zeros(vec![8, 8, 8, 3]);
        assert!(multi_clip_logits(&model, &store, &stub, &video, 8).is_err());
    }
}
