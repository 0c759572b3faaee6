//! The five subcommands.
//!
//! Every command is a pure function of its resolved config and input files:
//! rerunning with the same inputs produces byte-identical outputs. Exit
//! codes: 0 success, 1 usage or config problems, 2 numerical failures
//! (gradient check violations, non-finite training loss).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fineformer_core::metrics::{argmax_lowest, format_percent};
use fineformer_core::synthdata::bag_of_features_bayes_bound;
use fineformer_core::training::restore_checkpoint;
use fineformer_core::{
    cross_attention_diagnostic, eval_report, evaluate, generate, load_dataset, multi_clip_logits,
    run_full_suite, save_dataset, train, BackboneStub, Checkpoint, CrossEncoderModel, Dataset,
    Error, EvalReport, MeanPoolBaseline, Model, ParamStore, Payload, TrainOptions,
    VisionEncoderModel,
};

use crate::config::{spec_entries, ModelKind, RunConfig};

pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } => 2,
            Error::Training(msg) if msg.contains("non-finite") => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

const RESOLVED_CONFIG: &str = "config.resolved.ini";

fn require_out<'a>(out: Option<&'a Path>, cmd: &str) -> Result<&'a Path, Failure> {
    out.ok_or_else(|| Failure::usage(format!("{cmd} needs --out DIR for its outputs")))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

/// Create the output directory and drop the fully-resolved config into it.
fn prepare_out(out: &Path, cfg: &RunConfig) -> CmdResult {
    fs::create_dir_all(out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.render())
}

fn dataset_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.dataset.clone().unwrap_or_else(|| out.join("dataset.ffds"))
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint_final.ffck"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => {
            Failure::usage(format!("cannot read checkpoint {}: {io} (run train first?)", path.display()))
        }
        other => Failure::from(other),
    })
}

/// Load a dataset and insist it matches the `[data]` section, so training
/// and evaluation can never silently run on stale or foreign data.
fn load_checked_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset, Failure> {
    let ds = load_dataset(path).map_err(|e| match e {
        Error::Io(io) => {
            Failure::usage(format!("cannot read dataset {}: {io} (run gen-data first?)", path.display()))
        }
        other => Failure::from(other),
    })?;
    if ds.spec != cfg.data {
        let have = spec_entries(&ds.spec);
        let want = spec_entries(&cfg.data);
        let diff = have
            .iter()
            .zip(&want)
            .find(|(h, w)| h.1 != w.1)
            .map(|(h, w)| format!("data.{} = {} but the config says {}", h.0, h.1, w.1))
            .unwrap_or_else(|| "spec differs".into());
        return Err(Failure::usage(format!(
            "dataset {} was generated with {diff}; regenerate with gen-data or fix the config",
            path.display()
        )));
    }
    Ok(ds)
}

enum BuiltModel {
    Baseline(MeanPoolBaseline),
    Vision(VisionEncoderModel),
    Cross(CrossEncoderModel),
}

impl BuiltModel {
    fn init(cfg: &RunConfig, store: &mut ParamStore) -> Result<Self, Failure> {
        let mcfg = cfg.model();
        Ok(match cfg.kind {
            ModelKind::Baseline => {
                Self::Baseline(MeanPoolBaseline::init(store, &mcfg, cfg.model_seed)?)
            }
            ModelKind::Vision => {
                Self::Vision(VisionEncoderModel::init(store, &mcfg, cfg.model_seed)?)
            }
            ModelKind::Cross => Self::Cross(CrossEncoderModel::init(store, &mcfg, cfg.model_seed)?),
        })
    }

    fn as_dyn(&self) -> &dyn Model {
        match self {
            Self::Baseline(m) => m,
            Self::Vision(m) => m,
            Self::Cross(m) => m,
        }
    }
}

fn make_stub(cfg: &RunConfig) -> Option<BackboneStub> {
    cfg.data
        .video_mode
        .then(|| BackboneStub::new(&cfg.model(), cfg.backbone_seed))
}

pub fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let out = require_out(out, "gen-data")?;
    prepare_out(out, cfg)?;
    let ds = generate(&cfg.data)?;
    let path = dataset_path(cfg, out);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::usage(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    save_dataset(&ds, &path)?;
    println!(
        "dataset: {} train / {} test examples over {} classes",
        ds.train.len(),
        ds.test.len(),
        cfg.data.num_classes
    );
    println!(
        "order-blind accuracy bound: {:.4}",
        bag_of_features_bayes_bound(&cfg.data)
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train_model(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let out = require_out(out, "train")?;
    prepare_out(out, cfg)?;
    let ds = load_checked_dataset(cfg, &dataset_path(cfg, out))?;
    let mcfg = cfg.model();
    let mut store = ParamStore::new();
    let model = BuiltModel::init(cfg, &mut store)?;
    let stub = make_stub(cfg);
    let opts = TrainOptions {
        out_dir: Some(out),
        resume_from: cfg.resume.as_deref(),
        epoch_limit: None,
    };
    let result = train(
        model.as_dyn(),
        &mut store,
        stub.as_ref(),
        &ds.train,
        &ds.test,
        &mcfg,
        &cfg.train,
        &opts,
    )?;
    for e in &result.history {
        println!(
            "epoch {}: lr={} train_loss={:.6} top1={} mean_class_acc={}",
            e.epoch,
            e.lr,
            e.train_loss,
            format_percent(e.top1),
            format_percent(e.mean_class_acc)
        );
    }
    if let Some(best) = result.best_epoch {
        println!("best epoch {best}: top1={}", format_percent(result.best_top1));
    }
    println!("wrote {}", out.join("checkpoint_final.ffck").display());
    Ok(())
}

fn multi_clip_report(
    model: &dyn Model,
    store: &ParamStore,
    stub: &BackboneStub,
    examples: &[fineformer_core::Example],
    clips: usize,
    num_classes: usize,
) -> Result<EvalReport, Failure> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let video = match &ex.payload {
            Payload::Video(v) => v,
            Payload::Features(_) => {
                return Err(Failure::usage(
                    "eval.num_clips > 1 needs raw-video examples".to_string(),
                ))
            }
        };
        let logits = multi_clip_logits(model, store, stub, video, clips)?;
        predictions.push(argmax_lowest(logits.data()));
        labels.push(ex.label);
    }
    Ok(eval_report(&predictions, &labels, num_classes)?)
}

pub fn eval_checkpoint(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let out = require_out(out, "eval")?;
    prepare_out(out, cfg)?;
    let ds = load_checked_dataset(cfg, &dataset_path(cfg, out))?;
    let mcfg = cfg.model();
    let mut store = ParamStore::new();
    let model = BuiltModel::init(cfg, &mut store)?;
    let ckpt_path = checkpoint_path(cfg, out);
    let ckpt = load_checkpoint(&ckpt_path)?;
    restore_checkpoint(&ckpt, &mcfg, &cfg.train, &mut store)?;
    let stub = make_stub(cfg);
    let report = if cfg.eval_clips == 1 {
        evaluate(model.as_dyn(), &store, &ds.test, stub.as_ref())?
    } else {
        let stub = stub.as_ref().ok_or_else(|| {
            Failure::usage("eval.num_clips > 1 needs a video-mode dataset".to_string())
        })?;
        multi_clip_report(model.as_dyn(), &store, stub, &ds.test, cfg.eval_clips, mcfg.num_classes)?
    };
    println!("checkpoint: {}", ckpt_path.display());
    println!("examples: {}", report.total);
    println!("top1: {}", format_percent(report.top1));
    println!("mean_class_acc: {}", format_percent(report.mean_class));
    if !report.excluded_classes.is_empty() {
        let list = report
            .excluded_classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        println!("classes without test examples: {list}");
    }
    let report_path = out.join("eval_report.csv");
    write_file(&report_path, &report.to_csv())?;
    println!("wrote {}", report_path.display());
    Ok(())
}

pub fn gradient_suite(_cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let report = run_full_suite()?;
    let mut text = String::new();
    for r in &report.results {
        let _ = writeln!(text, "{r}");
    }
    let passed = report.results.iter().filter(|r| r.passed()).count();
    let _ = writeln!(text, "gradient suite: {passed}/{} within tolerance", report.results.len());
    print!("{text}");
    if let Some(out) = out {
        prepare_out(out, _cfg)?;
        write_file(&out.join("gradcheck_report.txt"), &text)?;
    }
    if let Some(worst) = report.worst() {
        if !report.all_passed() {
            return Err(Failure::numerical(format!(
                "gradient suite failed: {} reached rel err {:.3e} (tolerance {:.0e})",
                worst.name, worst.max_rel_err, worst.tolerance
            )));
        }
    }
    Ok(())
}

pub fn attention_report(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let out = require_out(out, "attn-report")?;
    if cfg.kind != ModelKind::Cross {
        return Err(Failure::usage(format!(
            "attn-report needs model.kind = cross (got {})",
            cfg.kind
        )));
    }
    prepare_out(out, cfg)?;
    let ds = load_checked_dataset(cfg, &dataset_path(cfg, out))?;
    let mcfg = cfg.model();
    let mut store = ParamStore::new();
    let model = match BuiltModel::init(cfg, &mut store)? {
        BuiltModel::Cross(m) => m,
        _ => unreachable!("kind checked above"),
    };
    let ckpt = load_checkpoint(&checkpoint_path(cfg, out))?;
    restore_checkpoint(&ckpt, &mcfg, &cfg.train, &mut store)?;
    let stub = make_stub(cfg);

    let (n, t) = (mcfg.n_attributes, mcfg.t_prime);
    let mut mean = vec![0.0; n * t];
    let mut ratio_sum = vec![0.0; n];
    let mut ratio_count = vec![0usize; n];
    for ex in &ds.test {
        let feats = ex.features(stub.as_ref())?;
        let diag = cross_attention_diagnostic(&model, &store, &feats)?;
        let d = diag.data();
        for (acc, v) in mean.iter_mut().zip(d) {
            *acc += v;
        }
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
            // Only examples where the attribute is present but not
            // everywhere say anything about alignment.
            if on_n > 0 && off_n > 0 {
                ratio_sum[attr] += (on / on_n as f64) / (off / off_n as f64);
                ratio_count[attr] += 1;
            }
        }
    }
    let count = ds.test.len().max(1) as f64;

    let mut matrix = String::from("token");
    for step in 0..t {
        let _ = write!(matrix, ",t{step}");
    }
    matrix.push('\n');
    for attr in 0..n {
        let _ = write!(matrix, "{attr}");
        for step in 0..t {
            let _ = write!(matrix, ",{:.6}", mean[attr * t + step] / count);
        }
        matrix.push('\n');
    }
    let matrix_path = out.join("attn_matrix.csv");
    write_file(&matrix_path, &matrix)?;

    let mut summary = String::from("attribute,examples,mean_ratio,matched\n");
    let mut matched = 0usize;
    let mut covered = 0usize;
    for attr in 0..n {
        if ratio_count[attr] == 0 {
            let _ = writeln!(summary, "{attr},0,none,no");
            continue;
        }
        covered += 1;
        let ratio = ratio_sum[attr] / ratio_count[attr] as f64;
        let hit = ratio > 1.0;
        matched += hit as usize;
        let _ = writeln!(
            summary,
            "{attr},{},{ratio:.4},{}",
            ratio_count[attr],
            if hit { "yes" } else { "no" }
        );
    }
    let summary_path = out.join("attn_summary.csv");
    write_file(&summary_path, &summary)?;

    println!("attention match ratio > 1 for {matched}/{covered} attributes with test coverage");
    println!("wrote {}", matrix_path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}
