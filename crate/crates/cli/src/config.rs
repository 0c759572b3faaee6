//! Run configuration for all subcommands.
//!
//! One flat `key = value` file with `[section]` headers drives every command.
//! Unknown sections and keys are rejected so typos fail loudly instead of
//! silently falling back to defaults, and every command writes the fully
//! resolved form next to its outputs as `config.resolved.ini`.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fineformer_core::{Error, ModelConfig, Result, SyntheticSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    Vision,
    Cross,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Vision => "vision",
            ModelKind::Cross => "cross",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "vision" => Ok(ModelKind::Vision),
            "cross" => Ok(ModelKind::Cross),
            other => Err(Error::Config(format!(
                "unknown model kind '{other}' (expected baseline, vision, or cross)"
            ))),
        }
    }
}

/// Everything a run needs: dataset spec, architecture, optimizer protocol,
/// evaluation options, and file locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub kind: ModelKind,
    pub h: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub cross_layers: usize,
    pub h_prime: usize,
    pub w_prime: usize,
    pub model_seed: u64,
    pub backbone_seed: u64,
    pub train: TrainConfig,
    pub eval_clips: usize,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk_default();
        Self {
            data: SyntheticSpec::desk_default(),
            kind: ModelKind::Vision,
            h: model.h,
            heads: model.heads,
            vision_layers: model.vision_layers,
            cross_layers: model.cross_layers,
            h_prime: model.h_prime,
            w_prime: model.w_prime,
            model_seed: 11,
            backbone_seed: 42,
            train: TrainConfig::desk_sgd(),
            eval_clips: 1,
            dataset: None,
            checkpoint: None,
            resume: None,
        }
    }
}

const SECTIONS: [&str; 5] = ["data", "model", "train", "eval", "paths"];

fn bad_value(key: &str, expected: &str, value: &str) -> Error {
    Error::Config(format!("{key}: expected {expected}, got '{value}'"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad_value(key, "a non-negative integer", value))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| bad_value(key, "a non-negative integer", value))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad_value(key, "a number", value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, "true or false", value)),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_f64(key, value).map(Some)
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    (value != "none").then(|| PathBuf::from(value))
}

fn parse_milestones(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(vec![]);
    }
    value
        .split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

fn format_milestones(milestones: &[usize]) -> String {
    if milestones.is_empty() {
        "none".into()
    } else {
        milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn format_opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

fn format_opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

/// `[data]` keys in file order with their rendered values; shared between
/// config rendering and the dataset-vs-config mismatch diagnostic.
pub fn spec_entries(spec: &SyntheticSpec) -> Vec<(&'static str, String)> {
    vec![
        ("n_attributes", spec.n_attributes.to_string()),
        ("num_classes", spec.num_classes.to_string()),
        ("t_prime", spec.t_prime.to_string()),
        ("c_prime", spec.c_prime.to_string()),
        ("noise_sigma", spec.noise_sigma.to_string()),
        ("ordered_pair_fraction", spec.ordered_pair_fraction.to_string()),
        ("train_per_class", spec.train_per_class.to_string()),
        ("test_per_class", spec.test_per_class.to_string()),
        ("seed", spec.seed.to_string()),
        ("long_tail_exponent", format_opt_f64(spec.long_tail_exponent)),
        ("video_mode", spec.video_mode.to_string()),
        ("video_frames", spec.video_frames.to_string()),
        ("video_height", spec.video_height.to_string()),
        ("video_width", spec.video_width.to_string()),
    ]
}

impl RunConfig {
    /// Assemble the architecture config; shared extents come from `[data]`
    /// so the model can never silently disagree with the dataset.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            h: self.h,
            heads: self.heads,
            vision_layers: self.vision_layers,
            cross_layers: self.cross_layers,
            c_prime: self.data.c_prime,
            t_prime: self.data.t_prime,
            n_attributes: self.data.n_attributes,
            num_classes: self.data.num_classes,
            h_prime: self.h_prime,
            w_prime: self.w_prime,
        }
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        for item in overrides {
            cfg.apply_override(item)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {lineno}: malformed section header '{line}'"))
                })?;
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "line {lineno}: unknown section [{name}] (expected one of {})",
                        SECTIONS.join(", ")
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected 'key = value', got '{line}'"))
            })?;
            let section = section.as_deref().ok_or_else(|| {
                Error::Config(format!("line {lineno}: key before any [section] header"))
            })?;
            let dotted = format!("{section}.{}", key.trim());
            if seen.contains(&dotted) {
                return Err(Error::Config(format!("line {lineno}: duplicate key {dotted}")));
            }
            self.set(&dotted, value.trim())
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
            seen.push(dotted);
        }
        Ok(())
    }

    /// Apply one `--set section.key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set needs section.key=value, got '{item}'"))
        })?;
        self.set(key.trim(), value.trim())
    }

    fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted.split_once('.').ok_or_else(|| {
            Error::Config(format!("key '{dotted}' is missing its section prefix"))
        })?;
        match (section, key) {
            ("data", "n_attributes") => self.data.n_attributes = parse_usize(dotted, value)?,
            ("data", "num_classes") => self.data.num_classes = parse_usize(dotted, value)?,
            ("data", "t_prime") => self.data.t_prime = parse_usize(dotted, value)?,
            ("data", "c_prime") => self.data.c_prime = parse_usize(dotted, value)?,
            ("data", "noise_sigma") => self.data.noise_sigma = parse_f64(dotted, value)?,
            ("data", "ordered_pair_fraction") => {
                self.data.ordered_pair_fraction = parse_f64(dotted, value)?
            }
            ("data", "train_per_class") => self.data.train_per_class = parse_usize(dotted, value)?,
            ("data", "test_per_class") => self.data.test_per_class = parse_usize(dotted, value)?,
            ("data", "seed") => self.data.seed = parse_u64(dotted, value)?,
            ("data", "long_tail_exponent") => {
                self.data.long_tail_exponent = parse_opt_f64(dotted, value)?
            }
            ("data", "video_mode") => self.data.video_mode = parse_bool(dotted, value)?,
            ("data", "video_frames") => self.data.video_frames = parse_usize(dotted, value)?,
            ("data", "video_height") => self.data.video_height = parse_usize(dotted, value)?,
            ("data", "video_width") => self.data.video_width = parse_usize(dotted, value)?,
            ("model", "kind") => self.kind = value.parse()?,
            ("model", "h") => self.h = parse_usize(dotted, value)?,
            ("model", "heads") => self.heads = parse_usize(dotted, value)?,
            ("model", "vision_layers") => self.vision_layers = parse_usize(dotted, value)?,
            ("model", "cross_layers") => self.cross_layers = parse_usize(dotted, value)?,
            ("model", "h_prime") => self.h_prime = parse_usize(dotted, value)?,
            ("model", "w_prime") => self.w_prime = parse_usize(dotted, value)?,
            ("model", "seed") => self.model_seed = parse_u64(dotted, value)?,
            ("model", "backbone_seed") => self.backbone_seed = parse_u64(dotted, value)?,
            ("train", "optimizer") => self.train.optimizer = value.parse()?,
            ("train", "lr") => self.train.lr = parse_f64(dotted, value)?,
            ("train", "momentum") => self.train.momentum = parse_f64(dotted, value)?,
            ("train", "weight_decay") => self.train.weight_decay = parse_f64(dotted, value)?,
            ("train", "clip_max_norm") => self.train.clip_max_norm = parse_opt_f64(dotted, value)?,
            ("train", "epochs") => self.train.epochs = parse_usize(dotted, value)?,
            ("train", "schedule") => self.train.schedule = value.parse()?,
            ("train", "milestones") => self.train.milestones = parse_milestones(dotted, value)?,
            ("train", "warmup_epochs") => self.train.warmup_epochs = parse_usize(dotted, value)?,
            ("train", "batch_size") => self.train.batch_size = parse_usize(dotted, value)?,
            ("train", "seed") => self.train.seed = parse_u64(dotted, value)?,
            ("eval", "num_clips") => self.eval_clips = parse_usize(dotted, value)?,
            ("paths", "dataset") => self.dataset = parse_opt_path(value),
            ("paths", "checkpoint") => self.checkpoint = parse_opt_path(value),
            ("paths", "resume") => self.resume = parse_opt_path(value),
            _ => {
                return Err(Error::Config(format!("unknown config key {dotted}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model().validate()?;
        self.train.validate()?;
        if self.eval_clips == 0 {
            return Err(Error::Config("eval.num_clips must be >= 1".into()));
        }
        if self.eval_clips > 1 && !self.data.video_mode {
            return Err(Error::Config(
                "eval.num_clips > 1 needs a video-mode dataset; feature sequences have one clip".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic full dump; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        for (key, value) in spec_entries(&self.data) {
            let _ = writeln!(s, "{key} = {value}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "kind = {}", self.kind);
        let _ = writeln!(s, "h = {}", self.h);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "vision_layers = {}", self.vision_layers);
        let _ = writeln!(s, "cross_layers = {}", self.cross_layers);
        let _ = writeln!(s, "h_prime = {}", self.h_prime);
        let _ = writeln!(s, "w_prime = {}", self.w_prime);
        let _ = writeln!(s, "seed = {}", self.model_seed);
        let _ = writeln!(s, "backbone_seed = {}", self.backbone_seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "optimizer = {}", self.train.optimizer);
        let _ = writeln!(s, "lr = {}", self.train.lr);
        let _ = writeln!(s, "momentum = {}", self.train.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "clip_max_norm = {}", format_opt_f64(self.train.clip_max_norm));
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "schedule = {}", self.train.schedule);
        let _ = writeln!(s, "milestones = {}", format_milestones(&self.train.milestones));
        let _ = writeln!(s, "warmup_epochs = {}", self.train.warmup_epochs);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[eval]");
        let _ = writeln!(s, "num_clips = {}", self.eval_clips);
        let _ = writeln!(s);
        let _ = writeln!(s, "[paths]");
        let _ = writeln!(s, "dataset = {}", format_opt_path(&self.dataset));
        let _ = writeln!(s, "checkpoint = {}", format_opt_path(&self.checkpoint));
        let _ = writeln!(s, "resume = {}", format_opt_path(&self.resume));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.kind = ModelKind::Cross;
        cfg.train.milestones = vec![8, 10];
        cfg.train.clip_max_norm = None;
        cfg.data.long_tail_exponent = Some(1.0);
        cfg.dataset = Some(PathBuf::from("runs/data.ffds"));
        let mut parsed = RunConfig::default();
        parsed.apply_text(&cfg.render()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("[data]\nnoise = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key data.noise"), "{err}");
        let err = cfg.apply_text("[dataset]\nseed = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
        let err = cfg.apply_text("seed = 1\n").unwrap_err();
        assert!(err.to_string().contains("before any [section]"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("[train]\nlr = 0.1\nlr = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key train.lr"), "{err}");
    }

    #[test]
    fn overrides_parse_dotted_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.lr=0.25").unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        cfg.apply_override("model.kind=baseline").unwrap();
        assert_eq!(cfg.kind, ModelKind::Baseline);
        cfg.apply_override("paths.dataset=none").unwrap();
        assert_eq!(cfg.dataset, None);
        assert!(cfg.apply_override("lr=0.1").is_err());
        assert!(cfg.apply_override("train.lr").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_override("train.lr=fast").unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
        let err = cfg.apply_override("data.video_mode=1").unwrap_err();
        assert!(err.to_string().contains("true or false"), "{err}");
    }

    #[test]
    fn model_extents_follow_the_data_section() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("data.c_prime=48").unwrap();
        cfg.apply_override("data.t_prime=6").unwrap();
        let model = cfg.model();
        assert_eq!(model.c_prime, 48);
        assert_eq!(model.t_prime, 6);
        assert_eq!(model.num_classes, cfg.data.num_classes);
    }

    #[test]
    fn multi_clip_eval_needs_video_data() {
        let mut cfg = RunConfig::default();
        cfg.eval_clips = 3;
        assert!(cfg.validate().is_err());
        cfg.data = SyntheticSpec::desk_video();
        cfg.h_prime = 2;
        cfg.w_prime = 2;
        cfg.validate().unwrap();
    }
}
