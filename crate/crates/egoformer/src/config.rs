//! Flat run configuration: one struct covering data paths, sampler, model,
//! training, and inference knobs, serialized as sorted `key = value` lines.
//! A run directory's snapshot of this file is enough to reproduce the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::{NormKind, SplitSpec};
use crate::infer::{InferenceConfig, InferenceMode, DEFAULT_TOKEN_CAP};
use crate::model::{GlobalInjection, ModelConfig};
use crate::node2seq::SamplerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?}: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("{path}:{line}: expected `key = value`")]
    BadLine { path: PathBuf, line: usize },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Environment variable naming the default data root; relative dataset paths
/// resolve against it when set.
pub const DATA_ROOT_ENV: &str = "EGOFORMER_DATA";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // data
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub split_file: Option<PathBuf>,
    pub split_ratios: [f64; 3],
    // sampler
    pub depth: usize,
    pub fanouts: Vec<usize>,
    pub samples: usize,
    pub num_global: usize,
    pub prox_views: usize,
    // model
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub norm: NormKind,
    pub injection: GlobalInjection,
    // training
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub plateau_patience: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub sharpen_t: f64,
    pub eval_every: usize,
    pub early_stop: usize,
    pub val_samples: usize,
    pub stop_grad_target: bool,
    // inference
    pub mode: InferenceMode,
    pub s_prime: usize,
    pub token_cap: usize,
    pub eval_seeds: Vec<u64>,
    // run
    pub seed: u64,
    pub out_dir: PathBuf,
    /// 0 = use every available core; any value must not change outputs.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            edges: PathBuf::from("edges.txt"),
            features: PathBuf::from("features.txt"),
            labels: PathBuf::from("labels.txt"),
            split_file: None,
            split_ratios: [0.6, 0.2, 0.2],
            depth: 2,
            fanouts: vec![8, 4],
            samples: 2,
            num_global: 1,
            prox_views: 3,
            hidden_dim: 64,
            heads: 8,
            layers: 2,
            ffn_mult: 4,
            dropout: 0.5,
            norm: NormKind::Row,
            injection: GlobalInjection::Input,
            peak_lr: t.peak_lr,
            end_lr: t.end_lr,
            warmup_steps: t.warmup_steps,
            plateau_patience: t.plateau_patience,
            decay_factor: t.decay_factor,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lambda: t.lambda,
            sharpen_t: t.sharpen_t,
            eval_every: t.eval_every,
            early_stop: t.early_stop,
            val_samples: t.val_samples,
            stop_grad_target: t.stop_grad_target,
            mode: InferenceMode::MultiSample,
            s_prime: 8,
            token_cap: DEFAULT_TOKEN_CAP,
            eval_seeds: vec![1, 2, 3],
            seed: 42,
            out_dir: PathBuf::from("run"),
            workers: 0,
        }
    }
}

fn join_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|tok| {
            tok.trim().parse::<T>().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                msg: e.to_string(),
            })
        })
        .collect()
}

impl RunConfig {
    /// Serializes every field, one `key = value` line, sorted by key.
    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("batch_size", self.batch_size.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("depth", self.depth.to_string()),
            ("dropout", self.dropout.to_string()),
            ("early_stop", self.early_stop.to_string()),
            ("edges", self.edges.display().to_string()),
            ("end_lr", self.end_lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_seeds", join_list(&self.eval_seeds)),
            ("fanouts", join_list(&self.fanouts)),
            ("features", self.features.display().to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("heads", self.heads.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("injection", self.injection.to_string()),
            ("labels", self.labels.display().to_string()),
            ("lambda", self.lambda.to_string()),
            ("layers", self.layers.to_string()),
            ("mode", self.mode.to_string()),
            ("norm", match self.norm {
                NormKind::Row => "row".to_string(),
                NormKind::Sym => "sym".to_string(),
            }),
            ("num_global", self.num_global.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("prox_views", self.prox_views.to_string()),
            ("s_prime", self.s_prime.to_string()),
            ("samples", self.samples.to_string()),
            ("seed", self.seed.to_string()),
            ("sharpen_t", self.sharpen_t.to_string()),
            (
                "split_file",
                self.split_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("split_ratios", join_list(&self.split_ratios)),
            ("stop_grad_target", self.stop_grad_target.to_string()),
            ("token_cap", self.token_cap.to_string()),
            ("val_samples", self.val_samples.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("workers", self.workers.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse::<T>().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                msg: e.to_string(),
            })
        }
        let value = value.trim();
        match key {
            "edges" => self.edges = PathBuf::from(value),
            "features" => self.features = PathBuf::from(value),
            "labels" => self.labels = PathBuf::from(value),
            "split_file" => {
                self.split_file =
                    if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "split_ratios" => {
                let v: Vec<f64> = parse_list(key, value)?;
                if v.len() != 3 {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        msg: "expected three comma-separated ratios".into(),
                    });
                }
                self.split_ratios = [v[0], v[1], v[2]];
            }
            "depth" => self.depth = parse(key, value)?,
            "fanouts" => self.fanouts = parse_list(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "num_global" => self.num_global = parse(key, value)?,
            "prox_views" => self.prox_views = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "norm" => {
                self.norm = match value {
                    "row" => NormKind::Row,
                    "sym" => NormKind::Sym,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: other.into(),
                            msg: "expected row or sym".into(),
                        })
                    }
                }
            }
            "injection" => self.injection = parse(key, value)?,
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "end_lr" => self.end_lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "decay_factor" => self.decay_factor = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "sharpen_t" => self.sharpen_t = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "early_stop" => self.early_stop = parse(key, value)?,
            "val_samples" => self.val_samples = parse(key, value)?,
            "stop_grad_target" => self.stop_grad_target = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "s_prime" => self.s_prime = parse(key, value)?,
            "token_cap" => self.token_cap = parse(key, value)?,
            "eval_seeds" => self.eval_seeds = parse_list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "workers" => self.workers = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a `key = value` config file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine { path: path.to_path_buf(), line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                path: PathBuf::from("<inline>"),
                line: i + 1,
            })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    /// Relative dataset paths resolve against `$EGOFORMER_DATA` when set.
    pub fn resolved_data_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() || p.exists() {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(p),
            None => p.to_path_buf(),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        match &self.split_file {
            Some(p) => SplitSpec::File(self.resolved_data_path(p)),
            None => SplitSpec::Stratified { ratios: self.split_ratios, seed: self.seed },
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            depth: self.depth,
            fanouts: self.fanouts.clone(),
            samples_per_node: self.samples,
            num_global: self.num_global,
            prox_views: self.prox_views,
            master_seed: self.seed,
        }
    }

    pub fn model(&self, feat_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            feat_dim,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            layers: self.layers,
            classes,
            num_global: self.num_global,
            prox_views: self.prox_views,
            ffn_mult: self.ffn_mult,
            dropout: self.dropout,
            ln_eps: 1e-5,
            injection: self.injection,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            end_lr: self.end_lr,
            warmup_steps: self.warmup_steps,
            plateau_patience: self.plateau_patience,
            decay_factor: self.decay_factor,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda: self.lambda,
            sharpen_t: self.sharpen_t,
            eval_every: self.eval_every,
            early_stop: self.early_stop,
            val_samples: self.val_samples,
            stop_grad_target: self.stop_grad_target,
            pe_enabled: true,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig { mode: self.mode, s_prime: self.s_prime, token_cap: self.token_cap }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_preserves_every_field() {
        let mut cfg = RunConfig::default();
        cfg.set("fanouts", "5,3").unwrap();
        cfg.set("lambda", "0.75").unwrap();
        cfg.set("norm", "sym").unwrap();
        cfg.set("split_file", "splits.txt").unwrap();
        cfg.set("eval_seeds", "7,8").unwrap();
        cfg.set("mode", "full_ego").unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_and_bad_value_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("no_such_key", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("epochs", "many"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(cfg.set("split_ratios", "0.5,0.5"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# a comment\n\nepochs = 7 # trailing\nlambda = 1\n";
        let cfg = RunConfig::parse_text(text).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lambda, 1.0);
    }

    #[test]
    fn derived_configs_mirror_fields() {
        let mut cfg = RunConfig::default();
        cfg.set("samples", "3").unwrap();
        cfg.set("num_global", "2").unwrap();
        cfg.set("seed", "99").unwrap();
        let sampler = cfg.sampler();
        assert_eq!(sampler.samples_per_node, 3);
        assert_eq!(sampler.num_global, 2);
        assert_eq!(sampler.master_seed, 99);
        let model = cfg.model(10, 4);
        assert_eq!(model.feat_dim, 10);
        assert_eq!(model.classes, 4);
        assert_eq!(model.num_global, 2);
        let train = cfg.train();
        assert_eq!(train.batch_size, cfg.batch_size);
    }
}
