//! Single-binary entry point: `ingest`, `train`, `eval`, `ablate`, `bench`,
//! and `sample` subcommands around one flat [`RunConfig`]. Precedence is
//! defaults < config file < individual flags < `--set key=value`. Exit codes:
//! 0 ok, 2 input error, 3 infeasible request, 4 numerical failure.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::graph::{
    load_graph, normalized_adjacency, AdjPowers, Graph, GraphError, Split, DEFAULT_M_MAX,
};
use crate::infer::{self, AblationSettings, AblationVariant, InferError};
use crate::model::{load_checkpoint, save_checkpoint, ModelError};
use crate::node2seq::{sample_ego_graph, SampleError, SampleKey};
use crate::train::{fit, metrics_to_csv, TrainError};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Input(String),
    #[error("training aborted on a non-finite loss; last good checkpoint kept")]
    NanAbort,
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Infer(InferError::TokenCap { .. }) => 3,
            CliError::NanAbort => 4,
            CliError::Train(TrainError::Ad(_)) => 4,
            _ => 2,
        }
    }
}

/// Ego-graph transformer for node classification on CPU.
#[derive(Parser)]
#[command(name = "egoformer", version, about)]
struct Cli {
    /// Line-oriented `key = value` config file applied before flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set peak_lr=1e-4` (repeatable,
    /// highest precedence).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Optional flags mirroring every run-config field.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Comma-separated train,val,test ratios.
    #[arg(long)]
    split_ratios: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    /// Comma-separated per-layer neighbor counts.
    #[arg(long)]
    fanouts: Option<String>,
    /// Ego-graph samples per node during training.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    num_global: Option<usize>,
    #[arg(long)]
    prox_views: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Adjacency normalization: row or sym.
    #[arg(long)]
    norm: Option<String>,
    /// Global-node injection: input or first_ffn.
    #[arg(long)]
    injection: Option<String>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    end_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Consistency-regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sharpen_t: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    early_stop: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    stop_grad_target: Option<bool>,
    /// Inference mode: multi_sample, full_ego, or full_graph.
    #[arg(long)]
    mode: Option<String>,
    /// Samples averaged per node at inference time.
    #[arg(long)]
    s_prime: Option<usize>,
    #[arg(long)]
    token_cap: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long)]
    eval_seeds: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores); never changes outputs.
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), ConfigError> {
        macro_rules! put {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        if let Some(p) = &self.edges {
            cfg.edges = p.clone();
        }
        if let Some(p) = &self.features {
            cfg.features = p.clone();
        }
        if let Some(p) = &self.labels {
            cfg.labels = p.clone();
        }
        if let Some(p) = &self.split_file {
            cfg.split_file = Some(p.clone());
        }
        if let Some(p) = &self.out_dir {
            cfg.out_dir = p.clone();
        }
        put!(split_ratios, "split_ratios");
        put!(depth, "depth");
        put!(fanouts, "fanouts");
        put!(samples, "samples");
        put!(num_global, "num_global");
        put!(prox_views, "prox_views");
        put!(hidden_dim, "hidden_dim");
        put!(heads, "heads");
        put!(layers, "layers");
        put!(ffn_mult, "ffn_mult");
        put!(dropout, "dropout");
        put!(norm, "norm");
        put!(injection, "injection");
        put!(peak_lr, "peak_lr");
        put!(end_lr, "end_lr");
        put!(warmup_steps, "warmup_steps");
        put!(plateau_patience, "plateau_patience");
        put!(decay_factor, "decay_factor");
        put!(weight_decay, "weight_decay");
        put!(batch_size, "batch_size");
        put!(epochs, "epochs");
        put!(lambda, "lambda");
        put!(sharpen_t, "sharpen_t");
        put!(eval_every, "eval_every");
        put!(early_stop, "early_stop");
        put!(val_samples, "val_samples");
        put!(stop_grad_target, "stop_grad_target");
        put!(mode, "mode");
        put!(s_prime, "s_prime");
        put!(token_cap, "token_cap");
        put!(eval_seeds, "eval_seeds");
        put!(seed, "seed");
        put!(workers, "workers");
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Load and validate a dataset, printing its statistics.
    Ingest(IngestArgs),
    /// Train a model into a reproducible run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train and compare ablation variants.
    Ablate(AblateArgs),
    /// Ego-mode vs full-graph scaling table on synthetic graphs.
    Bench(BenchArgs),
    /// Dump sampled ego-graphs for inspection.
    Sample(SampleArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to score: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated variants (full, wo_pe, wo_cr, wo_gn, full_inf,
    /// msi_1, msi_2, ...) or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated synthetic graph sizes.
    #[arg(long, default_value = "1000,2000,4000,8000")]
    sizes: String,
    /// Degree of the synthetic regular graphs.
    #[arg(long, default_value_t = 8)]
    degree: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SampleArgs {
    /// Comma-separated center node ids.
    #[arg(long)]
    nodes: String,
    #[command(flatten)]
    overrides: Overrides,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn build_config(
    file: Option<&PathBuf>,
    sets: &[String],
    overrides: &Overrides,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    overrides.apply(&mut cfg)?;
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("--set needs KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if cfg.workers > 0 {
        // deterministic regardless of pool size: kernels only parallelize
        // over disjoint output rows
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<Graph, CliError> {
    let g = load_graph(
        &cfg.resolved_data_path(&cfg.edges),
        &cfg.resolved_data_path(&cfg.features),
        &cfg.resolved_data_path(&cfg.labels),
        cfg.split_spec(),
    )?;
    Ok(g)
}

fn powers_for(cfg: &RunConfig, g: &Graph) -> AdjPowers {
    AdjPowers::new(normalized_adjacency(g, cfg.norm), DEFAULT_M_MAX)
}

fn dataset_stats(g: &Graph) -> String {
    let s = g.stats();
    let mut out = format!(
        "{} nodes, {} edges, {} classes, {} features\nsplit sizes: train {}, val {}, test {}\n",
        g.num_nodes(),
        g.num_edges(),
        g.num_classes(),
        g.feat_dim(),
        s.split_counts[0],
        s.split_counts[1],
        s.split_counts[2],
    );
    if s.self_loops_dropped > 0 || s.duplicate_edges_dropped > 0 {
        out.push_str(&format!(
            "cleaned input: {} self-loops dropped, {} duplicate edges dropped\n",
            s.self_loops_dropped, s.duplicate_edges_dropped
        ));
    }
    out
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Ingest(a) => {
            let cfg = build_config(cli.config.as_ref(), &cli.set, &a.overrides)?;
            let g = load_dataset(&cfg)?;
            print!("{}", dataset_stats(&g));
            Ok(())
        }
        Cmd::Train(a) => {
            let cfg = build_config(cli.config.as_ref(), &cli.set, &a.overrides)?;
            fs::create_dir_all(&cfg.out_dir)?;
            // the snapshot alone must reproduce the run, so it goes first
            fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
            let g = load_dataset(&cfg)?;
            print!("{}", dataset_stats(&g));
            let powers = powers_for(&cfg, &g);
            let model_cfg = cfg.model(g.feat_dim(), g.num_classes());
            let sampler = cfg.sampler();
            println!(
                "training {} parameters for up to {} epochs",
                crate::model::ModelParams::init(model_cfg.clone(), cfg.seed)?.param_count(),
                cfg.epochs
            );
            let result = fit(&g, &powers, model_cfg, &sampler, &cfg.train())?;
            fs::write(cfg.out_dir.join("metrics.csv"), metrics_to_csv(&result.metrics))?;
            save_checkpoint(&result.params, &cfg.out_dir.join("checkpoint.bin"))?;
            for note in &result.incidents {
                eprintln!("note: {note}");
            }
            match result.best_val {
                Some(acc) => println!(
                    "done: {} epochs, best validation accuracy {acc:.4}",
                    result.completed_epochs
                ),
                None => println!("done: {} epochs (no validation ran)", result.completed_epochs),
            }
            println!("run directory: {}", cfg.out_dir.display());
            if result.nan_aborted {
                return Err(CliError::NanAbort);
            }
            Ok(())
        }
        Cmd::Eval(a) => {
            let cfg = build_config(cli.config.as_ref(), &cli.set, &a.overrides)?;
            let split = match a.split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(CliError::Input(format!("unknown split {other:?}"))),
            };
            let g = load_dataset(&cfg)?;
            let powers = powers_for(&cfg, &g);
            let params = load_checkpoint(&a.checkpoint)?;
            let report = infer::evaluate(
                &params,
                &g,
                &powers,
                &cfg.sampler(),
                split,
                &cfg.inference(),
                &cfg.eval_seeds,
            )?;
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("report.txt"), report.to_text())?;
            fs::write(cfg.out_dir.join("predictions.txt"), report.predictions_dump())?;
            print!("{}", report.to_text());
            Ok(())
        }
        Cmd::Ablate(a) => {
            let cfg = build_config(cli.config.as_ref(), &cli.set, &a.overrides)?;
            let suite = parse_suite(&a.suite)?;
            let g = load_dataset(&cfg)?;
            let powers = powers_for(&cfg, &g);
            let settings = AblationSettings {
                model: cfg.model(g.feat_dim(), g.num_classes()),
                sampler: cfg.sampler(),
                train: cfg.train(),
                eval_s_prime: cfg.s_prime,
                token_cap: cfg.token_cap,
                seeds: cfg.eval_seeds.clone(),
            };
            let report = infer::run_ablation(&g, &powers, &suite, &settings)?;
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("ablation.txt"), report.to_text())?;
            fs::write(cfg.out_dir.join("ablation.csv"), report.to_csv())?;
            print!("{}", report.to_text());
            Ok(())
        }
        Cmd::Bench(a) => {
            let cfg = build_config(cli.config.as_ref(), &cli.set, &a.overrides)?;
            let sizes: Vec<usize> = a
                .sizes
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| CliError::Input(format!("bad size {s:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let rows = infer::scaling_bench(
                &sizes,
                a.degree,
                &cfg.sampler(),
                &cfg.model(8, 2),
                cfg.token_cap,
                cfg.seed,
            )?;
            print!("{}", infer::bench_table_text(&rows));
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("bench.csv"), infer::bench_table_csv(&rows))?;
            Ok(())
        }
        Cmd::Sample(a) => {
            let cfg = build_config(cli.config.as_ref(), &cli.set, &a.overrides)?;
            let g = load_dataset(&cfg)?;
            let sampler = cfg.sampler();
            let nodes: Vec<u32> = a
                .nodes
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|e| CliError::Input(format!("bad node id {s:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let mut out = String::new();
            for &node in &nodes {
                if node as usize >= g.num_nodes() {
                    return Err(CliError::Input(format!(
                        "node {node} out of range ({} nodes)",
                        g.num_nodes()
                    )));
                }
                for s in 0..sampler.samples_per_node {
                    let ego = sample_ego_graph(
                        &g,
                        node,
                        &sampler,
                        SampleKey { epoch: 0, sample_idx: s as u64 },
                    );
                    let members: Vec<String> = ego.members.iter().map(u32::to_string).collect();
                    let hops: Vec<String> = ego.hops.iter().map(u8::to_string).collect();
                    out.push_str(&format!(
                        "{}\t{}\t{}\n",
                        ego.center,
                        members.join(","),
                        hops.join(",")
                    ));
                }
            }
            print!("{out}");
            Ok(())
        }
    }
}

fn parse_suite(s: &str) -> Result<Vec<AblationVariant>, CliError> {
    if s == "all" {
        return Ok(infer::default_suite());
    }
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            Ok(match tok {
                "full" => AblationVariant::Full,
                "wo_pe" => AblationVariant::WithoutPe,
                "wo_cr" => AblationVariant::WithoutCr,
                "wo_gn" => AblationVariant::WithoutGn,
                "full_inf" => AblationVariant::FullInference,
                other => match other.strip_prefix("msi_") {
                    Some(k) => AblationVariant::MsiK(k.parse::<usize>().map_err(|e| {
                        CliError::Input(format!("bad msi count in {other:?}: {e}"))
                    })?),
                    None => {
                        return Err(CliError::Input(format!("unknown ablation variant {tok:?}")))
                    }
                },
            })
        })
        .collect()
}
