//! Calibration sweeps for the synthetic acceptance tasks (scratch tool).

use std::time::Instant;

use egoformer::graph::{normalized_adjacency, AdjPowers, NormKind, Split, DEFAULT_M_MAX};
use egoformer::infer::{
    default_suite, msi_accuracy, multi_sample_predict, run_ablation, AblationSettings,
};
use egoformer::model::ModelConfig;
use egoformer::node2seq::SamplerConfig;
use egoformer::synth::{sbm, SbmSpec};
use egoformer::train::{fit, TrainConfig};

fn sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        depth: 2,
        fanouts: vec![6, 3],
        samples_per_node: 2,
        num_global: 1,
        prox_views: 3,
        master_seed: seed,
    }
}

fn model_cfg(g: &egoformer::graph::Graph) -> ModelConfig {
    let mut m = ModelConfig::new(g.feat_dim(), g.num_classes());
    m.hidden_dim = 32;
    m.heads = 4;
    m.layers = 2;
    m.num_global = 1;
    m.prox_views = 3;
    m.dropout = 0.3;
    m
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 30,
        batch_size: 32,
        epochs,
        lambda: 0.5,
        sharpen_t: 0.5,
        eval_every: 5,
        early_stop: 6,
        val_samples: 4,
        ..TrainConfig::default()
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "c2".into());
    match which.as_str() {
        "c2" => criterion2(),
        "c6" => criterion6(),
        "c7" => criterion7(),
        _ => eprintln!("c2 | c6 | c7"),
    }
}

fn criterion2() {
    println!("criterion 2: SBM-200 feature-friendly, 5 seeds");
    for seed in 1..=5u64 {
        let t0 = Instant::now();
        let g = sbm(&SbmSpec::feature_friendly(200), seed);
        let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
        let s = sampler(seed);
        let res = fit(&g, &powers, model_cfg(&g), &s, &train_cfg(60)).unwrap();
        let test = g.split_nodes(Split::Test);
        let acc = msi_accuracy(&res.params, &g, &powers, &s, &test, 8, seed).unwrap();
        println!(
            "  seed {seed}: test acc {acc:.4} best-val {:?} epochs {} in {:.1?}",
            res.best_val,
            res.completed_epochs,
            t0.elapsed()
        );
    }
}

fn criterion6() {
    // args: c6 nodes p_in p_out shift epochs blocks first_seed
    let arg = |i: usize, d: f64| -> f64 {
        std::env::args().nth(i).map(|s| s.parse().unwrap()).unwrap_or(d)
    };
    let nodes = arg(2, 200.0) as usize;
    let p_in = arg(3, 0.1);
    let p_out = arg(4, 0.03);
    let shift = arg(5, 0.2);
    let epochs = arg(6, 60.0) as usize;
    let blocks = arg(7, 2.0) as usize;
    let first_seed = arg(8, 1.0) as u64;
    println!(
        "criterion 6: SBM-{nodes} blocks={blocks} p=({p_in},{p_out}) shift {shift}, seeds {first_seed}.., {epochs} epochs"
    );
    let spec = SbmSpec {
        nodes,
        blocks,
        p_in,
        p_out,
        feat_dim: 16,
        feat_shift: shift,
        feat_noise: 1.0,
        ratios: [0.15, 0.15, 0.7],
    };
    let g = sbm(&spec, 42);
    let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
    let settings = AblationSettings {
        model: model_cfg(&g),
        sampler: sampler(42),
        train: train_cfg(epochs),
        eval_s_prime: 8,
        token_cap: 6000,
        seeds: (first_seed..first_seed + 5).collect(),
    };
    let t0 = Instant::now();
    use egoformer::infer::AblationVariant;
    let suite = [
        AblationVariant::Full,
        AblationVariant::WithoutPe,
        AblationVariant::WithoutGn,
        AblationVariant::WithoutCr,
    ];
    let report = run_ablation(&g, &powers, &suite, &settings).unwrap();
    println!("{}", report.to_text());
    println!("total {:.1?}", t0.elapsed());
}

fn criterion7() {
    println!("criterion 7: per-node prediction std at S'=1 vs S'=8 over 100 repetitions");
    let g = sbm(&SbmSpec::feature_friendly(200), 3);
    let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
    let s = sampler(3);
    let res = fit(&g, &powers, model_cfg(&g), &s, &train_cfg(40)).unwrap();
    let test = g.split_nodes(Split::Test);
    let t0 = Instant::now();
    let mut better = 0usize;
    for &node in &test {
        let std_at = |sp: usize| {
            let mut vals = Vec::with_capacity(100);
            for rep in 0..100u64 {
                let p =
                    multi_sample_predict(&res.params, &g, &powers, &s, node, sp, 1000 + rep)
                        .unwrap();
                vals.push(p[0]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        if std_at(8) <= std_at(1) {
            better += 1;
        }
    }
    println!(
        "  std(S'=8) <= std(S'=1) for {better}/{} test nodes in {:.1?}",
        test.len(),
        t0.elapsed()
    );
}
