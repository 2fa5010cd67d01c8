//! Rough per-phase timing of one training step (scratch tool).

use std::sync::Arc;
use std::time::Instant;

use egoformer::autodiff::Tape;
use egoformer::graph::{normalized_adjacency, AdjPowers, NormKind, DEFAULT_M_MAX};
use egoformer::model::{forward_tape, BatchInputs, ModelConfig, ModelParams, ParamVars};
use egoformer::node2seq::{epoch_plan, SamplerConfig};
use egoformer::synth::{sbm, SbmSpec};
use egoformer::train::{consistency_loss, supervised_loss, total_loss};

fn main() {
    let g = sbm(&SbmSpec::feature_friendly(200), 7);
    let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
    let sampler = SamplerConfig { master_seed: 1, ..SamplerConfig::default() };
    let mut mcfg = ModelConfig::new(g.feat_dim(), g.num_classes());
    mcfg.hidden_dim = 32;
    mcfg.heads = 4;
    let params = ModelParams::init(mcfg, 1).unwrap();
    let train: Vec<u32> = (0..120).collect();

    let t0 = Instant::now();
    let batches: Vec<_> = epoch_plan(&g, &powers, &sampler, 1, &train, 32)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    println!("plan+sample+phi: {:?} for {} batches", t0.elapsed(), batches.len());

    let t0 = Instant::now();
    let inputs: Vec<BatchInputs> =
        batches.iter().map(|b| BatchInputs::from_batch(b, &g, 1).unwrap()).collect();
    println!("batch inputs: {:?}", t0.elapsed());

    for phase in 0..3 {
        let t0 = Instant::now();
        for inp in &inputs {
            let mut tape = Tape::new();
            let pv = ParamVars::bind(&mut tape, &params);
            let mut rng = egoformer::rng::rng(1, &[7]);
            let fwd = forward_tape(
                &mut tape,
                &pv,
                &params.cfg,
                inp,
                if phase > 0 { Some(&mut rng) } else { None },
                true,
            )
            .unwrap();
            if phase == 2 {
                let sup = supervised_loss(&mut tape, fwd.probs, inp.labels.clone()).unwrap();
                let (con, _) = consistency_loss(&mut tape, fwd.probs, 2, 0.5, true).unwrap();
                let loss = total_loss(&mut tape, sup, con, 0.5).unwrap();
                let grads = tape.backward(loss).unwrap();
                let _ = Arc::new(grads);
            }
        }
        let name = ["fwd eval", "fwd train", "fwd+bwd"][phase];
        println!("{name}: {:?} total, {:?}/batch", t0.elapsed(), t0.elapsed() / 8);
    }

    // backward breakdown on one batch
    let inp = &inputs[0];
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, &params);
    let mut rng = egoformer::rng::rng(1, &[7]);
    let fwd = forward_tape(&mut tape, &pv, &params.cfg, inp, Some(&mut rng), true).unwrap();
    let sup = supervised_loss(&mut tape, fwd.probs, inp.labels.clone()).unwrap();
    let (con, _) = consistency_loss(&mut tape, fwd.probs, 2, 0.5, true).unwrap();
    let loss = total_loss(&mut tape, sup, con, 0.5).unwrap();
    for _ in 0..2 {
        let spent = tape.backward_profiled(loss);
        let total: f64 = spent.iter().map(|(_, t)| t).sum();
        println!("backward total {total:.2} ms");
        for (name, ms) in spent.iter().take(8) {
            println!("  {name:<18} {ms:8.3} ms");
        }
    }
}
// appended: backward per-op breakdown
