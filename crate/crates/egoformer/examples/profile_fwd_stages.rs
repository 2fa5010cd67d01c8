//! Stage-level timing inside one forward pass (scratch tool).

use std::time::Instant;

use egoformer::autodiff::Tape;
use egoformer::graph::{normalized_adjacency, AdjPowers, NormKind, DEFAULT_M_MAX};
use egoformer::model::{BatchInputs, ModelConfig, ModelParams, ParamVars};
use egoformer::node2seq::{epoch_plan, SamplerConfig};
use egoformer::synth::{sbm, SbmSpec};

fn main() {
    let g = sbm(&SbmSpec::feature_friendly(200), 7);
    let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
    let sampler = SamplerConfig { master_seed: 1, ..SamplerConfig::default() };
    let mut mcfg = ModelConfig::new(g.feat_dim(), g.num_classes());
    mcfg.hidden_dim = 32;
    mcfg.heads = 4;
    let params = ModelParams::init(mcfg.clone(), 1).unwrap();
    let train: Vec<u32> = (0..120).collect();
    let batch = epoch_plan(&g, &powers, &sampler, 1, &train, 32)
        .unwrap()
        .next()
        .unwrap()
        .unwrap();
    let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();

    let (b, n) = (inp.instances, inp.tokens);
    let (d, heads) = (mcfg.hidden_dim, mcfg.heads);
    let dk = d / heads;
    let iters = 30;

    let time = |name: &str, f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        for _ in 0..iters {
            f();
        }
        println!("{name:<22} {:8.3} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
    };

    time("bind leaves", &mut || {
        let mut tape = Tape::new();
        let _ = ParamVars::bind(&mut tape, &params);
    });
    time("constants", &mut || {
        let mut tape = Tape::new();
        let _ = tape.constant(inp.x.clone());
        let _ = tape.constant(inp.indicator.clone());
        let _ = tape.constant(inp.phi.clone());
    });
    time("embed", &mut || {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let x = tape.constant(inp.x.clone());
        let h = tape.matmul(x, pv.w_in).unwrap();
        let ind = tape.constant(inp.indicator.clone());
        let gi = tape.matmul(ind, pv.globals).unwrap();
        let _ = tape.add(h, gi).unwrap();
    });
    // attention pieces on realistic shapes
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, &params);
    let x = tape.constant(inp.x.clone());
    let h = tape.matmul(x, pv.w_in).unwrap();
    let l = &pv.layers[0];
    time("qkv proj+split x3", &mut || {
        let mut t = Tape::new();
        let pv2 = ParamVars::bind(&mut t, &params);
        let xx = t.constant(inp.x.clone());
        let hh = t.matmul(xx, pv2.w_in).unwrap();
        for w in [pv2.layers[0].w_q, pv2.layers[0].w_k, pv2.layers[0].w_v] {
            let p = t.matmul(hh, w).unwrap();
            let p = t.reshape(p, &[b, n, heads, dk]).unwrap();
            let p = t.permute(p, &[0, 2, 1, 3]).unwrap();
            let _ = t.reshape(p, &[b * heads, n, dk]).unwrap();
        }
    });
    let q = {
        let p = tape.matmul(h, l.w_q).unwrap();
        let p = tape.reshape(p, &[b, n, heads, dk]).unwrap();
        let p = tape.permute(p, &[0, 2, 1, 3]).unwrap();
        tape.reshape(p, &[b * heads, n, dk]).unwrap()
    };
    time("scores bmm_nt+scale", &mut || {
        let mut t = Tape::new();
        let qq = t.leaf(tape.value(q).clone());
        let s = t.bmm_nt(qq, qq).unwrap();
        let _ = t.scale(s, 0.35).unwrap();
    });
    time("bias path", &mut || {
        let mut t = Tape::new();
        let pv2 = ParamVars::bind(&mut t, &params);
        let phi = t.constant(inp.phi.clone());
        let bias_t = t.permute(pv2.layers[0].prox_bias, &[1, 0]).unwrap();
        let bias = t.matmul(phi, bias_t).unwrap();
        let bias = t.reshape(bias, &[b, n, n, heads]).unwrap();
        let bias = t.permute(bias, &[0, 3, 1, 2]).unwrap();
        let _ = t.reshape(bias, &[b * heads, n, n]).unwrap();
    });
    time("masked softmax", &mut || {
        let mut t = Tape::new();
        let s = t.leaf(egoformer::autodiff::Array::full(&[b * heads, n, n], 0.3));
        let _ = t.masked_softmax(s, inp.mask.clone()).unwrap();
    });
}
