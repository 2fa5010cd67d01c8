//! Per-primitive timing at model shapes (scratch tool).

use std::sync::Arc;
use std::time::Instant;

use egoformer::autodiff::{Array, AttnMask, Tape};

fn bench(name: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let iters = 50;
    for _ in 0..iters {
        f();
    }
    println!("{name:<28} {:>10.3} ms/iter", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
}

fn randn(shape: &[usize]) -> Array {
    use rand::Rng;
    let mut r = egoformer::rng::rng(1, &[2]);
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>() - 0.5).collect()).unwrap()
}

fn main() {
    let (b, n, d, h) = (32usize, 42usize, 32usize, 4usize);
    let dk = d / h;

    let x = randn(&[b * n, d]);
    let w = randn(&[d, d]);
    bench("matmul 1344x32 @ 32x32", || {
        let mut t = Tape::new();
        let xx = t.constant(x.clone());
        let ww = t.constant(w.clone());
        let _ = t.matmul(xx, ww).unwrap();
    });

    let xf = randn(&[b * n, 1433]);
    let wf = randn(&[1433, 64]);
    bench("matmul 1344x1433 @ 1433x64", || {
        let mut t = Tape::new();
        let xx = t.constant(xf.clone());
        let ww = t.constant(wf.clone());
        let _ = t.matmul(xx, ww).unwrap();
    });

    let q = randn(&[b * h, n, dk]);
    bench("bmm_nt scores", || {
        let mut t = Tape::new();
        let qq = t.constant(q.clone());
        let _ = t.bmm_nt(qq, qq).unwrap();
    });

    let p4 = randn(&[b, n, h, dk]);
    bench("permute 0213 (heads)", || {
        let mut t = Tape::new();
        let pp = t.constant(p4.clone());
        let _ = t.permute(pp, &[0, 2, 1, 3]).unwrap();
    });

    let bias4 = randn(&[b, n, n, h]);
    bench("permute 0312 (bias)", || {
        let mut t = Tape::new();
        let pp = t.constant(bias4.clone());
        let _ = t.permute(pp, &[0, 3, 1, 2]).unwrap();
    });

    let scores = randn(&[b * h, n, n]);
    let mask = Arc::new(AttnMask::new(b, n, vec![true; b * n * n]));
    bench("masked_softmax", || {
        let mut t = Tape::new();
        let ss = t.constant(scores.clone());
        let _ = t.masked_softmax(ss, mask.clone()).unwrap();
    });

    let gam = randn(&[d]);
    bench("layernorm 1344x32", || {
        let mut t = Tape::new();
        let xx = t.constant(x.clone());
        let gg = t.constant(gam.clone());
        let bb = t.constant(gam.clone());
        let _ = t.layernorm(xx, gg, bb, 1e-5).unwrap();
    });

    let phi = randn(&[b * n * n, 3]);
    let bias_t = randn(&[3, h]);
    bench("phi bias matmul", || {
        let mut t = Tape::new();
        let pp = t.constant(phi.clone());
        let bb = t.constant(bias_t.clone());
        let _ = t.matmul(pp, bb).unwrap();
    });

    bench("add same-shape (residual)", || {
        let mut t = Tape::new();
        let aa = t.constant(x.clone());
        let bb = t.constant(x.clone());
        let _ = t.add(aa, bb).unwrap();
    });

    let ffn_in = randn(&[b * n, d]);
    let w1 = randn(&[d, 4 * d]);
    bench("ffn matmul 1344x32@32x128", || {
        let mut t = Tape::new();
        let xx = t.constant(ffn_in.clone());
        let ww = t.constant(w1.clone());
        let _ = t.matmul(xx, ww).unwrap();
    });

    bench("dropout on attn", || {
        let mut t = Tape::new();
        let ss = t.constant(scores.clone());
        let mut rng = egoformer::rng::rng(3, &[4]);
        let _ = t.dropout(ss, 0.5, Some(&mut rng)).unwrap();
    });
}
