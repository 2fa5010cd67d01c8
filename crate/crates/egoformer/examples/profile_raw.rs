//! Raw kernel timings without tape overhead (scratch tool).

use std::time::Instant;

use egoformer::autodiff::Array;

fn randn(shape: &[usize]) -> Array {
    use rand::Rng;
    let mut r = egoformer::rng::rng(1, &[2]);
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>() - 0.5).collect()).unwrap()
}

fn main() {
    for (m, k, n) in [(1344usize, 32usize, 32usize), (1344, 1433, 64), (1344, 64, 64), (1344, 32, 128), (1344, 128, 32)] {
        let a = randn(&[m, k]);
        let b = randn(&[k, n]);
        let iters = 30;
        let t0 = Instant::now();
        let mut sink = 0.0;
        for _ in 0..iters {
            let y = egoformer::autodiff::raw_matmul(&a, &b).unwrap();
            sink += y.data()[0];
        }
        let ms = t0.elapsed().as_secs_f64() * 1e3 / iters as f64;
        let gmadds = (m * k * n) as f64 / ms / 1e6;
        println!("matmul {m}x{k}x{n}: {ms:8.3} ms  {gmadds:6.2} Gmadd/s  ({sink:.1})");
    }
}
