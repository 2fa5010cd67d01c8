//! Dense row-major f64 arrays (up to 4 dims) and the raw kernels the tape
//! ops are built on. Kernels that parallelize do so over independent output
//! rows, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::AdError;

/// Madd count above which matmul-like kernels fan out over rayon; below it
/// the fork/join overhead outweighs the work.
const PAR_FLOP_THRESHOLD: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(AdError::BadShape(format!("rank must be 1..=4, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(AdError::BadShape(format!(
                "shape {shape:?} wants {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a scalar array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn with_shape(mut self, shape: Vec<usize>) -> Result<Self, AdError> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(AdError::BadShape(format!(
                "cannot view {:?} ({} elems) as {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

/// k-block size keeping the active slice of `b` cache-resident while rows
/// stream through it.
const MM_KBLOCK: usize = 256;

fn mm_rows(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    // out rows of a @ b, accumulating along k in ascending order; exact
    // zeros in `a` are skipped, which makes sparse one-hot feature blocks
    // almost free without changing results.
    for kb in (0..k).step_by(MM_KBLOCK) {
        let kend = (kb + MM_KBLOCK).min(k);
        let b_block = &b[kb * n..kend * n];
        for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            for (&a_ip, b_row) in a_row[kb..kend].iter().zip(b_block.chunks_exact(n)) {
                if a_ip == 0.0 {
                    continue;
                }
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
    }
}

/// `a [m,k] @ b [k,n] -> [m,n]`.
pub fn matmul(a: &Array, b: &Array) -> Result<Array, AdError> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Array::zeros(&[m, n]);
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        let rows_per = m.div_ceil(rayon::current_num_threads().max(1));
        out.data
            .par_chunks_mut(rows_per * n)
            .zip(a.data.par_chunks(rows_per * k))
            .for_each(|(o, ar)| mm_rows(ar, &b.data, o, k, n));
    } else {
        mm_rows(&a.data, &b.data, &mut out.data, k, n);
    }
    Ok(out)
}

/// `a [m,k] @ b^T [k,n] -> [m,n]` where b is stored `[n,k]`; `b` is
/// transposed up front so the row kernel stays vectorizable (the lane-wise
/// axpy form: dot-product loops would be scalar reductions).
pub fn matmul_nt(a: &Array, b: &Array) -> Result<Array, AdError> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1] {
        return Err(AdError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    matmul(a, &transpose2(b)?)
}

/// 2-D transpose (copy).
pub fn transpose2(a: &Array) -> Result<Array, AdError> {
    if a.ndim() != 2 {
        return Err(AdError::BadShape(format!("transpose2 wants rank 2, got {:?}", a.shape)));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Array::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(out)
}

/// `a^T [k,m] @ b [k,n] -> [m,n]` without materializing the transpose:
/// out[i,:] accumulates a[p,i] * b[p,:] over p in ascending order, and exact
/// zeros in `a` are skipped (the weight gradient against sparse features).
pub fn matmul_tn(a: &Array, b: &Array) -> Result<Array, AdError> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[0] != b.shape[0] {
        return Err(AdError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Array::zeros(&[m, n]);
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
    Ok(out)
}

fn batch_dims_ok(a: &Array, b: &Array) -> bool {
    a.ndim() == 3 && b.ndim() == 3 && a.shape[0] == b.shape[0]
}

fn bmm_generic(
    a: &Array,
    b: &Array,
    out_shape: [usize; 3],
    f: impl Fn(&[f64], &[f64], &mut [f64]) + Sync,
) -> Array {
    let g = out_shape[0];
    let (sa, sb, so) = (a.len() / g, b.len() / g, out_shape[1] * out_shape[2]);
    let mut out = Array::zeros(&out_shape);
    if g > 1 && g * so >= PAR_FLOP_THRESHOLD / 8 {
        out.data
            .par_chunks_mut(so)
            .enumerate()
            .for_each(|(i, o)| f(&a.data[i * sa..(i + 1) * sa], &b.data[i * sb..(i + 1) * sb], o));
    } else {
        for i in 0..g {
            f(
                &a.data[i * sa..(i + 1) * sa],
                &b.data[i * sb..(i + 1) * sb],
                &mut out.data[i * so..(i + 1) * so],
            );
        }
    }
    out
}

/// Batched `a [g,m,k] @ b [g,k,n] -> [g,m,n]`.
pub fn bmm(a: &Array, b: &Array) -> Result<Array, AdError> {
    if !batch_dims_ok(a, b) || a.shape[2] != b.shape[1] {
        return Err(AdError::ShapeMismatch { op: "bmm", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let (k, n) = (a.shape[2], b.shape[2]);
    Ok(bmm_generic(a, b, [a.shape[0], a.shape[1], n], move |ab, bb, o| mm_rows(ab, bb, o, k, n)))
}

/// Batched `a [g,m,p] @ b^T -> [g,m,n]` where b is stored `[g,n,p]`; each
/// group transposes its `b` slice into a scratch so the inner kernel is the
/// vectorizable axpy form.
pub fn bmm_nt(a: &Array, b: &Array) -> Result<Array, AdError> {
    if !batch_dims_ok(a, b) || a.shape[2] != b.shape[2] {
        return Err(AdError::ShapeMismatch {
            op: "bmm_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (p, n) = (a.shape[2], b.shape[1]);
    Ok(bmm_generic(a, b, [a.shape[0], a.shape[1], n], move |ab, bb, o| {
        let mut bt = vec![0.0; p * n];
        for j in 0..n {
            for q in 0..p {
                bt[q * n + j] = bb[j * p + q];
            }
        }
        mm_rows(ab, &bt, o, p, n);
    }))
}

/// Batched `a^T [g,p,m] @ b [g,p,n] -> [g,m,n]`.
pub fn bmm_tn(a: &Array, b: &Array) -> Result<Array, AdError> {
    if !batch_dims_ok(a, b) || a.shape[1] != b.shape[1] {
        return Err(AdError::ShapeMismatch {
            op: "bmm_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (p, m, n) = (a.shape[1], a.shape[2], b.shape[2]);
    Ok(bmm_generic(a, b, [a.shape[0], m, n], move |ab, bb, o| {
        // out[i,:] += a[p,i] * b[p,:] accumulated over p in ascending order
        for q in 0..p {
            let b_row = &bb[q * n..(q + 1) * n];
            for i in 0..m {
                let av = ab[q * m + i];
                if av == 0.0 {
                    continue;
                }
                let o_row = &mut o[i * n..(i + 1) * n];
                for (ov, &bv) in o_row.iter_mut().zip(b_row) {
                    *ov += av * bv;
                }
            }
        }
    }))
}

// ---------------------------------------------------------------------------
// permute / broadcast
// ---------------------------------------------------------------------------

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation (copying). `perm` must be a permutation of `0..rank`.
/// The two 4-D patterns the attention path uses run as straight nested
/// loops; anything else goes through generic index arithmetic.
pub fn permute(a: &Array, perm: &[usize]) -> Result<Array, AdError> {
    let r = a.ndim();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(AdError::BadShape(format!("invalid permutation {perm:?} for rank {r}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
    let mut out = Array::zeros(&out_shape);

    if r == 4 && perm == [0, 2, 1, 3] {
        let (s0, s1, s2, s3) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        for i0 in 0..s0 {
            for i1 in 0..s1 {
                for i2 in 0..s2 {
                    let src = ((i0 * s1 + i1) * s2 + i2) * s3;
                    let dst = ((i0 * s2 + i2) * s1 + i1) * s3;
                    out.data[dst..dst + s3].copy_from_slice(&a.data[src..src + s3]);
                }
            }
        }
        return Ok(out);
    }
    if r == 4 && perm == [0, 3, 1, 2] {
        let (s0, s1, s2, s3) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        for i0 in 0..s0 {
            for i1 in 0..s1 {
                for i2 in 0..s2 {
                    let src = ((i0 * s1 + i1) * s2 + i2) * s3;
                    let dst_base = (i0 * s3 * s1 + i1) * s2 + i2;
                    for i3 in 0..s3 {
                        out.data[dst_base + i3 * s1 * s2] = a.data[src + i3];
                    }
                }
            }
        }
        return Ok(out);
    }
    if r == 4 && perm == [0, 2, 3, 1] {
        let (s0, s1, s2, s3) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        for i0 in 0..s0 {
            for i1 in 0..s1 {
                for i2 in 0..s2 {
                    let src = ((i0 * s1 + i1) * s2 + i2) * s3;
                    let dst_base = ((i0 * s2 + i2) * s3) * s1 + i1;
                    for i3 in 0..s3 {
                        out.data[dst_base + i3 * s1] = a.data[src + i3];
                    }
                }
            }
        }
        return Ok(out);
    }

    let in_strides = strides_of(&a.shape);
    let out_strides = strides_of(&out_shape);
    for (o_idx, slot) in out.data.iter_mut().enumerate() {
        let mut rem = o_idx;
        let mut src = 0;
        for d in 0..r {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            src += coord * in_strides[perm[d]];
        }
        *slot = a.data[src];
    }
    Ok(out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Shape both operands broadcast to, numpy rules (align trailing dims).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Elementwise binary op with broadcasting.
pub fn zip_broadcast(
    a: &Array,
    b: &Array,
    op_name: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array, AdError> {
    if a.shape == b.shape {
        // fast path: same shape, single fused loop
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Array::new(a.shape.clone(), data);
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape).ok_or(AdError::ShapeMismatch {
        op: op_name,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let mut out = Array::zeros(&out_shape);
    let out_strides = strides_of(&out_shape);
    let map_src = |shape: &[usize]| {
        // per output dim: stride into the source, 0 where the source broadcasts
        let pad = out_shape.len() - shape.len();
        let src_strides = strides_of(shape);
        let mut m = vec![0usize; out_shape.len()];
        for d in 0..out_shape.len() {
            if d >= pad && shape[d - pad] != 1 {
                m[d] = src_strides[d - pad];
            }
        }
        m
    };
    let ma = map_src(&a.shape);
    let mb = map_src(&b.shape);
    for (o_idx, slot) in out.data.iter_mut().enumerate() {
        let mut rem = o_idx;
        let (mut ia, mut ib) = (0, 0);
        for d in 0..out_shape.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            ia += coord * ma[d];
            ib += coord * mb[d];
        }
        *slot = f(a.data[ia], b.data[ib]);
    }
    Ok(out)
}

/// Sums `g` (broadcast-output shaped) back down to `target` shape.
pub fn reduce_to_shape(g: &Array, target: &[usize]) -> Array {
    if g.shape == target {
        return g.clone();
    }
    let mut out = Array::zeros(target);
    let g_strides = strides_of(&g.shape);
    let pad = g.shape.len() - target.len();
    let t_strides = strides_of(target);
    for (g_idx, &v) in g.data.iter().enumerate() {
        let mut rem = g_idx;
        let mut t_idx = 0;
        for d in 0..g.shape.len() {
            let coord = rem / g_strides[d];
            rem %= g_strides[d];
            if d >= pad && target[d - pad] != 1 {
                t_idx += coord * t_strides[d - pad];
            }
        }
        out.data[t_idx] += v;
    }
    out
}

// ---------------------------------------------------------------------------
// row-wise kernels (softmax, layernorm) shared by tape and no-grad paths
// ---------------------------------------------------------------------------

/// Masked softmax over the last dim, in place on `row`.
/// `allowed` yields the active column set; a fully-masked row gets a one-hot
/// on `diag` (every token may attend to itself, so rows are never NaN).
pub fn softmax_row_masked(row: &mut [f64], allowed: impl Fn(usize) -> bool, diag: Option<usize>) {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        for v in row.iter_mut() {
            *v = 0.0;
        }
        if let Some(d) = diag {
            row[d] = 1.0;
        }
        return;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer norm over the last dim: returns (out, mean, rstd) per row.
pub fn layernorm_rows(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        let or = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    (out, means, rstds)
}
