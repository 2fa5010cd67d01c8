//! Tape-recorded reverse-mode differentiation over [`Array`] values.
//!
//! Ops are pushed in execution order, so node ids are already a topological
//! order and the backward sweep is a single reverse pass. Gradients
//! accumulate by summation across fan-out; leaves created as constants are
//! skipped entirely (their adjoints are never materialized).

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::array::{
    bmm, bmm_nt, bmm_tn, inverse_perm, layernorm_rows, matmul, matmul_nt, matmul_tn, permute,
    reduce_to_shape, softmax_row_masked, zip_broadcast, Array,
};
use super::AdError;

const LOG_CLAMP: f64 = 1e-12;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask shared by every head of an instance:
/// `allow[b, i, j]` says token `i` of instance `b` may attend to token `j`.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub instances: usize,
    pub tokens: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(instances: usize, tokens: usize, allow: Vec<bool>) -> Self {
        assert_eq!(allow.len(), instances * tokens * tokens);
        Self { instances, tokens, allow }
    }

    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        self.allow[(b * self.tokens + i) * self.tokens + j]
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Bmm(Var, Var),
    BmmNt(Var, Var),
    AttnScores { q: Var, k: Var, bias: Option<Var>, phi: Arc<Array>, scale: f64, heads: usize },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    // plain and masked softmax share one adjoint: it only needs the saved
    // output, where masked entries are exactly zero
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Relu(Var),
    // factors hold 0.0 for dropped entries and 1/(1-p) for kept ones, so
    // both passes are a branch-free elementwise product
    Dropout { x: Var, factors: Arc<Vec<f64>> },
    Ln(Var),
    Square(Var),
    Powf(Var, f64),
    Recip(Var),
    ReduceSum(Var, usize),
    ReduceMean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Arc<Vec<u32>>, probs: Array },
    Nll { probs: Var, targets: Arc<Vec<u32>> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Bmm(..) => "bmm",
        Op::BmmNt(..) => "bmm_nt",
        Op::AttnScores { .. } => "attn_scores",
        Op::Permute(..) => "permute",
        Op::Reshape(..) => "reshape",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::Relu(..) => "relu",
        Op::Dropout { .. } => "dropout",
        Op::Ln(..) => "ln",
        Op::Square(..) => "square",
        Op::Powf(..) => "powf",
        Op::Recip(..) => "recip",
        Op::ReduceSum(..) => "reduce_sum",
        Op::ReduceMean(..) => "reduce_mean",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::CrossEntropy { .. } => "cross_entropy_from_logits",
        Op::Nll { .. } => "nll",
    }
}

struct Node {
    value: Array,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, needs_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input; no gradient is ever computed for it or
    /// through ops that depend only on constants.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, needs_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, needs_grad: bool, op: Op) -> Result<Var, AdError> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(AdError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { value, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = matmul(self.value(a), self.value(b))?;
        self.push(v, self.needs(a) || self.needs(b), Op::Matmul(a, b))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = bmm(self.value(a), self.value(b))?;
        self.push(v, self.needs(a) || self.needs(b), Op::Bmm(a, b))
    }

    /// Batched `a @ b^T`; used for attention scores so no explicit
    /// transpose node is needed.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = bmm_nt(self.value(a), self.value(b))?;
        self.push(v, self.needs(a) || self.needs(b), Op::BmmNt(a, b))
    }

    /// Fused pre-softmax attention scores over `[instances*heads, n, dk]`
    /// query/key blocks:
    /// `out[g,i,j] = scale * dot(q[g,i], k[g,j]) + sum_m phi[b,i,j,m] * bias[h,m]`
    /// with `phi` a constant `[instances*n*n, views]` plane shared across
    /// heads. `bias: None` is vanilla scaled dot-product attention.
    pub fn attn_scores(
        &mut self,
        q: Var,
        k: Var,
        bias: Option<Var>,
        phi: Arc<Array>,
        heads: usize,
        scale: f64,
    ) -> Result<Var, AdError> {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape();
        if qs.len() != 3 || qs != ks || qs[0] % heads != 0 {
            return Err(AdError::ShapeMismatch {
                op: "attn_scores",
                lhs: qs,
                rhs: ks.to_vec(),
            });
        }
        let (g, n, dk) = (qs[0], qs[1], qs[2]);
        let views = match bias {
            Some(b) => {
                let bs = self.value(b).shape();
                let want = phi.len() / (g / heads * n * n);
                if bs != [heads, want] {
                    return Err(AdError::ShapeMismatch {
                        op: "attn_scores",
                        lhs: bs.to_vec(),
                        rhs: vec![heads, want],
                    });
                }
                want
            }
            None => 0,
        };
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = Array::zeros(&[g, n, n]);
        let plane = |(gi, chunk): (usize, &mut [f64])| {
            let h = gi % heads;
            let b = gi / heads;
            let b_h = bd.map(|d| &d[h * views..(h + 1) * views]);
            for i in 0..n {
                let qi = &qd[(gi * n + i) * dk..(gi * n + i + 1) * dk];
                let row = &mut chunk[i * n..(i + 1) * n];
                for (j, slot) in row.iter_mut().enumerate() {
                    let kj = &kd[(gi * n + j) * dk..(gi * n + j + 1) * dk];
                    let mut s = 0.0;
                    for (a, b) in qi.iter().zip(kj) {
                        s += a * b;
                    }
                    s *= scale;
                    if let Some(bh) = b_h {
                        let p = &phi.data()[(b * n * n + i * n + j) * views
                            ..(b * n * n + i * n + j + 1) * views];
                        for (pm, bm) in p.iter().zip(bh) {
                            s += pm * bm;
                        }
                    }
                    *slot = s;
                }
            }
        };
        if g * n * n >= 1 << 17 {
            use rayon::prelude::*;
            out.data_mut().par_chunks_mut(n * n).enumerate().for_each(plane);
        } else {
            out.data_mut().chunks_exact_mut(n * n).enumerate().for_each(plane);
        }
        let needs = self.needs(q) || self.needs(k) || bias.is_some_and(|b| self.needs(b));
        self.push(out, needs, Op::AttnScores { q, k, bias, phi, scale, heads })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, AdError> {
        let v = permute(self.value(x), perm)?;
        self.push(v, self.needs(x), Op::Permute(x, perm.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let v = self.value(x).clone().with_shape(shape.to_vec())?;
        self.push(v, self.needs(x), Op::Reshape(x))
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = zip_broadcast(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = zip_broadcast(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(v, self.needs(a) || self.needs(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let v = zip_broadcast(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(v, self.needs(a) || self.needs(b), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        let v = self.value(x).map(|t| t * c);
        self.push(v, self.needs(x), Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        let v = self.value(x).map(|t| t + c);
        self.push(v, self.needs(x), Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AdError> {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { 0.0 });
        self.push(v, self.needs(x), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AdError> {
        let v = self.value(x).map(|t| t * t);
        self.push(v, self.needs(x), Op::Square(x))
    }

    /// Natural log with the argument clamped at 1e-12 (flat below the clamp).
    pub fn ln(&mut self, x: Var) -> Result<Var, AdError> {
        let v = self.value(x).map(|t| t.max(LOG_CLAMP).ln());
        self.push(v, self.needs(x), Op::Ln(x))
    }

    /// `max(x, 1e-12)^p` for non-negative inputs (sharpening exponent).
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var, AdError> {
        let v = self.value(x).map(|t| t.max(LOG_CLAMP).powf(p));
        self.push(v, self.needs(x), Op::Powf(x, p))
    }

    /// `1 / max(x, 1e-12)`.
    pub fn recip(&mut self, x: Var) -> Result<Var, AdError> {
        let v = self.value(x).map(|t| 1.0 / t.max(LOG_CLAMP));
        self.push(v, self.needs(x), Op::Recip(x))
    }

    // -- shape surgery -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AdError> {
        if parts.is_empty() {
            return Err(AdError::BadShape("concat of zero parts".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(AdError::BadShape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let row = total * inner;
        let mut col = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let width = s[axis] * inner;
            for o in 0..outer {
                let src = &self.value(p).data()[o * width..(o + 1) * width];
                data[o * row + col..o * row + col + width].copy_from_slice(src);
            }
            col += width;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Array::new(out_shape, data)?, needs, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AdError> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(AdError::BadShape(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * s[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&self.value(x).data()[src_base..src_base + len * inner]);
        }
        self.push(Array::new(out_shape, data)?, self.needs(x), Op::Slice { x, axis, start })
    }

    // -- normalization / activation ----------------------------------------

    /// Row-wise softmax over the last dim.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AdError> {
        let d = *self.value(x).shape().last().unwrap();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_exact_mut(d) {
            softmax_row_masked(row, |_| true, None);
        }
        self.push(v, self.needs(x), Op::Softmax { x })
    }

    /// Attention softmax: `x` is `[instances*heads, n, n]`, masked columns are
    /// excluded before normalization, and a fully-masked row falls back to a
    /// one-hot on its own diagonal.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<AttnMask>) -> Result<Var, AdError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s[1] != mask.tokens || s[2] != mask.tokens || s[0] % mask.instances != 0
        {
            return Err(AdError::ShapeMismatch {
                op: "masked_softmax",
                lhs: s,
                rhs: vec![mask.instances, mask.tokens, mask.tokens],
            });
        }
        let heads = s[0] / mask.instances;
        let n = mask.tokens;
        let mut v = self.value(x).clone();
        let plane = |(g, chunk): (usize, &mut [f64])| {
            let b = g / heads;
            for (i, row) in chunk.chunks_exact_mut(n).enumerate() {
                softmax_row_masked(row, |j| mask.allows(b, i, j), Some(i));
            }
        };
        if v.len() >= 1 << 17 {
            use rayon::prelude::*;
            v.data_mut().par_chunks_mut(n * n).enumerate().for_each(plane);
        } else {
            v.data_mut().chunks_exact_mut(n * n).enumerate().for_each(plane);
        }
        self.push(v, self.needs(x), Op::Softmax { x })
    }

    /// Layer normalization over the last dim with affine `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AdError> {
        let d = *self.value(x).shape().last().unwrap();
        let (gs, bs) = (self.value(gamma).shape(), self.value(beta).shape());
        if gs != [d] || bs != [d] {
            return Err(AdError::ShapeMismatch {
                op: "layernorm",
                lhs: self.value(x).shape().to_vec(),
                rhs: gs.to_vec(),
            });
        }
        let (out, mean, rstd) = layernorm_rows(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let v = Array::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, needs, Op::LayerNorm { x, gamma, beta, mean, rstd })
    }

    /// Inverted dropout. `rng: None` (or `p == 0`) is evaluation mode and
    /// returns the input untouched; in train mode kept entries scale by
    /// `1/(1-p)`.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, AdError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AdError::BadShape(format!("dropout rate {p} outside [0,1)")));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        // threshold on raw u32 draws: Bernoulli(p) to 2^-32 resolution
        let cut = ((p * 4_294_967_296.0) as u64).min(u32::MAX as u64 + 1);
        let scale = 1.0 / (1.0 - p);
        let mut words = vec![0u32; self.value(x).len()];
        rng.fill(&mut words[..]);
        let factors: Vec<f64> =
            words.iter().map(|&w| if (w as u64) >= cut { scale } else { 0.0 }).collect();
        let src = self.value(x).data();
        let data: Vec<f64> = src.iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let v = Array::new(self.value(x).shape().to_vec(), data)?;
        self.push(v, self.needs(x), Op::Dropout { x, factors: Arc::new(factors) })
    }

    // -- reductions / losses -------------------------------------------------

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, AdError> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() {
            return Err(AdError::BadShape(format!("reduce axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = s.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        let src = self.value(x).data();
        for o in 0..outer {
            for a in 0..s[axis] {
                let base = (o * s[axis] + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / s[axis] as f64;
            for v in &mut data {
                *v *= inv;
            }
        }
        let op = if mean { Op::ReduceMean(x, axis) } else { Op::ReduceSum(x, axis) };
        self.push(Array::new(out_shape, data)?, self.needs(x), op)
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var, AdError> {
        self.reduce(x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var, AdError> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, AdError> {
        let v = Array::scalar(self.value(x).data().iter().sum());
        self.push(v, self.needs(x), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, AdError> {
        let n = self.value(x).len() as f64;
        let v = Array::scalar(self.value(x).data().iter().sum::<f64>() / n);
        self.push(v, self.needs(x), Op::MeanAll(x))
    }

    /// Per-row `-log softmax(logits)[target]`, numerically stable, with the
    /// log argument clamped at 1e-12.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: Var,
        targets: Arc<Vec<u32>>,
    ) -> Result<Var, AdError> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(AdError::BadShape(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        let mut probs = self.value(logits).clone();
        for row in probs.data_mut().chunks_exact_mut(c) {
            softmax_row_masked(row, |_| true, None);
        }
        let mut out = vec![0.0; s[0]];
        for (r, row) in probs.data().chunks_exact(c).enumerate() {
            let t = targets[r] as usize;
            if t >= c {
                return Err(AdError::BadShape(format!("target class {t} out of range {c}")));
            }
            out[r] = -row[t].max(LOG_CLAMP).ln();
        }
        let v = Array::new(vec![s[0]], out)?;
        self.push(v, self.needs(logits), Op::CrossEntropy { logits, targets, probs })
    }

    /// Per-row `-ln(max(probs[target], 1e-12))` on probability rows.
    pub fn nll_rows(&mut self, probs: Var, targets: Arc<Vec<u32>>) -> Result<Var, AdError> {
        let s = self.value(probs).shape().to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(AdError::BadShape(format!(
                "nll_rows: probs {s:?} vs {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        let mut out = vec![0.0; s[0]];
        for (r, row) in self.value(probs).data().chunks_exact(c).enumerate() {
            out[r] = -row[targets[r] as usize].max(LOG_CLAMP).ln();
        }
        let v = Array::new(vec![s[0]], out)?;
        self.push(v, self.needs(probs), Op::Nll { probs, targets })
    }

    /// Squared L2 distance between `a` and `b` summed over everything,
    /// composed from primitives.
    pub fn squared_l2(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.sum_all(sq)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Only leaf gradients are retained;
    /// intermediate adjoints are consumed as they propagate.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        self.backward_impl(loss, false)
    }

    /// Like [`Tape::backward`] but also keeps the gradient of every
    /// intermediate node (costlier; used by tests probing internal flow).
    pub fn backward_retaining_all(&self, loss: Var) -> Result<Gradients, AdError> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&self, loss: Var, retain_all: bool) -> Result<Gradients, AdError> {
        if self.nodes.is_empty() {
            return Err(AdError::EmptyTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(AdError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut slots: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Array::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if retain_all && !matches!(self.nodes[idx].op, Op::Leaf) {
                slots[idx] = Some(g.clone());
            }
            self.apply_adjoint(idx, g, &mut slots)?;
        }
        Ok(Gradients { slots })
    }

    /// Like [`Tape::backward`] but returns per-op-kind wall time; bench tool.
    #[doc(hidden)]
    pub fn backward_profiled(&self, loss: Var) -> Vec<(&'static str, f64)> {
        use std::collections::HashMap;
        use std::time::Instant;
        let mut slots: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Array::scalar(1.0));
        let mut spent: HashMap<&'static str, f64> = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let t0 = Instant::now();
            self.apply_adjoint(idx, g, &mut slots).unwrap();
            *spent.entry(op_name(&self.nodes[idx].op)).or_default() +=
                t0.elapsed().as_secs_f64() * 1e3;
        }
        let mut out: Vec<(&'static str, f64)> = spent.into_iter().collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        out
    }

    fn acc(&self, slots: &mut [Option<Array>], v: Var, g: Array) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut slots[v.0] {
            Some(cur) => cur.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Ownership-taking arms first: these either keep or forward the incoming
    /// gradient without a copy; everything else borrows it.
    fn apply_adjoint(
        &self,
        idx: usize,
        g: Array,
        slots: &mut [Option<Array>],
    ) -> Result<(), AdError> {
        match &self.nodes[idx].op {
            Op::Leaf => {
                match &mut slots[idx] {
                    Some(cur) => cur.add_assign(&g),
                    slot => *slot = Some(g),
                }
                return Ok(());
            }
            Op::Reshape(x) => {
                let x = *x;
                let back = g.with_shape(self.value(x).shape().to_vec())?;
                self.acc(slots, x, back);
                return Ok(());
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) && self.value(a).shape() == g.shape() {
                    if self.needs(b) {
                        self.acc(slots, b, reduce_to_shape(&g, self.value(b).shape()));
                    }
                    self.acc(slots, a, g);
                    return Ok(());
                }
            }
            _ => {}
        }
        self.apply_adjoint_ref(idx, &g, slots)
    }

    fn apply_adjoint_ref(
        &self,
        idx: usize,
        g: &Array,
        slots: &mut [Option<Array>],
    ) -> Result<(), AdError> {
        let op = &self.nodes[idx].op;
        match op {
            Op::Leaf | Op::Reshape(..) => unreachable!("handled by apply_adjoint"),
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    self.acc(slots, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    self.acc(slots, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Bmm(a, b) => {
                if self.needs(*a) {
                    self.acc(slots, *a, bmm_nt(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    self.acc(slots, *b, bmm_tn(self.value(*a), g)?);
                }
            }
            Op::BmmNt(a, b) => {
                if self.needs(*a) {
                    self.acc(slots, *a, bmm(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    self.acc(slots, *b, bmm_tn(g, self.value(*a))?);
                }
            }
            Op::AttnScores { q, k, bias, phi, scale, heads } => {
                if self.needs(*q) {
                    let mut dq = bmm(g, self.value(*k))?;
                    dq.scale_in_place(*scale);
                    self.acc(slots, *q, dq);
                }
                if self.needs(*k) {
                    let mut dk = bmm_tn(g, self.value(*q))?;
                    dk.scale_in_place(*scale);
                    self.acc(slots, *k, dk);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let views = self.value(*b).shape()[1];
                        let gs = g.shape();
                        let (groups, n) = (gs[0], gs[1]);
                        let mut db = Array::zeros(&[*heads, views]);
                        for gi in 0..groups {
                            let h = gi % heads;
                            let inst = gi / heads;
                            let grp = &g.data()[gi * n * n..(gi + 1) * n * n];
                            let php = &phi.data()[inst * n * n * views..(inst + 1) * n * n * views];
            // local accumulators so the view slots live in registers
                            let mut acc = [0.0f64; 8];
                            debug_assert!(views <= 8);
                            for (pair, &gv) in grp.iter().enumerate() {
                                let p = &php[pair * views..(pair + 1) * views];
                                for (a, &pv) in acc[..views].iter_mut().zip(p) {
                                    *a += gv * pv;
                                }
                            }
                            let dbh = &mut db.data_mut()[h * views..(h + 1) * views];
                            for (d, a) in dbh.iter_mut().zip(&acc) {
                                *d += a;
                            }
                        }
                        self.acc(slots, *b, db);
                    }
                }
            }
            Op::Permute(x, perm) => {
                self.acc(slots, *x, permute(g, &inverse_perm(perm))?);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.acc(slots, *a, reduce_to_shape(g, self.value(*a).shape()));
                }
                if self.needs(*b) {
                    self.acc(slots, *b, reduce_to_shape(g, self.value(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.acc(slots, *a, reduce_to_shape(g, self.value(*a).shape()));
                }
                if self.needs(*b) {
                    let mut r = reduce_to_shape(g, self.value(*b).shape());
                    r.scale_in_place(-1.0);
                    self.acc(slots, *b, r);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = zip_broadcast(g, self.value(*b), "mul", |x, y| x * y)?;
                    self.acc(slots, *a, reduce_to_shape(&ga, self.value(*a).shape()));
                }
                if self.needs(*b) {
                    let gb = zip_broadcast(g, self.value(*a), "mul", |x, y| x * y)?;
                    self.acc(slots, *b, reduce_to_shape(&gb, self.value(*b).shape()));
                }
            }
            Op::Scale(x, c) => {
                self.acc(slots, *x, g.map(|t| t * c));
            }
            Op::AddScalar(x) => {
                self.acc(slots, *x, g.clone());
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let gp = slice_array(g, *axis, start, len);
                    start += len;
                    self.acc(slots, p, gp);
                }
            }
            Op::Slice { x, axis, start } => {
                let mut back = Array::zeros(self.value(*x).shape());
                scatter_slice(&mut back, g, *axis, *start);
                self.acc(slots, *x, back);
            }
            Op::Softmax { x } => {
                // saved output y: dx_j = y_j * (g_j - sum_k g_k y_k), rowwise.
                // masked entries have y_j = 0, forced-diagonal rows have a
                // constant one-hot output; both get zero gradient for free.
                let y = &self.nodes[idx].value;
                let d = *y.shape().last().unwrap();
                let mut dx = Array::zeros(y.shape());
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(dx.data_mut().chunks_exact_mut(d))
                {
                    let s: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(slots, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = *self.value(*x).shape().last().unwrap();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = Array::zeros(self.value(*x).shape());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, (xr, gr)) in
                    xv.chunks_exact(d).zip(g.data().chunks_exact(d)).enumerate()
                {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rs;
                        let gh = gr[j] * gam[j];
                        m1 += gh;
                        m2 += gh * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    let dr = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rs;
                        dr[j] = rs * (gr[j] * gam[j] - m1 - xhat * m2);
                    }
                }
                self.acc(slots, *x, dx);
                if self.needs(*gamma) {
                    self.acc(slots, *gamma, Array::new(vec![d], dgamma)?);
                }
                if self.needs(*beta) {
                    self.acc(slots, *beta, Array::new(vec![d], dbeta)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = g.data().iter().zip(xv).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 });
                self.acc(slots, *x, Array::new(self.value(*x).shape().to_vec(), data.collect())?);
            }
            Op::Dropout { x, factors } => {
                let data = g.data().iter().zip(factors.iter()).map(|(&gv, &f)| gv * f);
                self.acc(slots, *x, Array::new(self.value(*x).shape().to_vec(), data.collect())?);
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let data = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &x)| if x > LOG_CLAMP { gv / x } else { 0.0 });
                self.acc(slots, *x, Array::new(self.value(*x).shape().to_vec(), data.collect())?);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let data = g.data().iter().zip(xv).map(|(&gv, &x)| 2.0 * x * gv);
                self.acc(slots, *x, Array::new(self.value(*x).shape().to_vec(), data.collect())?);
            }
            Op::Powf(x, p) => {
                let xv = self.value(*x).data();
                let data = g.data().iter().zip(xv).map(|(&gv, &x)| {
                    if x > LOG_CLAMP {
                        gv * p * x.powf(p - 1.0)
                    } else {
                        0.0
                    }
                });
                self.acc(slots, *x, Array::new(self.value(*x).shape().to_vec(), data.collect())?);
            }
            Op::Recip(x) => {
                let xv = self.value(*x).data();
                let data = g.data().iter().zip(xv).map(|(&gv, &x)| {
                    if x > LOG_CLAMP {
                        -gv / (x * x)
                    } else {
                        0.0
                    }
                });
                self.acc(slots, *x, Array::new(self.value(*x).shape().to_vec(), data.collect())?);
            }
            Op::ReduceSum(x, axis) | Op::ReduceMean(x, axis) => {
                let s = self.value(*x).shape();
                let scale =
                    if matches!(op, Op::ReduceMean(..)) { 1.0 / s[*axis] as f64 } else { 1.0 };
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut back = Array::zeros(s);
                for o in 0..outer {
                    for a in 0..s[*axis] {
                        let base = (o * s[*axis] + a) * inner;
                        for i in 0..inner {
                            back.data_mut()[base + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                self.acc(slots, *x, back);
            }
            Op::SumAll(x) => {
                self.acc(slots, *x, Array::full(self.value(*x).shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(slots, *x, Array::full(self.value(*x).shape(), g.item() / n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = probs.shape()[1];
                let mut dl = Array::zeros(self.value(*logits).shape());
                for (r, (pr, dr)) in probs
                    .data()
                    .chunks_exact(c)
                    .zip(dl.data_mut().chunks_exact_mut(c))
                    .enumerate()
                {
                    let t = targets[r] as usize;
                    if pr[t] <= LOG_CLAMP {
                        continue; // clamped: flat region
                    }
                    for j in 0..c {
                        dr[j] = g.data()[r] * (pr[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(slots, *logits, dl);
            }
            Op::Nll { probs, targets } => {
                let c = self.value(*probs).shape()[1];
                let pv = self.value(*probs).data();
                let mut dp = Array::zeros(self.value(*probs).shape());
                for (r, &t) in targets.iter().enumerate() {
                    let p = pv[r * c + t as usize];
                    if p > LOG_CLAMP {
                        dp.data_mut()[r * c + t as usize] = -g.data()[r] / p;
                    }
                }
                self.acc(slots, *probs, dp);
            }
        }
        Ok(())
    }

}

fn slice_array(a: &Array, axis: usize, start: usize, len: usize) -> Array {
    let s = a.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out_shape = s.to_vec();
    out_shape[axis] = len;
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let base = (o * s[axis] + start) * inner;
        data[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&a.data()[base..base + len * inner]);
    }
    Array::new(out_shape, data).expect("slice shape")
}

fn scatter_slice(dst: &mut Array, g: &Array, axis: usize, start: usize) {
    let s = dst.shape().to_vec();
    let len = g.shape()[axis];
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    for o in 0..outer {
        let base = (o * s[axis] + start) * inner;
        dst.data_mut()[base..base + len * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
}

/// Gradients keyed by tape node; leaves not on any path to the loss
/// report zeros via [`Gradients::dense`].
pub struct Gradients {
    slots: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.slots[v.0].take()
    }

    /// Gradient for `v`, densified to `shape` when absent.
    pub fn dense(&mut self, v: Var, shape: &[usize]) -> Array {
        self.slots[v.0].take().unwrap_or_else(|| Array::zeros(shape))
    }
}
