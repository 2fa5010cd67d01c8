//! The ego-graph transformer network: input projection, shared global-node
//! embeddings, stacked proximity-enhanced attention layers, center-node
//! readout, and a linear softmax classifier.
//!
//! Two forward paths share the same kernels: a tape-recorded one for
//! training and gradient checks, and a no-grad streaming one for long
//! sequences (full-graph mode) where materializing every intermediate would
//! not fit in memory.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{
    layernorm_rows, matmul, softmax_row_masked, AdError, Array, AttnMask, Tape, Var,
};
use crate::graph::Graph;
use crate::node2seq::{EgoBatch, Token};
use crate::rng::{self, stream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("batch features have width {got}, model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("hidden dim {d} not divisible by {heads} heads")]
    HeadSplit { d: usize, heads: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Where the learnable global-node embeddings enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GlobalInjection {
    /// Globals are ordinary tokens from layer 0 on (projected features and
    /// global embeddings share the first attention round).
    #[default]
    Input,
    /// Globals are invisible to layer 0's attention and their embeddings are
    /// added to that layer's FFN input instead; later layers attend them
    /// normally.
    FirstFfn,
}

impl std::fmt::Display for GlobalInjection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GlobalInjection::Input => "input",
            GlobalInjection::FirstFfn => "first_ffn",
        })
    }
}

impl std::str::FromStr for GlobalInjection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input" => Ok(GlobalInjection::Input),
            "first_ffn" => Ok(GlobalInjection::FirstFfn),
            other => Err(format!("unknown global injection {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    pub num_global: usize,
    pub prox_views: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub injection: GlobalInjection,
}

impl ModelConfig {
    pub fn new(feat_dim: usize, classes: usize) -> Self {
        Self {
            feat_dim,
            hidden_dim: 64,
            heads: 8,
            layers: 2,
            classes,
            num_global: 1,
            prox_views: 3,
            ffn_mult: 4,
            dropout: 0.5,
            ln_eps: 1e-5,
            injection: GlobalInjection::Input,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim % self.heads != 0 {
            return Err(ModelError::HeadSplit { d: self.hidden_dim, heads: self.heads });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_q: Array,
    pub w_k: Array,
    pub w_v: Array,
    pub w_o: Array,
    /// Per-head proximity bias, `[heads, prox_views]`; zero-initialized so
    /// training starts at vanilla attention.
    pub prox_bias: Array,
    pub w_ffn1: Array,
    pub w_ffn2: Array,
    pub ln1_gamma: Array,
    pub ln1_beta: Array,
    pub ln2_gamma: Array,
    pub ln2_beta: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub w_in: Array,
    /// Global-node embeddings `[num_global, hidden_dim]`.
    pub globals: Array,
    pub layers: Vec<LayerParams>,
    pub classifier: Array,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 * limit - limit).collect();
    Array::new(vec![rows, cols], data).expect("glorot shape")
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut r = rng::rng(seed, &[stream::PARAM_INIT]);
        let d = cfg.hidden_dim;
        let gauss = Normal::new(0.0, 0.02).unwrap();
        let globals = Array::new(
            vec![cfg.num_global, d],
            (0..cfg.num_global * d).map(|_| gauss.sample(&mut r)).collect(),
        )?;
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                w_q: glorot(&mut r, d, d),
                w_k: glorot(&mut r, d, d),
                w_v: glorot(&mut r, d, d),
                w_o: glorot(&mut r, d, d),
                prox_bias: Array::zeros(&[cfg.heads, cfg.prox_views]),
                w_ffn1: glorot(&mut r, d, cfg.ffn_mult * d),
                w_ffn2: glorot(&mut r, cfg.ffn_mult * d, d),
                ln1_gamma: Array::full(&[d], 1.0),
                ln1_beta: Array::zeros(&[d]),
                ln2_gamma: Array::full(&[d], 1.0),
                ln2_beta: Array::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            w_in: glorot(&mut r, cfg.feat_dim, d),
            globals,
            layers,
            classifier: glorot(&mut r, d, cfg.classes),
            cfg,
        })
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Named parameter slots in the canonical traversal order. Weight
    /// matrices carry decoupled weight decay; proximity biases, global
    /// embeddings, and layer-norm affines do not.
    pub fn slots(&self) -> Vec<(String, bool)> {
        let mut out = vec![("w_in".to_string(), true), ("globals".to_string(), false)];
        for l in 0..self.layers.len() {
            for (field, decay) in [
                ("w_q", true),
                ("w_k", true),
                ("w_v", true),
                ("w_o", true),
                ("prox_bias", false),
                ("w_ffn1", true),
                ("w_ffn2", true),
                ("ln1_gamma", false),
                ("ln1_beta", false),
                ("ln2_gamma", false),
                ("ln2_beta", false),
            ] {
                out.push((format!("layer{l}.{field}"), decay));
            }
        }
        out.push(("classifier".to_string(), true));
        out
    }

    pub fn arrays(&self) -> Vec<&Array> {
        let mut v = vec![&self.w_in, &self.globals];
        for l in &self.layers {
            v.extend([
                &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.prox_bias, &l.w_ffn1, &l.w_ffn2,
                &l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta,
            ]);
        }
        v.push(&self.classifier);
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        let mut v: Vec<&mut Array> = vec![&mut self.w_in, &mut self.globals];
        for l in &mut self.layers {
            v.push(&mut l.w_q);
            v.push(&mut l.w_k);
            v.push(&mut l.w_v);
            v.push(&mut l.w_o);
            v.push(&mut l.prox_bias);
            v.push(&mut l.w_ffn1);
            v.push(&mut l.w_ffn2);
            v.push(&mut l.ln1_gamma);
            v.push(&mut l.ln1_beta);
            v.push(&mut l.ln2_gamma);
            v.push(&mut l.ln2_beta);
        }
        v.push(&mut self.classifier);
        v
    }

    /// Zeroes the proximity biases of every layer (the PE-free ablation
    /// freezes them there; see the trainer's `freeze_prox_bias`).
    pub fn zero_prox_bias(&mut self) {
        for l in &mut self.layers {
            l.prox_bias = Array::zeros(l.prox_bias.shape());
        }
    }
}

// ---------------------------------------------------------------------------
// batch inputs
// ---------------------------------------------------------------------------

/// Host-side constants of one batch: gathered feature rows, global-slot
/// indicator, dense proximity tensor, and the attention mask.
pub struct BatchInputs {
    pub instances: usize,
    pub tokens: usize,
    /// `[instances*tokens, feat_dim]`; zero rows for PAD and global slots.
    pub x: Array,
    /// `[instances*tokens, num_global]`; one-hot on global slots.
    pub indicator: Array,
    /// `[instances*tokens*tokens, prox_views]` (flattened for the bias matmul).
    pub phi: Array,
    pub mask: Arc<AttnMask>,
    pub labels: Arc<Vec<u32>>,
    pub groups: Vec<u32>,
    real_lens: Vec<usize>,
    num_global: usize,
}

impl BatchInputs {
    pub fn from_batch(batch: &EgoBatch, g: &Graph, n_g: usize) -> Result<Self, ModelError> {
        let (b, n) = (batch.instances, batch.tokens);
        let d_f = g.feat_dim();
        let mut x = Array::zeros(&[b * n, d_f]);
        let mut ind = Array::zeros(&[b * n, n_g.max(1)]);
        for i in 0..b {
            for t in 0..n {
                match batch.slot(i, t) {
                    Token::Node(gid) => {
                        let row = g.feature_row(gid);
                        x.data_mut()[(i * n + t) * d_f..(i * n + t + 1) * d_f]
                            .copy_from_slice(row);
                    }
                    Token::Global(k) => {
                        ind.data_mut()[(i * n + t) * n_g.max(1) + k as usize] = 1.0;
                    }
                    Token::Pad => {}
                }
            }
        }
        let phi = Array::new(vec![b * n * n, batch.views], batch.phi.clone())?;
        let mask = Arc::new(AttnMask::new(b, n, batch.mask.clone()));
        Ok(Self {
            instances: b,
            tokens: n,
            x,
            indicator: ind,
            phi,
            mask,
            labels: Arc::new(batch.labels.clone()),
            groups: batch.groups.clone(),
            real_lens: batch.real_lens.clone(),
            num_global: n_g,
        })
    }

    /// Mask variant where global slots are isolated (self-attention only);
    /// used by the first layer under [`GlobalInjection::FirstFfn`].
    fn mask_without_globals(&self) -> Arc<AttnMask> {
        let n = self.tokens;
        let mut allow = self.mask.allow.clone();
        for (i, &real) in self.real_lens.iter().enumerate() {
            for t in real..real + self.num_global {
                for j in 0..n {
                    allow[(i * n + t) * n + j] = t == j;
                    allow[(i * n + j) * n + t] = t == j;
                }
            }
        }
        Arc::new(AttnMask::new(self.instances, n, allow))
    }
}

// ---------------------------------------------------------------------------
// tape forward
// ---------------------------------------------------------------------------

/// Tape handles of every parameter, bound in [`ModelParams::slots`] order.
pub struct ParamVars {
    pub w_in: Var,
    pub globals: Var,
    pub layers: Vec<LayerVars>,
    pub classifier: Var,
}

pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub prox_bias: Var,
    pub w_ffn1: Var,
    pub w_ffn2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut leaves = params.arrays().into_iter().map(|a| tape.leaf(a.clone()));
        let mut next = || leaves.next().expect("slot order");
        let w_in = next();
        let globals = next();
        let layers = (0..params.layers.len())
            .map(|_| LayerVars {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                prox_bias: next(),
                w_ffn1: next(),
                w_ffn2: next(),
                ln1_gamma: next(),
                ln1_beta: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
            })
            .collect();
        let classifier = next();
        Self { w_in, globals, layers, classifier }
    }

    /// Vars in the same order as [`ModelParams::slots`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = vec![self.w_in, self.globals];
        for l in &self.layers {
            v.extend([
                l.w_q, l.w_k, l.w_v, l.w_o, l.prox_bias, l.w_ffn1, l.w_ffn2, l.ln1_gamma,
                l.ln1_beta, l.ln2_gamma, l.ln2_beta,
            ]);
        }
        v.push(self.classifier);
        v
    }
}

pub struct ForwardOut {
    /// Softmax class rows, `[instances, classes]`.
    pub probs: Var,
    pub logits: Var,
    /// Embedded input `[instances*tokens, hidden]`.
    pub h0: Var,
    /// Per-layer attention weights `[instances*heads, tokens, tokens]`.
    pub attn: Vec<Var>,
    /// Per-layer outputs `[instances*tokens, hidden]`.
    pub h_layers: Vec<Var>,
}

/// Differentiable forward pass over one batch. `dropout_rng: None` runs in
/// evaluation mode; `pe_enabled: false` skips the proximity-bias term
/// entirely (vanilla attention on the same tokens).
pub fn forward_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    inp: &BatchInputs,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    pe_enabled: bool,
) -> Result<ForwardOut, ModelError> {
    cfg.validate()?;
    if inp.x.shape()[1] != cfg.feat_dim {
        return Err(ModelError::FeatureWidth { expected: cfg.feat_dim, got: inp.x.shape()[1] });
    }
    let (b, n) = (inp.instances, inp.tokens);
    let (d, heads, dk) = (cfg.hidden_dim, cfg.heads, cfg.head_dim());

    let x = tape.constant(inp.x.clone());
    let mut h = tape.matmul(x, pv.w_in)?;
    let indicator = tape.constant(inp.indicator.clone());
    if cfg.num_global > 0 && cfg.injection == GlobalInjection::Input {
        let ginj = tape.matmul(indicator, pv.globals)?;
        h = tape.add(h, ginj)?;
    }
    let h0 = h;
    let phi = Arc::new(inp.phi.clone());

    let mut attn_trace = Vec::with_capacity(cfg.layers);
    let mut layer_trace = Vec::with_capacity(cfg.layers);
    for (li, layer) in pv.layers.iter().enumerate() {
        let mask = if cfg.injection == GlobalInjection::FirstFfn && li == 0 && cfg.num_global > 0 {
            inp.mask_without_globals()
        } else {
            inp.mask.clone()
        };

        // project and split heads: [b*n, d] -> [b*heads, n, dk]
        let split = |w: Var, tape: &mut Tape| -> Result<Var, ModelError> {
            let p = tape.matmul(h, w)?;
            let p = tape.reshape(p, &[b, n, heads, dk])?;
            let p = tape.permute(p, &[0, 2, 1, 3])?;
            Ok(tape.reshape(p, &[b * heads, n, dk])?)
        };
        let q = split(layer.w_q, tape)?;
        let k = split(layer.w_k, tape)?;
        let v = split(layer.w_v, tape)?;

        let bias = pe_enabled.then_some(layer.prox_bias);
        let scores =
            tape.attn_scores(q, k, bias, phi.clone(), heads, 1.0 / (dk as f64).sqrt())?;
        let mut attn = tape.masked_softmax(scores, mask)?;
        attn_trace.push(attn);
        attn = tape.dropout(attn, cfg.dropout, dropout_rng.as_deref_mut())?;

        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, heads, n, dk])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * n, d])?;
        let o = tape.matmul(ctx, layer.w_o)?;

        let res = tape.add(h, o)?;
        let mut hhat = tape.layernorm(res, layer.ln1_gamma, layer.ln1_beta, cfg.ln_eps)?;
        if cfg.injection == GlobalInjection::FirstFfn && li == 0 && cfg.num_global > 0 {
            let ginj = tape.matmul(indicator, pv.globals)?;
            hhat = tape.add(hhat, ginj)?;
        }

        let f1 = tape.matmul(hhat, layer.w_ffn1)?;
        let f1 = tape.relu(f1)?;
        let f1 = tape.dropout(f1, cfg.dropout, dropout_rng.as_deref_mut())?;
        let f2 = tape.matmul(f1, layer.w_ffn2)?;
        let res2 = tape.add(hhat, f2)?;
        h = tape.layernorm(res2, layer.ln2_gamma, layer.ln2_beta, cfg.ln_eps)?;
        layer_trace.push(h);
    }

    // center readout: token 0 of every instance
    let h3 = tape.reshape(h, &[b, n, d])?;
    let z = tape.slice(h3, 1, 0, 1)?;
    let z = tape.reshape(z, &[b, d])?;
    let logits = tape.matmul(z, pv.classifier)?;
    let probs = tape.softmax(logits)?;
    Ok(ForwardOut { probs, logits, h0, attn: attn_trace, h_layers: layer_trace })
}

/// Convenience eval-mode forward returning the probability rows.
pub fn predict_batch(
    params: &ModelParams,
    inp: &BatchInputs,
    pe_enabled: bool,
) -> Result<Array, ModelError> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params);
    let out = forward_tape(&mut tape, &pv, &params.cfg, inp, None, pe_enabled)?;
    Ok(tape.value(out.probs).clone())
}

// ---------------------------------------------------------------------------
// streaming no-grad forward for long single sequences
// ---------------------------------------------------------------------------

/// Evaluation-only forward over one unpadded fully-connected sequence of
/// `tokens` positions (`real` graph nodes followed by the global slots).
/// Attention is computed head by head so peak memory stays at one
/// `[tokens, tokens]` plane; the arithmetic matches the tape path exactly.
pub fn forward_sequence_eval(
    params: &ModelParams,
    x: &Array,
    phi: &Array,
    pe_enabled: bool,
) -> Result<Array, ModelError> {
    let cfg = &params.cfg;
    cfg.validate()?;
    if x.shape()[1] != cfg.feat_dim {
        return Err(ModelError::FeatureWidth { expected: cfg.feat_dim, got: x.shape()[1] });
    }
    let t = x.shape()[0];
    let (d, heads, dk) = (cfg.hidden_dim, cfg.heads, cfg.head_dim());
    debug_assert_eq!(phi.shape(), &[t * t, cfg.prox_views]);

    let mut h = matmul(x, &params.w_in)?;
    if cfg.num_global > 0 {
        // the last num_global rows are the global slots
        for k in 0..cfg.num_global {
            let dst = (t - cfg.num_global + k) * d;
            let src = &params.globals.data()[k * d..(k + 1) * d];
            for (o, &g) in h.data_mut()[dst..dst + d].iter_mut().zip(src) {
                *o += g;
            }
        }
    }

    let views = cfg.prox_views;
    for (li, layer) in params.layers.iter().enumerate() {
        let first_ffn_layer = cfg.injection == GlobalInjection::FirstFfn && li == 0;
        let attend_all = !(first_ffn_layer && cfg.num_global > 0);
        let real = if attend_all { t } else { t - cfg.num_global };

        let q = matmul(&h, &layer.w_q)?;
        let k = matmul(&h, &layer.w_k)?;
        let v = matmul(&h, &layer.w_v)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut ctx = Array::zeros(&[t, d]);
        let mut plane = vec![0.0f64; t];
        for hd in 0..heads {
            let col = hd * dk;
            let b_h = &layer.prox_bias.data()[hd * views..(hd + 1) * views];
            for i in 0..t {
                let row_limit = if i < real { real } else { 0 }; // isolated global rows self-attend
                let qi = &q.data()[i * d + col..i * d + col + dk];
                for j in 0..t {
                    let kj = &k.data()[j * d + col..j * d + col + dk];
                    let mut s = 0.0;
                    for (a, b) in qi.iter().zip(kj) {
                        s += a * b;
                    }
                    s *= scale;
                    if pe_enabled {
                        let p = &phi.data()[(i * t + j) * views..(i * t + j + 1) * views];
                        for (pm, bm) in p.iter().zip(b_h) {
                            s += pm * bm;
                        }
                    }
                    plane[j] = s;
                }
                softmax_row_masked(&mut plane, |j| j < row_limit, Some(i));
                let ci = &mut ctx.data_mut()[i * d + col..i * d + col + dk];
                for (j, &w) in plane.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &v.data()[j * d + col..j * d + col + dk];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += w * vv;
                    }
                }
            }
        }
        let o = matmul(&ctx, &layer.w_o)?;
        let mut res = h;
        res.add_assign(&o);
        let (hn, _, _) = layernorm_rows(
            res.data(),
            d,
            layer.ln1_gamma.data(),
            layer.ln1_beta.data(),
            cfg.ln_eps,
        );
        let mut hhat = Array::new(vec![t, d], hn)?;
        if first_ffn_layer && cfg.num_global > 0 {
            for kg in 0..cfg.num_global {
                let dst = (t - cfg.num_global + kg) * d;
                let src = &params.globals.data()[kg * d..(kg + 1) * d];
                for (o, &g) in hhat.data_mut()[dst..dst + d].iter_mut().zip(src) {
                    *o += g;
                }
            }
        }
        let f1 = matmul(&hhat, &layer.w_ffn1)?.map(|v| if v > 0.0 { v } else { 0.0 });
        let f2 = matmul(&f1, &layer.w_ffn2)?;
        let mut res2 = hhat;
        res2.add_assign(&f2);
        let (hn, _, _) = layernorm_rows(
            res2.data(),
            d,
            layer.ln2_gamma.data(),
            layer.ln2_beta.data(),
            cfg.ln_eps,
        );
        h = Array::new(vec![t, d], hn)?;
    }

    let logits = matmul(&h, &params.classifier)?;
    let mut probs = logits;
    let c = cfg.classes;
    for row in probs.data_mut().chunks_exact_mut(c) {
        softmax_row_masked(row, |_| true, None);
    }
    Ok(probs)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"EGFC";
const CKPT_VERSION: u32 = 1;

/// Writes every named parameter with its shape; f64 little-endian payload,
/// bit-exact on reload.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let cfg = &params.cfg;
    let header = format!(
        "feat_dim={}\nhidden_dim={}\nheads={}\nlayers={}\nclasses={}\nnum_global={}\nprox_views={}\nffn_mult={}\ndropout={}\nln_eps={}\ninjection={}\n",
        cfg.feat_dim,
        cfg.hidden_dim,
        cfg.heads,
        cfg.layers,
        cfg.classes,
        cfg.num_global,
        cfg.prox_views,
        cfg.ffn_mult,
        cfg.dropout,
        cfg.ln_eps,
        cfg.injection,
    );
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    let slots = params.slots();
    let arrays = params.arrays();
    buf.extend_from_slice(&(slots.len() as u32).to_le_bytes());
    for ((name, _), arr) in slots.iter().zip(arrays) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(arr.ndim() as u8);
        for &dim in arr.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *at + n > bytes.len() {
            return Err(ModelError::Format("truncated checkpoint".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != CKPT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let header = std::str::from_utf8(take(&mut at, hlen)?)
        .map_err(|e| ModelError::Format(e.to_string()))?
        .to_string();
    let field = |key: &str| -> Result<String, ModelError> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .map(str::to_string)
            .ok_or_else(|| ModelError::Format(format!("missing header field {key}")))
    };
    let parse_usize =
        |s: String| s.parse::<usize>().map_err(|e| ModelError::Format(e.to_string()));
    let parse_f64 = |s: String| s.parse::<f64>().map_err(|e| ModelError::Format(e.to_string()));
    let cfg = ModelConfig {
        feat_dim: parse_usize(field("feat_dim")?)?,
        hidden_dim: parse_usize(field("hidden_dim")?)?,
        heads: parse_usize(field("heads")?)?,
        layers: parse_usize(field("layers")?)?,
        classes: parse_usize(field("classes")?)?,
        num_global: parse_usize(field("num_global")?)?,
        prox_views: parse_usize(field("prox_views")?)?,
        ffn_mult: parse_usize(field("ffn_mult")?)?,
        dropout: parse_f64(field("dropout")?)?,
        ln_eps: parse_f64(field("ln_eps")?)?,
        injection: field("injection")?.parse().map_err(ModelError::Format)?,
    };

    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut loaded: Vec<(String, Array)> = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut at, nlen)?)
            .map_err(|e| ModelError::Format(e.to_string()))?
            .to_string();
        let ndim = take(&mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut at, len * 8)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        loaded.push((name, Array::new(shape, data).map_err(|e| ModelError::Format(e.to_string()))?));
    }

    let mut params = ModelParams::init(cfg, 0)?;
    let expected = params.slots();
    if loaded.len() != expected.len() {
        return Err(ModelError::Format(format!(
            "expected {} parameters, checkpoint has {}",
            expected.len(),
            loaded.len()
        )));
    }
    for (slot_idx, dst) in params.arrays_mut().into_iter().enumerate() {
        let (name, arr) = &loaded[slot_idx];
        if *name != expected[slot_idx].0 {
            return Err(ModelError::Format(format!(
                "parameter {slot_idx} is {name:?}, expected {:?}",
                expected[slot_idx].0
            )));
        }
        if arr.shape() != dst.shape() {
            return Err(ModelError::Format(format!(
                "{name}: shape {:?} does not match model {:?}",
                arr.shape(),
                dst.shape()
            )));
        }
        *dst = arr.clone();
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, AdjPowers, NormKind, SplitSpec, DEFAULT_M_MAX};
    use crate::node2seq::{build_batch, sample_ego_graph, EgoGraph, SampleKey, SamplerConfig};

    fn toy_graph() -> Graph {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)];
        Graph::from_parts(
            &edges,
            (0..5 * 4).map(|i| (i as f64) * 0.1 - 0.8).collect(),
            4,
            vec![0, 1, 0, 1, 0],
            SplitSpec::stratified([1.0, 0.0, 0.0], 3),
        )
        .unwrap()
    }

    fn toy_setup(n_g: usize, views: usize) -> (Graph, AdjPowers, SamplerConfig) {
        let g = toy_graph();
        let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
        let cfg = SamplerConfig {
            depth: 2,
            fanouts: vec![3, 2],
            samples_per_node: 2,
            num_global: n_g,
            prox_views: views,
            master_seed: 9,
        };
        (g, powers, cfg)
    }

    fn small_model(g: &Graph, n_g: usize, views: usize, seed: u64) -> ModelParams {
        let mut cfg = ModelConfig::new(g.feat_dim(), g.num_classes());
        cfg.hidden_dim = 16;
        cfg.heads = 2;
        cfg.layers = 2;
        cfg.num_global = n_g;
        cfg.prox_views = views;
        ModelParams::init(cfg, seed).unwrap()
    }

    fn batch_of(g: &Graph, powers: &AdjPowers, cfg: &SamplerConfig, centers: &[u32]) -> EgoBatch {
        let egos: Vec<EgoGraph> = centers
            .iter()
            .map(|&c| sample_ego_graph(g, c, cfg, SampleKey { epoch: 0, sample_idx: 0 }))
            .collect();
        build_batch(&egos, g, powers, cfg).unwrap()
    }

    #[test]
    fn embedding_rows_follow_token_kind() {
        let (g, powers, scfg) = toy_setup(2, 3);
        let params = small_model(&g, 2, 3, 1);
        let batch = batch_of(&g, &powers, &scfg, &[0, 3]);
        let inp = BatchInputs::from_batch(&batch, &g, 2).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let out = forward_tape(&mut tape, &pv, &params.cfg, &inp, None, true).unwrap();

        let d = params.cfg.hidden_dim;
        let h0 = tape.value(out.h0);
        for i in 0..batch.instances {
            for t in 0..batch.tokens {
                let row = &h0.data()[(i * batch.tokens + t) * d..(i * batch.tokens + t + 1) * d];
                match batch.slot(i, t) {
                    Token::Global(k) => {
                        let c_row = &params.globals.data()[k as usize * d..(k as usize + 1) * d];
                        assert_eq!(row, c_row, "global slot should carry its embedding");
                    }
                    Token::Pad => {
                        assert!(row.iter().all(|&v| v == 0.0), "PAD row must stay zero");
                    }
                    Token::Node(_) => {}
                }
            }
        }
    }

    #[test]
    fn classify_uniform_for_zero_classifier() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let mut params = small_model(&g, 1, 3, 2);
        params.classifier = Array::zeros(params.classifier.shape());
        let batch = batch_of(&g, &powers, &scfg, &[0, 1, 2]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let probs = predict_batch(&params, &inp, true).unwrap();
        let c = params.cfg.classes as f64;
        for &p in probs.data() {
            assert!((p - 1.0 / c).abs() < 1e-12);
        }
    }

    #[test]
    fn prob_rows_sum_to_one() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let params = small_model(&g, 1, 3, 5);
        let batch = batch_of(&g, &powers, &scfg, &[0, 1, 2, 3, 4]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let probs = predict_batch(&params, &inp, true).unwrap();
        for row in probs.data().chunks_exact(params.cfg.classes) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_bias_matches_vanilla_transformer() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let mut params = small_model(&g, 1, 3, 7);
        params.zero_prox_bias();
        let batch = batch_of(&g, &powers, &scfg, &[0, 2, 4]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let with_pe = predict_batch(&params, &inp, true).unwrap();
        let vanilla = predict_batch(&params, &inp, false).unwrap();
        for (a, b) in with_pe.data().iter().zip(vanilla.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attends_itself() {
        let g = Graph::from_parts(
            &[],
            vec![0.25; 4],
            4,
            vec![0],
            SplitSpec::stratified([1.0, 0.0, 0.0], 1),
        )
        .unwrap();
        let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
        let scfg = SamplerConfig {
            depth: 0,
            fanouts: vec![],
            samples_per_node: 1,
            num_global: 0,
            prox_views: 2,
            master_seed: 0,
        };
        let mut params = small_model(&g, 0, 2, 3);
        params.cfg.classes = 1;
        params.classifier = Array::zeros(&[16, 1]);
        let batch = batch_of(&g, &powers, &scfg, &[0]);
        let inp = BatchInputs::from_batch(&batch, &g, 0).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let out = forward_tape(&mut tape, &pv, &params.cfg, &inp, None, true).unwrap();
        for attn in &out.attn {
            assert_eq!(tape.value(*attn).data(), &[1.0, 1.0]); // both heads
        }
    }

    #[test]
    fn attention_rows_sum_to_one_every_layer_and_head() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let params = small_model(&g, 1, 3, 11);
        let batch = batch_of(&g, &powers, &scfg, &[0, 1, 2, 3]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let out = forward_tape(&mut tape, &pv, &params.cfg, &inp, None, true).unwrap();
        let n = batch.tokens;
        for attn in &out.attn {
            for row in tape.value(*attn).data().chunks_exact(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hand_built_bias_drives_softmax() {
        // two tokens, zero features => QK term is zero; phi^T b = ln 3 on the
        // (0, 1) pair only => row 0 attention is [0.25, 0.75]
        let g = Graph::from_parts(
            &[(0, 1)],
            vec![0.0; 8],
            4,
            vec![0, 0],
            SplitSpec::stratified([1.0, 0.0, 0.0], 1),
        )
        .unwrap();
        let mut params = small_model(&g, 0, 2, 13);
        params.cfg.layers = 1;
        params.layers.truncate(1);
        for l in &mut params.layers {
            l.prox_bias = Array::new(vec![2, 2], vec![3.0f64.ln(), 0.0, 3.0f64.ln(), 0.0]).unwrap();
        }
        let inp = BatchInputs {
            instances: 1,
            tokens: 2,
            x: Array::zeros(&[2, 4]),
            indicator: Array::zeros(&[2, 1]),
            phi: Array::new(vec![4, 2], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
            mask: Arc::new(AttnMask::new(1, 2, vec![true; 4])),
            labels: Arc::new(vec![0]),
            groups: vec![0],
            real_lens: vec![2],
            num_global: 0,
        };
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let out = forward_tape(&mut tape, &pv, &params.cfg, &inp, None, true).unwrap();
        let attn = tape.value(out.attn[0]).data();
        for head in 0..2 {
            let row0 = &attn[head * 4..head * 4 + 2];
            assert!((row0[0] - 0.25).abs() < 1e-12 && (row0[1] - 0.75).abs() < 1e-12, "{row0:?}");
        }
    }

    #[test]
    fn zeroed_sublayers_reduce_to_double_layernorm() {
        let (g, powers, scfg) = toy_setup(0, 3);
        let mut params = small_model(&g, 0, 3, 17);
        params.cfg.layers = 1;
        params.layers.truncate(1);
        params.layers[0].w_o = Array::zeros(&[16, 16]);
        params.layers[0].w_ffn2 = Array::zeros(&[64, 16]);
        let batch = batch_of(&g, &powers, &scfg, &[1]);
        let inp = BatchInputs::from_batch(&batch, &g, 0).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let out = forward_tape(&mut tape, &pv, &params.cfg, &inp, None, true).unwrap();

        let h0 = tape.value(out.h0).data();
        let (once, _, _) = layernorm_rows(h0, 16, &vec![1.0; 16], &vec![0.0; 16], 1e-5);
        let (twice, _, _) = layernorm_rows(&once, 16, &vec![1.0; 16], &vec![0.0; 16], 1e-5);
        for (a, b) in tape.value(out.h_layers[0]).data().iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_prox_bias_and_context_tokens() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let params = small_model(&g, 1, 3, 19);
        let batch = batch_of(&g, &powers, &scfg, &[0, 1]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let out = forward_tape(&mut tape, &pv, &params.cfg, &inp, None, true).unwrap();
        let ce = tape.cross_entropy_from_logits(out.logits, inp.labels.clone()).unwrap();
        let loss = tape.mean_all(ce).unwrap();
        // retain intermediates: the probe below reads the h0 adjoint
        let g_all = tape.backward_retaining_all(loss).unwrap();

        let gb = g_all.get(pv.layers[0].prox_bias).expect("bias gradient");
        assert!(gb.data().iter().any(|&v| v != 0.0), "prox bias grad all zero");

        // information flows context -> center: embedded non-center rows get grads
        let gh0 = g_all.get(out.h0).expect("h0 gradient");
        let d = params.cfg.hidden_dim;
        let non_center_nonzero = (1..batch.tokens)
            .any(|t| gh0.data()[t * d..(t + 1) * d].iter().any(|&v| v != 0.0));
        assert!(non_center_nonzero, "no gradient reached context tokens");

        let gc = g_all.get(pv.globals).expect("globals gradient");
        assert!(gc.data().iter().any(|&v| v != 0.0), "global embedding grad all zero");
    }

    #[test]
    fn readout_is_permutation_equivariant() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let params = small_model(&g, 1, 3, 23);
        let ego = sample_ego_graph(&g, 1, &scfg, SampleKey { epoch: 0, sample_idx: 0 });
        assert!(ego.len() >= 3, "need context tokens to permute");
        let mut permuted = ego.clone();
        permuted.members[1..].reverse();
        permuted.hops[1..].reverse();

        let run = |e: &EgoGraph| -> Vec<f64> {
            let batch = build_batch(std::slice::from_ref(e), &g, &powers, &scfg).unwrap();
            let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
            predict_batch(&params, &inp, true).unwrap().into_data()
        };
        let a = run(&ego);
        let b = run(&permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn padding_does_not_change_predictions() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let params = small_model(&g, 1, 3, 29);
        let small = EgoGraph { center: 0, members: vec![0, 1], hops: vec![0, 1] };
        let big = crate::node2seq::full_ego_graph(&g, 1, 2);
        assert!(big.len() > small.len());

        let alone = build_batch(std::slice::from_ref(&small), &g, &powers, &scfg).unwrap();
        let padded = build_batch(&[small.clone(), big], &g, &powers, &scfg).unwrap();
        let p_alone = predict_batch(&params, &BatchInputs::from_batch(&alone, &g, 1).unwrap(), true)
            .unwrap();
        let p_padded =
            predict_batch(&params, &BatchInputs::from_batch(&padded, &g, 1).unwrap(), true)
                .unwrap();
        let c = params.cfg.classes;
        for j in 0..c {
            assert!(
                (p_alone.data()[j] - p_padded.data()[j]).abs() < 1e-12,
                "padding leaked into instance 0"
            );
        }
    }

    #[test]
    fn readout_without_layers_is_projected_center() {
        let (g, powers, scfg) = toy_setup(0, 3);
        let mut params = small_model(&g, 0, 3, 31);
        params.cfg.layers = 0;
        params.layers.clear();
        let batch = batch_of(&g, &powers, &scfg, &[2]);
        let inp = BatchInputs::from_batch(&batch, &g, 0).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        let out = forward_tape(&mut tape, &pv, &params.cfg, &inp, None, true).unwrap();
        // logits = (x_center W_in) @ classifier
        let xw = matmul(
            &Array::new(vec![1, 4], g.feature_row(2).to_vec()).unwrap(),
            &params.w_in,
        )
        .unwrap();
        let want = matmul(&xw, &params.classifier).unwrap();
        for (a, b) in tape.value(out.logits).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_eval_matches_tape_forward() {
        let (g, powers, mut scfg) = toy_setup(1, 3);
        scfg.fanouts = vec![4, 4];
        let params = small_model(&g, 1, 3, 37);
        let ego = crate::node2seq::full_ego_graph(&g, 0, 2);
        let batch = build_batch(std::slice::from_ref(&ego), &g, &powers, &scfg).unwrap();
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let tape_probs = predict_batch(&params, &inp, true).unwrap();

        // same single instance through the streaming path
        let t = batch.tokens;
        let mut x = Array::zeros(&[t, g.feat_dim()]);
        for (i, &m) in ego.members.iter().enumerate() {
            x.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(g.feature_row(m));
        }
        let phi = Array::new(vec![t * t, 3], batch.phi.clone()).unwrap();
        let stream_probs = forward_sequence_eval(&params, &x, &phi, true).unwrap();
        for j in 0..params.cfg.classes {
            assert_eq!(
                tape_probs.data()[j],
                stream_probs.data()[j],
                "paths disagree at class {j}"
            );
        }
    }

    #[test]
    fn first_ffn_injection_changes_layer_zero_only() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let mut params = small_model(&g, 1, 3, 41);
        params.cfg.injection = GlobalInjection::FirstFfn;
        let batch = batch_of(&g, &powers, &scfg, &[0, 3]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let probs = predict_batch(&params, &inp, true).unwrap();
        for row in probs.data().chunks_exact(params.cfg.classes) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // the two injection modes genuinely differ
        params.cfg.injection = GlobalInjection::Input;
        let probs2 = predict_batch(&params, &inp, true).unwrap();
        assert!(probs.data().iter().zip(probs2.data()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn dropout_training_is_seeded_and_eval_is_clean() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let params = small_model(&g, 1, 3, 43);
        let batch = batch_of(&g, &powers, &scfg, &[0, 1]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        let run = |seed: u64| {
            let mut rng = rng::rng(seed, &[stream::DROPOUT]);
            let mut tape = Tape::new();
            let pv = ParamVars::bind(&mut tape, &params);
            let out =
                forward_tape(&mut tape, &pv, &params.cfg, &inp, Some(&mut rng), true).unwrap();
            tape.value(out.probs).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::TempDir::new().unwrap();
        let g = toy_graph();
        let params = small_model(&g, 2, 4, 47);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params.cfg, loaded.cfg);
        for (a, b) in params.arrays().iter().zip(loaded.arrays()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn feature_width_mismatch_rejected() {
        let (g, powers, scfg) = toy_setup(1, 3);
        let mut params = small_model(&g, 1, 3, 53);
        params.cfg.feat_dim = 9;
        let batch = batch_of(&g, &powers, &scfg, &[0]);
        let inp = BatchInputs::from_batch(&batch, &g, 1).unwrap();
        assert!(matches!(
            predict_batch(&params, &inp, true),
            Err(ModelError::FeatureWidth { expected: 9, got: 4 })
        ));
    }

    #[test]
    fn slots_align_with_arrays_and_vars() {
        let g = toy_graph();
        let params = small_model(&g, 1, 3, 59);
        let slots = params.slots();
        assert_eq!(slots.len(), params.arrays().len());
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &params);
        assert_eq!(pv.ordered().len(), slots.len());
        for (var, arr) in pv.ordered().iter().zip(params.arrays()) {
            assert_eq!(tape.value(*var).shape(), arr.shape());
        }
        let n_params = params.param_count();
        assert_eq!(n_params, params.arrays().iter().map(|a| a.len()).sum::<usize>());
    }
}
