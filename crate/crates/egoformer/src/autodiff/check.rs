//! Finite-difference verification of tape gradients.

use rand::seq::SliceRandom;

use super::array::Array;
use super::tape::{Tape, Var};
use super::AdError;
use crate::rng;

/// Builds a scalar loss on a fresh tape from leaves created in the order of
/// `params`; must be deterministic (run dropout in eval mode, freeze inputs).
pub type LossFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var, AdError>;

/// Central-difference check of `f`'s gradients at `params`.
///
/// Samples up to `coords_per_param` coordinates of every parameter (seeded),
/// perturbs each by ±`eps`, and returns the worst relative error
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` seen. Rejects `f` if two
/// evaluations at the same point disagree (dropout or other nondeterminism).
pub fn gradient_check(
    f: LossFn,
    params: &[(&str, Array)],
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64, AdError> {
    let eval = |arrays: &[Array]| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        if !tape.value(loss).is_scalar() {
            return Err(AdError::NonScalarLoss(tape.shape(loss).to_vec()));
        }
        Ok(tape.value(loss).item())
    };

    let arrays: Vec<Array> = params.iter().map(|(_, a)| a.clone()).collect();
    let l0 = eval(&arrays)?;
    let l1 = eval(&arrays)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(AdError::NonDeterministic);
    }

    // analytic gradients
    let mut tape = Tape::new();
    let leaves: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let mut grads = tape.backward(loss)?;
    let ad: Vec<Array> =
        leaves.iter().zip(&arrays).map(|(&v, a)| grads.dense(v, a.shape())).collect();

    let mut worst = 0.0f64;
    let mut rng = rng::rng(seed, &[0x4744_4348]);
    for (pi, (name, _)) in params.iter().enumerate() {
        let n = arrays[pi].len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_param.min(n));
        for &c in &coords {
            let mut plus = arrays.clone();
            plus[pi].data_mut()[c] += eps;
            let mut minus = arrays.clone();
            minus[pi].data_mut()[c] -= eps;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let g = ad[pi].data()[c];
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
            debug_assert!(
                rel.is_finite(),
                "non-finite rel err for {name}[{c}]: ad={g} fd={fd}"
            );
        }
    }
    Ok(worst)
}
