//! Soft OR/AND gates, the literal layer, and the DNNF block.
//!
//! A DNNF is a tanh literal layer followed by fixed projected soft-AND
//! gates (one per conjunction) and a single soft-OR gate. Only the literal
//! layer is trainable; conjunction membership is fixed at construction.

use crate::autodiff::{ParamTensor, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Static shape of one DNNF block.
#[derive(Clone, Debug, PartialEq)]
pub struct DnnfSpec {
    /// Number of conjunctions.
    pub k: usize,
    /// Literal count per conjunction; the literal blocks partition `1..=m`.
    pub conj_lengths: Vec<usize>,
    /// Total literal count, `sum(conj_lengths)`.
    pub m: usize,
    /// Keep-probability of this block's stochastic feature mask.
    pub p: f64,
}

impl DnnfSpec {
    pub fn new(k: usize, p: f64) -> Self {
        let conj_lengths = conjunction_lengths(k);
        let m = conj_lengths.iter().sum();
        DnnfSpec {
            k,
            conj_lengths,
            m,
            p,
        }
    }
}

/// Conjunction lengths for `k` conjunctions: the group is split by thirds
/// into lengths 2, 4 and 6. With `k = 3q + r`, the `r` extra conjunctions
/// take the smallest lengths first. `k < 3` falls back to all-2s.
pub fn conjunction_lengths(k: usize) -> Vec<usize> {
    if k < 3 {
        return vec![2; k];
    }
    let q = k / 3;
    let r = k % 3;
    let counts = [q + usize::from(r >= 1), q + usize::from(r >= 2), q];
    let mut lengths = Vec::with_capacity(k);
    for (len, &count) in [2usize, 4, 6].iter().zip(&counts) {
        lengths.extend(std::iter::repeat_n(*len, count));
    }
    lengths
}

/// Conjunction-membership indicators as an `[m, k]` 0/1 matrix; column `i`
/// marks the literals of conjunction `i`. Literal indices are assigned in
/// contiguous disjoint blocks.
pub fn build_conj_masks<S: Scalar>(lengths: &[usize]) -> Vec<S> {
    let k = lengths.len();
    let m: usize = lengths.iter().sum();
    let mut masks = vec![S::zero(); m * k];
    let mut start = 0;
    for (i, &len) in lengths.iter().enumerate() {
        for j in start..start + len {
            masks[j * k + i] = S::one();
        }
        start += len;
    }
    masks
}

/// Trainable parameters of one DNNF plus its fixed conjunction indicators.
#[derive(Clone, Debug)]
pub struct DnnfParams<S> {
    pub w: ParamTensor<S>,
    pub b: ParamTensor<S>,
    /// Fixed `[m, k]` 0/1 indicator matrix; not trainable.
    pub conj_masks: Vec<S>,
}

impl<S: Scalar> DnnfParams<S> {
    /// Fan-in uniform init for `W` (bound `sqrt(6/(d+m))`), zero bias.
    pub fn init(spec: &DnnfSpec, d: usize, name_prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let m = spec.m;
        let bound = (6.0 / (d + m) as f64).sqrt();
        let w: Vec<S> = (0..d * m)
            .map(|_| S::of(rng.gen_range(-bound..bound)))
            .collect();
        DnnfParams {
            w: ParamTensor::new(format!("{name_prefix}.w"), vec![d, m], w),
            b: ParamTensor::new(format!("{name_prefix}.b"), vec![m], vec![S::zero(); m]),
            conj_masks: build_conj_masks(&spec.conj_lengths),
        }
    }
}

/// `OR(x) = tanh(sum(x) + d - 1.5)` over a `[d]` vector.
pub fn soft_or<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let d = tape.numel(x);
    let s = tape.sum_all(x);
    let shifted = tape.add_const(s, S::of(d as f64 - 1.5));
    tape.tanh(shifted)
}

/// `AND_u(x) = tanh(u'x - ||u||_1 + 1.5)` with a fixed 0/1 projection `u`.
pub fn soft_and_projected<S: Scalar>(tape: &mut Tape<S>, x: Var, u: &[u8]) -> Result<Var> {
    if tape.numel(x) != u.len() {
        return Err(Error::dimension("soft_and_projected", tape.shape(x), &[u.len()]));
    }
    let ones: usize = u.iter().map(|&b| usize::from(b)).sum();
    if ones == 0 {
        return Err(Error::contract("empty conjunction: all-zero projection"));
    }
    let uv = tape.constant(
        vec![u.len()],
        u.iter().map(|&b| S::of(f64::from(b))).collect(),
    );
    let masked = tape.mul(x, uv)?;
    let s = tape.sum_all(masked);
    let shifted = tape.add_const(s, S::of(1.5 - ones as f64));
    Ok(tape.tanh(shifted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Or,
    And,
}

/// Exact binary gate over ±1 inputs: sign activation with bias 1.
pub fn hard_gate(kind: GateKind, x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::contract("hard gate over empty input"));
    }
    if let Some(&bad) = x.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::contract(format!("hard gate input {bad} is not ±1")));
    }
    let s: f64 = x.iter().sum();
    let d = x.len() as f64;
    let pre = match kind {
        GateKind::Or => s + d - 1.0,
        GateKind::And => s - d + 1.0,
    };
    Ok(if pre >= 1.0 { 1.0 } else { -1.0 })
}

/// Literal layer `L = tanh(x diag(mask) W + b)` for a `[batch, d]` input.
/// `effective_mask` is `T(m_t) ⊙ m_s` supplied by the feature-selection
/// module (or an all-ones constant when selection is disabled).
pub fn literals<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &DnnfParams<S>,
    w_var: Var,
    b_var: Var,
    effective_mask: Var,
) -> Result<Var> {
    let _ = params;
    let masked = tape.row_mul(x, effective_mask)?;
    let affine = tape.matmul(masked, w_var)?;
    let shifted = tape.row_add(affine, b_var)?;
    Ok(tape.tanh(shifted))
}

/// Full DNNF block over a batch: literals → k projected soft-ANDs → soft OR.
/// Returns a `[batch]` vector of per-sample outputs in (−1, 1).
pub fn dnnf_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    spec: &DnnfSpec,
    params: &DnnfParams<S>,
    effective_mask: Var,
) -> Result<Var> {
    let w_var = tape.param(&params.w);
    let b_var = tape.param(&params.b);
    dnnf_forward_with(tape, x, spec, params, w_var, b_var, effective_mask)
}

/// Same as [`dnnf_forward`] but with caller-registered parameter vars so the
/// model assembly can collect gradients.
pub fn dnnf_forward_with<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    spec: &DnnfSpec,
    params: &DnnfParams<S>,
    w_var: Var,
    b_var: Var,
    effective_mask: Var,
) -> Result<Var> {
    let lits = literals(tape, x, params, w_var, b_var, effective_mask)?;
    conjunctions_to_or(tape, lits, spec, &params.conj_masks)
}

/// Applies the fixed AND/OR gate layers to a `[batch, m]` literal matrix.
pub fn conjunctions_to_or<S: Scalar>(
    tape: &mut Tape<S>,
    lits: Var,
    spec: &DnnfSpec,
    conj_masks: &[S],
) -> Result<Var> {
    let k = spec.k;
    let m = spec.m;
    let masks = tape.constant(vec![m, k], conj_masks.to_vec());
    // u' L - ||u||_1 + 1.5 per conjunction, then tanh
    let proj = tape.matmul(lits, masks)?;
    let offsets: Vec<S> = spec
        .conj_lengths
        .iter()
        .map(|&len| S::of(1.5 - len as f64))
        .collect();
    let off = tape.constant(vec![k], offsets);
    let shifted = tape.row_add(proj, off)?;
    let ands = tape.tanh(shifted);
    // OR over the k conjunction outputs
    let s = tape.sum_rows(ands)?;
    let pre = tape.add_const(s, S::of(k as f64 - 1.5));
    Ok(tape.tanh(pre))
}

/// Stochastic 0/1 feature mask with keep-probability `p`, resampled until at
/// least one entry is set.
pub fn sample_stochastic_mask(d: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    if !(0.0 < p && p <= 1.0) {
        return Err(Error::contract(format!("mask probability {p} not in (0,1]")));
    }
    loop {
        let mask: Vec<u8> = (0..d)
            .map(|_| u8::from(rng.gen::<f64>() < p))
            .collect();
        if mask.contains(&1) {
            return Ok(mask);
        }
    }
}
