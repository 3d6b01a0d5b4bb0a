//! Learned feature selection: the straight-through binarized mask and the
//! trainable-balance elastic-net regularizer.
//!
//! Each DNNF owns a fixed stochastic mask `m_s` and a trainable vector `m_t`
//! that passes through the threshold `T(x) = ½Φ(|x| − ε) + ½`, where Φ is
//! the sign/tanh straight-through estimator. The effective feature mask is
//! `T(m_t) ⊙ m_s`.

use crate::autodiff::{ParamTensor, Tape, Var};
use crate::dnnf::sample_stochastic_mask;
use crate::error::Result;
use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Per-DNNF mask state: fixed stochastic selection plus trainable selection.
#[derive(Clone, Debug)]
pub struct MaskPair<S> {
    /// Fixed 0/1 selection, sampled once at model construction.
    pub m_s: Vec<u8>,
    /// Trainable mask, binarized through `T` on every forward pass.
    pub m_t: ParamTensor<S>,
    /// Threshold ε of `T`; 1 in all experiments.
    pub epsilon: S,
    /// Trainable balance between the two regularizer terms.
    pub alpha: ParamTensor<S>,
    /// Cardinality hyperparameter of the regularizer.
    pub beta: S,
    /// Keep-probability `m_s` was sampled with.
    pub p: f64,
}

impl<S: Scalar> MaskPair<S> {
    /// Samples `m_s` (resampling an all-zero draw) and initializes `m_t`
    /// uniformly in `[ε + 0.2, ε + 0.7]` so every feature starts selected.
    /// α starts at 0, an equal blend.
    pub fn init(
        d: usize,
        p: f64,
        beta: f64,
        name_prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m_s = sample_stochastic_mask(d, p, rng)?;
        let epsilon = 1.0;
        let m_t: Vec<S> = (0..d)
            .map(|_| S::of(rng.gen_range(epsilon + 0.2..epsilon + 0.7)))
            .collect();
        Ok(MaskPair {
            m_s,
            m_t: ParamTensor::new(format!("{name_prefix}.m_t"), vec![d], m_t),
            epsilon: S::of(epsilon),
            alpha: ParamTensor::scalar(format!("{name_prefix}.alpha"), S::zero()),
            beta: S::of(beta),
            p,
        })
    }

    /// An all-ones `m_s` (used by the synthetic feature-selection analysis,
    /// where only the trainable mask is active).
    pub fn init_full(d: usize, beta: f64, name_prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut mp = Self::init(d, 1.0, beta, name_prefix, rng).expect("p=1 is valid");
        mp.m_s = vec![1; d];
        mp
    }

    pub fn m_s_ones(&self) -> S {
        S::of(self.m_s.iter().map(|&b| f64::from(b)).sum())
    }

    fn m_s_const(&self, tape: &mut Tape<S>) -> Var {
        tape.constant(
            vec![self.m_s.len()],
            self.m_s.iter().map(|&b| S::of(f64::from(b))).collect(),
        )
    }
}

/// Φ: exact sign forward (sign(0) = 0), tanh-proxy derivative backward.
pub fn straight_through_sign<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    tape.custom_grad(
        x,
        |v| {
            if v > S::zero() {
                S::one()
            } else if v < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        },
        |v| {
            let t = v.tanh();
            S::one() - t * t
        },
    )
}

/// `T(x) = ½Φ(|x| − ε) + ½`, applied elementwise. Forward output is exactly
/// 1 where `|x| > ε` and 0 otherwise (the measure-zero `|x| = ε` case, where
/// Φ's sign(0)=0 convention would give ½, is clamped to 0). The backward
/// local gradient is the chained tanh proxy, `½ sech²(|x| − ε) · sign(x)`.
pub fn binary_threshold<S: Scalar>(tape: &mut Tape<S>, m_t: Var, epsilon: S) -> Var {
    let half = S::of(0.5);
    tape.custom_grad(
        m_t,
        move |v| {
            if v.abs() > epsilon {
                S::one()
            } else {
                S::zero()
            }
        },
        move |v| {
            let sign = if v > S::zero() {
                S::one()
            } else if v < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            let t = (v.abs() - epsilon).tanh();
            half * (S::one() - t * t) * sign
        },
    )
}

/// The effective mask `T(m_t) ⊙ m_s` applied inside the literal layer.
pub fn effective_mask<S: Scalar>(tape: &mut Tape<S>, mask: &MaskPair<S>, m_t_var: Var) -> Result<Var> {
    let thresholded = binary_threshold(tape, m_t_var, mask.epsilon);
    let ms = mask.m_s_const(tape);
    tape.mul(thresholded, ms)
}

/// Reads the trained effective mask without a gradient pass.
pub fn effective_mask_values<S: Scalar>(mask: &MaskPair<S>) -> Vec<u8> {
    mask.m_t
        .data
        .iter()
        .zip(&mask.m_s)
        .map(|(&t, &s)| u8::from(t.abs() > mask.epsilon && s == 1))
        .collect()
}

/// The modified elastic-net regularizer
/// `R = (1 − σ(α))/2 · R₂ + σ(α) · R₁` over `m_ts = m_t ⊙ m_s`, with
/// `R₂ = | ‖m_ts‖₂²/‖m_s‖₁ − βε² |` and `R₁ = | ‖m_ts‖₁/‖m_s‖₁ − βε |`.
/// Differentiable w.r.t. `m_t` and α.
pub fn regularizer<S: Scalar>(
    tape: &mut Tape<S>,
    mask: &MaskPair<S>,
    m_t_var: Var,
    alpha_var: Var,
) -> Result<Var> {
    let ms = mask.m_s_const(tape);
    let mts = tape.mul(m_t_var, ms)?;
    let inv_card = S::one() / mask.m_s_ones();
    let eps = mask.epsilon;
    let beta = mask.beta;

    let sq = tape.mul(mts, mts)?;
    let sq_sum = tape.sum_all(sq);
    let sq_norm = tape.mul_const(sq_sum, inv_card);
    let r2_inner = tape.add_const(sq_norm, -(beta * eps * eps));
    let r2 = tape.abs(r2_inner);

    let absv = tape.abs(mts);
    let l1_sum = tape.sum_all(absv);
    let l1_norm = tape.mul_const(l1_sum, inv_card);
    let r1_inner = tape.add_const(l1_norm, -(beta * eps));
    let r1 = tape.abs(r1_inner);

    let sig_a = tape.sigmoid(alpha_var);
    // (1 - σ(α))/2
    let w2 = {
        let neg_half = tape.mul_const(sig_a, S::of(-0.5));
        tape.add_const(neg_half, S::of(0.5))
    };
    let term2 = tape.mul(w2, r2)?;
    let term1 = tape.mul(sig_a, r1)?;
    tape.add(term2, term1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pair(m_t: Vec<f64>, m_s: Vec<u8>, beta: f64, alpha: f64) -> MaskPair<f64> {
        let d = m_t.len();
        MaskPair {
            m_s,
            m_t: ParamTensor::new("m_t", vec![d], m_t),
            epsilon: 1.0,
            alpha: ParamTensor::scalar("alpha", alpha),
            beta,
            p: 1.0,
        }
    }

    fn eval_reg(mask: &MaskPair<f64>) -> f64 {
        let mut t = Tape::<f64>::new();
        let mt = t.param(&mask.m_t);
        let a = t.param(&mask.alpha);
        let r = regularizer(&mut t, mask, mt, a).unwrap();
        t.value(r)[0]
    }

    #[test]
    fn straight_through_forward_and_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![2], vec![2.0, -0.1], true);
        let y = straight_through_sign(&mut t, x);
        assert_eq!(t.value(y), &[1.0, -1.0]);
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - (1.0 - 2.0f64.tanh().powi(2))).abs() < 1e-15);
        assert!((g[1] - (1.0 - 0.1f64.tanh().powi(2))).abs() < 1e-15);
    }

    #[test]
    fn straight_through_chain_rule_on_vector() {
        // loss = mean(Φ(x) ⊙ c); hand chain: d/dx_i = c_i (1 − tanh²(x_i)) / 6
        let xs = [0.5, -0.5, 1.5, -2.0, 0.0, 3.0];
        let cs = [1.0, 2.0, -1.0, 0.5, 4.0, -2.0];
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![6], xs.to_vec(), true);
        let y = straight_through_sign(&mut t, x);
        let c = t.constant(vec![6], cs.to_vec());
        let prod = t.mul(y, c).unwrap();
        let loss = t.mean_all(prod);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        for i in 0..6 {
            let expect = cs[i] * (1.0 - xs[i].tanh().powi(2)) / 6.0;
            assert!((g[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_threshold_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![4], vec![1.5, 0.5, -2.3, 1.0]);
        let y = binary_threshold(&mut t, x, 1.0);
        assert_eq!(t.value(y), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn threshold_forward_is_exact_step_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![xs.len()], xs.clone());
        let y = binary_threshold(&mut t, x, 1.0);
        for (v, &xi) in t.value(y).iter().zip(&xs) {
            let expect: f64 = if xi.abs() > 1.0 { 1.0 } else { 0.0 };
            assert_eq!(v.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn regularizer_balance_point_is_zero() {
        for alpha in [-5.0, -1.0, 0.0, 2.0, 7.5] {
            let mask = pair(vec![1.0; 8], vec![1; 8], 1.0, alpha);
            assert_eq!(eval_reg(&mask), 0.0);
        }
    }

    #[test]
    fn regularizer_at_zero_mask() {
        // m_t = 0, m_s = 1, β = 1, ε = 1 → R₁ = R₂ = 1, R = (1−σ(α))/2 + σ(α)
        for alpha in [-2.0, 0.0, 3.0] {
            let mask = pair(vec![0.0; 5], vec![1; 5], 1.0, alpha);
            let sig = 1.0 / (1.0 + (-alpha).exp());
            let expect = (1.0 - sig) / 2.0 + sig;
            assert!((eval_reg(&mask) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_sigmoid_limits() {
        let mask_lo = pair(vec![0.0; 5], vec![1; 5], 1.0, -40.0);
        let mask_hi = pair(vec![0.0; 5], vec![1; 5], 1.0, 40.0);
        // R₂ = R₁ = 1 here, so limits are R₂/2 and R₁
        assert!((eval_reg(&mask_lo) - 0.5).abs() < 1e-12);
        assert!((eval_reg(&mask_hi) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_nonnegative_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let d = rng.gen_range(1..12);
            let m_t: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut m_s: Vec<u8> = (0..d).map(|_| u8::from(rng.gen::<f64>() < 0.6)).collect();
            if m_s.iter().all(|&b| b == 0) {
                m_s[0] = 1;
            }
            let beta = rng.gen_range(0.05..2.0);
            let alpha = rng.gen_range(-4.0..4.0);
            assert!(eval_reg(&pair(m_t, m_s, beta, alpha)) >= 0.0);
        }
    }

    #[test]
    fn effective_mask_respects_stochastic_support() {
        let mask = pair(vec![2.0, 2.0, 0.1, -3.0], vec![1, 0, 1, 1], 1.0, 0.0);
        let mut t = Tape::<f64>::new();
        let mt = t.param(&mask.m_t);
        let eff = effective_mask(&mut t, &mask, mt).unwrap();
        assert_eq!(t.value(eff), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(effective_mask_values(&mask), vec![1, 0, 0, 1]);
    }

    #[test]
    fn fresh_initialization_selects_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mask = MaskPair::<f64>::init(20, 0.5, 1.0, "m", &mut rng).unwrap();
        let eff = effective_mask_values(&mask);
        assert_eq!(eff, mask.m_s, "all |m_t| start above ε, so T(m_t) ⊙ m_s = m_s");
    }

    #[test]
    fn gradient_zero_outside_stochastic_support() {
        let mask = pair(vec![1.5, 1.5, 1.5], vec![1, 0, 1], 1.0, 0.0);
        let mut t = Tape::<f64>::new();
        let mt = t.param(&mask.m_t);
        let a = t.param(&mask.alpha);
        let x = t.constant(vec![1, 3], vec![0.7, 0.9, -0.4]);
        let eff = effective_mask(&mut t, &mask, mt).unwrap();
        let masked = t.row_mul(x, eff).unwrap();
        let s = t.sum_all(masked);
        let reg = regularizer(&mut t, &mask, mt, a).unwrap();
        let loss = t.add(s, reg).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(mt).unwrap();
        assert_ne!(g[0], 0.0);
        assert_eq!(g[1], 0.0, "m_s = 0 kills the gradient path");
        assert_ne!(g[2], 0.0);
    }
}
