//! Spatial localization: per-DNNF Gaussian proximity kernels and
//! temperature-scaled softmax gating over the DNNF ensemble.

use crate::autodiff::{ParamTensor, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Trainable localization state for `n` DNNFs over `d` features.
///
/// `sigma_diag` carries no positivity constraint: the kernel takes a norm of
/// the scaled difference, so the sign is absorbed.
#[derive(Clone, Debug)]
pub struct LocalizationParams<S> {
    /// Kernel centers, `[n, d]`.
    pub mu: ParamTensor<S>,
    /// Diagonals of the per-DNNF scale matrices, `[n, d]`.
    pub sigma_diag: ParamTensor<S>,
    /// σ(tau) is the softmax temperature.
    pub tau: ParamTensor<S>,
}

impl<S: Scalar> LocalizationParams<S> {
    /// μ from a 0.5-scaled standard normal (inputs are standardized),
    /// σ-diagonals all ones, τ = 0.
    pub fn init(n: usize, d: usize, name_prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let mu: Vec<S> = (0..n * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::of(0.5 * z)
            })
            .collect();
        LocalizationParams {
            mu: ParamTensor::new(format!("{name_prefix}.mu"), vec![n, d], mu),
            sigma_diag: ParamTensor::new(
                format!("{name_prefix}.sigma"),
                vec![n, d],
                vec![S::one(); n * d],
            ),
            tau: ParamTensor::scalar(format!("{name_prefix}.tau"), S::zero()),
        }
    }

    pub fn n(&self) -> usize {
        self.mu.shape[0]
    }
}

/// Gaussian proximity kernels: entry `(s, i)` is
/// `exp(−‖σᵢ ⊙ (x_s − μᵢ)‖₂)`, in (0, 1]. `x` is `[batch, d]`,
/// result `[batch, n]`. The norm is the plain L2 norm, not its square, with
/// subgradient 0 at the zero vector.
pub fn loc_kernel<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    mu_var: Var,
    sigma_var: Var,
    n: usize,
) -> Result<Var> {
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let mu_i = tape.row(mu_var, i)?;
        let sigma_i = tape.row(sigma_var, i)?;
        let diff = tape.row_sub(x, mu_i)?;
        let scaled = tape.row_mul(diff, sigma_i)?;
        let sq = tape.mul(scaled, scaled)?;
        let sum = tape.sum_rows(sq)?;
        let norm = tape.sqrt(sum);
        let neg = tape.neg(norm);
        cols.push(tape.exp(neg));
    }
    tape.concat_cols(&cols)
}

/// Row-wise softmax of `loc(x) · σ(τ)`; every row is a probability vector.
pub fn sm_loc<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &LocalizationParams<S>,
    mu_var: Var,
    sigma_var: Var,
    tau_var: Var,
) -> Result<Var> {
    let kernels = loc_kernel(tape, x, mu_var, sigma_var, params.n())?;
    let temp = tape.sigmoid(tau_var);
    let logits = tape.mul(kernels, temp)?;
    Ok(tape.softmax(logits))
}

/// `E(x) = gates ⊙ dnnf_outputs`, both `[batch, n]`.
pub fn gated_embedding<S: Scalar>(tape: &mut Tape<S>, dnnf_outputs: Var, gates: Var) -> Result<Var> {
    tape.mul(dnnf_outputs, gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::{max_rel_err, numeric_grad};
    use rand::Rng;
    use rand::SeedableRng;

    fn params_from(mu: Vec<f64>, sigma: Vec<f64>, n: usize, d: usize, tau: f64) -> LocalizationParams<f64> {
        LocalizationParams {
            mu: ParamTensor::new("mu", vec![n, d], mu),
            sigma_diag: ParamTensor::new("sigma", vec![n, d], sigma),
            tau: ParamTensor::scalar("tau", tau),
        }
    }

    fn kernels(x: Vec<f64>, batch: usize, p: &LocalizationParams<f64>) -> Vec<f64> {
        let mut t = Tape::<f64>::new();
        let d = p.mu.shape[1];
        let xv = t.constant(vec![batch, d], x);
        let mu = t.param(&p.mu);
        let sigma = t.param(&p.sigma_diag);
        let k = loc_kernel(&mut t, xv, mu, sigma, p.n()).unwrap();
        t.value(k).to_vec()
    }

    #[test]
    fn kernel_center_and_flat_cases() {
        let p = params_from(vec![0.3, -0.7], vec![1.0, 1.0], 1, 2, 0.0);
        let k = kernels(vec![0.3, -0.7], 1, &p);
        assert_eq!(k, vec![1.0], "x = μ gives e^0 = 1");

        let flat = params_from(vec![0.0, 0.0], vec![0.0, 0.0], 1, 2, 0.0);
        let k = kernels(vec![55.0, -3.0], 1, &flat);
        assert_eq!(k, vec![1.0], "zero scale row is a flat kernel");
    }

    #[test]
    fn kernel_hand_norm() {
        // d=2, σ=(1,1), μ=(0,0), x=(3,4) → e^{−5}
        let p = params_from(vec![0.0, 0.0], vec![1.0, 1.0], 1, 2, 0.0);
        let k = kernels(vec![3.0, 4.0], 1, &p);
        assert!((k[0] - (-5.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_translation_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..2.0)).collect();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shift = [0.8, -0.3, 1.1];

        let p = params_from(mu.clone(), sigma.clone(), 2, 3, 0.0);
        let base = kernels(x.clone(), 2, &p);

        let mu_shifted: Vec<f64> = mu
            .iter()
            .enumerate()
            .map(|(i, &v)| v + shift[i % 3])
            .collect();
        let x_shifted: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| v + shift[i % 3])
            .collect();
        let p2 = params_from(mu_shifted, sigma, 2, 3, 0.0);
        let shifted = kernels(x_shifted, 2, &p2);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn gating(x: Vec<f64>, batch: usize, p: &LocalizationParams<f64>) -> Vec<f64> {
        let mut t = Tape::<f64>::new();
        let d = p.mu.shape[1];
        let xv = t.constant(vec![batch, d], x);
        let mu = t.param(&p.mu);
        let sigma = t.param(&p.sigma_diag);
        let tau = t.param(&p.tau);
        let g = sm_loc(&mut t, xv, p, mu, sigma, tau).unwrap();
        t.value(g).to_vec()
    }

    #[test]
    fn gating_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = LocalizationParams::<f64>::init(4, 3, "loc", &mut rng);
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = gating(x, 5, &p);
        for row in g.chunks(4) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_singleton_and_symmetric_cases() {
        let p = params_from(vec![0.0, 0.0], vec![1.0, 1.0], 1, 2, 0.0);
        assert_eq!(gating(vec![1.0, 2.0], 1, &p), vec![1.0]);

        // identical kernels → uniform row
        let p = params_from(vec![0.0; 6], vec![1.0; 6], 3, 2, 0.0);
        let g = gating(vec![1.0, 2.0], 1, &p);
        for &v in &g {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_temperature_flattens_gating() {
        // τ → −∞: σ(τ) → 0 and the gating tends to uniform
        let p = params_from(
            vec![0.0, 0.0, 5.0, 5.0, -5.0, -5.0],
            vec![1.0; 6],
            3,
            2,
            -20.0,
        );
        let g = gating(vec![0.1, -0.2], 1, &p);
        for &v in &g {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_flow_to_all_localization_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 3;
        let d = 2;
        let p = LocalizationParams::<f64>::init(n, d, "loc", &mut rng);
        let x0: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let outs0: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-0.9..0.9)).collect();

        let eval = |mu: &[f64], sigma: &[f64], tau: f64| {
            let pp = params_from(mu.to_vec(), sigma.to_vec(), n, d, tau);
            let mut t = Tape::<f64>::new();
            let xv = t.constant(vec![2, d], x0.clone());
            let mu_v = t.param(&pp.mu);
            let sig_v = t.param(&pp.sigma_diag);
            let tau_v = t.param(&pp.tau);
            let g = sm_loc(&mut t, xv, &pp, mu_v, sig_v, tau_v).unwrap();
            let outs = t.constant(vec![2, n], outs0.clone());
            let e = gated_embedding(&mut t, outs, g).unwrap();
            let loss = t.sum_all(e);
            t.value(loss)[0]
        };

        let fd_mu = numeric_grad(
            |mu| eval(mu, &p.sigma_diag.data, p.tau.data[0]),
            &p.mu.data,
            1e-5,
        );
        let fd_sigma = numeric_grad(
            |s| eval(&p.mu.data, s, p.tau.data[0]),
            &p.sigma_diag.data,
            1e-5,
        );
        let fd_tau = numeric_grad(|t| eval(&p.mu.data, &p.sigma_diag.data, t[0]), &[0.0], 1e-5);

        let mut t = Tape::<f64>::new();
        let xv = t.constant(vec![2, d], x0.clone());
        let mu_v = t.param(&p.mu);
        let sig_v = t.param(&p.sigma_diag);
        let tau_v = t.param(&p.tau);
        let g = sm_loc(&mut t, xv, &p, mu_v, sig_v, tau_v).unwrap();
        let outs = t.constant(vec![2, n], outs0.clone());
        let e = gated_embedding(&mut t, outs, g).unwrap();
        let loss = t.sum_all(e);
        t.backward(loss).unwrap();

        assert!(max_rel_err(t.grad(mu_v).unwrap(), &fd_mu) < 1e-5);
        assert!(max_rel_err(t.grad(sig_v).unwrap(), &fd_sigma) < 1e-5);
        assert!(max_rel_err(t.grad(tau_v).unwrap(), &fd_tau) < 1e-5);
    }
}
