//! Closed-form Gaussian algebra of the diffusion process.
//!
//! Every function here works on one row at a time (a flat `&[f64]` of the
//! data dimensionality) and one timestep. Variances travel as log-variances.

use std::f64::consts::{LN_2, PI, SQRT_2};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Half-width of one of the 256 pixel bins on `[-1, 1]`.
pub const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;

/// Snap tolerance for lattice membership.
pub const LATTICE_TOLERANCE: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian carried as mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::shape(format!(
                "mean has {} dims, log-variance {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if log_variance.iter().any(|lv| !lv.is_finite()) {
            return Err(Error::NonFinite {
                context: "log-variance".into(),
            });
        }
        Ok(DiagGaussian { mean, log_variance })
    }

    pub fn standard(dims: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dims],
            log_variance: vec![0.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{what}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Sample `x_t ~ q(x_t | x_0)` as `sqrt(alphabar_t) x0 + sqrt(1 - alphabar_t) eps`.
///
/// `t = 0` is accepted and returns `x0`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(x0, eps, "q_sample")?;
    if t > 0 {
        sched.check_t(t)?;
    }
    let ab = sched.alphabar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| signal * x + noise * e)
        .collect())
}

/// Marginal `q(x_t | x_0)` as a Gaussian.
pub fn q_marginal(x0: &[f64], t: usize, sched: &NoiseSchedule) -> Result<DiagGaussian> {
    sched.check_t(t)?;
    let ab = sched.alphabar(t);
    let signal = ab.sqrt();
    let lv = (1.0 - ab).ln();
    Ok(DiagGaussian {
        mean: x0.iter().map(|x| signal * x).collect(),
        log_variance: vec![lv; x0.len()],
    })
}

/// Coefficients `(c0, ct)` of the posterior mean `c0 * x0 + ct * xt`.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let ab = sched.alphabar(t);
    let ab_prev = sched.alphabar(t - 1);
    let beta = sched.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    (c0, ct)
}

/// Posterior `q(x_{t-1} | x_t, x_0)`.
///
/// The returned log-variance uses the floored value at `t = 1`, where the
/// true posterior variance is zero; the mean is exact.
pub fn q_posterior(
    x0: &[f64],
    xt: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<DiagGaussian> {
    same_len(x0, xt, "q_posterior")?;
    sched.check_t(t)?;
    let (c0, ct) = posterior_coefficients(t, sched);
    let lv = sched.posterior_log_variance_floored(t);
    Ok(DiagGaussian {
        mean: x0.iter().zip(xt).map(|(a, b)| c0 * a + ct * b).collect(),
        log_variance: vec![lv; x0.len()],
    })
}

/// Reverse-process mean from a noise prediction.
pub fn mu_from_eps(
    xt: &[f64],
    t: usize,
    eps_pred: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    same_len(xt, eps_pred, "mu_from_eps")?;
    sched.check_t(t)?;
    let (scale, coef) = mu_eps_coefficients(t, sched);
    Ok(xt
        .iter()
        .zip(eps_pred)
        .map(|(x, e)| scale * (x - coef * e))
        .collect())
}

/// `(1/sqrt(alpha_t), beta_t / sqrt(1 - alphabar_t))`.
pub(crate) fn mu_eps_coefficients(t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let scale = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alphabar(t)).sqrt();
    (scale, coef)
}

/// Invert the marginal: `x0 = (xt - sqrt(1 - alphabar_t) eps) / sqrt(alphabar_t)`.
pub fn predict_x0_from_eps(
    xt: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    same_len(xt, eps, "predict_x0_from_eps")?;
    sched.check_t(t)?;
    let ab = sched.alphabar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(xt
        .iter()
        .zip(eps)
        .map(|(x, e)| (x - noise * e) / signal)
        .collect())
}

/// Log-variance interpolated between `log beta~_t` (`v = 0`) and
/// `log beta_t` (`v = 1`). `v` is unconstrained.
pub fn sigma_from_v(v: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    let (upper, lower) = (sched.beta(t).ln(), sched.posterior_log_variance_floored(t));
    Ok(v.iter().map(|f| f * upper + (1.0 - f) * lower).collect())
}

/// Elementwise KL divergence of `p` from `q`, in nats.
pub fn kl_elem(mean_p: f64, lv_p: f64, mean_q: f64, lv_q: f64) -> f64 {
    let diff = mean_p - mean_q;
    0.5 * (lv_q - lv_p + (lv_p - lv_q).exp() + diff * diff * (-lv_q).exp() - 1.0)
}

/// `KL(p || q)` summed over dimensions, in nats.
pub fn kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    same_len(&p.mean, &q.mean, "kl_diag")?;
    Ok((0..p.dims())
        .map(|i| kl_elem(p.mean[i], p.log_variance[i], q.mean[i], q.log_variance[i]))
        .sum())
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Gaussian log-density of `x` in nats, with gradients with respect to the
/// mean and the log-variance.
pub fn gaussian_log_density_elem(x: f64, mean: f64, lv: f64) -> (f64, f64, f64) {
    let inv_var = (-lv).exp();
    let diff = x - mean;
    let ll = -0.5 * (LN_2PI + lv + diff * diff * inv_var);
    (ll, diff * inv_var, -0.5 + 0.5 * diff * diff * inv_var)
}

/// Continuous Gaussian log-likelihood summed over dimensions, in nats.
pub fn continuous_gaussian_ll(x: &[f64], mean: &[f64], log_variance: &[f64]) -> Result<f64> {
    same_len(x, mean, "continuous_gaussian_ll")?;
    same_len(x, log_variance, "continuous_gaussian_ll")?;
    Ok((0..x.len())
        .map(|i| gaussian_log_density_elem(x[i], mean[i], log_variance[i]).0)
        .sum())
}

/// Snap `x` to the 256-level lattice on `[-1, 1]`, returning the bin index.
pub fn lattice_index(x: f64) -> Option<usize> {
    if !x.is_finite() {
        return None;
    }
    let k = ((x + 1.0) * 127.5).round();
    if !(0.0..=255.0).contains(&k) {
        return None;
    }
    if (k / 127.5 - 1.0 - x).abs() > LATTICE_TOLERANCE {
        return None;
    }
    Some(k as usize)
}

/// Log of the Gaussian mass in the pixel bin of `x`, with gradients with
/// respect to the mean and log-variance. The outermost bins extend to
/// infinity. `bin` is the lattice index of `x`.
pub fn discretized_log_mass_elem(bin: usize, mean: f64, lv: f64) -> (f64, f64, f64) {
    let x = bin as f64 / 127.5 - 1.0;
    let sigma = (0.5 * lv).exp();
    let z_hi = (x + BIN_HALF_WIDTH - mean) / sigma;
    let z_lo = (x - BIN_HALF_WIDTH - mean) / sigma;
    let (mass, d_mean, d_lv) = if bin == 0 {
        let p = std_normal_pdf(z_hi);
        (std_normal_cdf(z_hi), -p / sigma, -0.5 * p * z_hi)
    } else if bin == 255 {
        let p = std_normal_pdf(z_lo);
        (std_normal_cdf(-z_lo), p / sigma, 0.5 * p * z_lo)
    } else {
        let (p_hi, p_lo) = (std_normal_pdf(z_hi), std_normal_pdf(z_lo));
        // Subtract in whichever tail keeps the larger magnitude.
        let mass = if z_lo > 0.0 {
            std_normal_cdf(-z_lo) - std_normal_cdf(-z_hi)
        } else {
            std_normal_cdf(z_hi) - std_normal_cdf(z_lo)
        };
        (
            mass,
            -(p_hi - p_lo) / sigma,
            -0.5 * (p_hi * z_hi - p_lo * z_lo),
        )
    };
    let mass = mass.max(f64::MIN_POSITIVE);
    (mass.ln(), d_mean / mass, d_lv / mass)
}

/// Discretized Gaussian log-likelihood over 256 bins, summed over
/// dimensions, in nats. Rejects values off the lattice.
pub fn discretized_gaussian_ll(x: &[f64], mean: &[f64], log_variance: &[f64]) -> Result<f64> {
    same_len(x, mean, "discretized_gaussian_ll")?;
    same_len(x, log_variance, "discretized_gaussian_ll")?;
    let mut total = 0.0;
    for i in 0..x.len() {
        let bin = lattice_index(x[i]).ok_or_else(|| {
            Error::invalid(format!("value {} is not on the 256-level lattice", x[i]))
        })?;
        total += discretized_log_mass_elem(bin, mean[i], log_variance[i]).0;
    }
    Ok(total)
}

/// Optimal noise prediction `E[eps | x_t]` when the data is
/// `N(mu0, diag(var0))`.
pub fn analytic_gaussian_eps(
    xt: &[f64],
    t: usize,
    mu0: &[f64],
    var0: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    same_len(xt, mu0, "analytic_gaussian_eps")?;
    same_len(xt, var0, "analytic_gaussian_eps")?;
    sched.check_t(t)?;
    let ab = sched.alphabar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok((0..xt.len())
        .map(|i| noise * (xt[i] - signal * mu0[i]) / (ab * var0[i] + 1.0 - ab))
        .collect())
}

/// Nats to bits per dimension.
pub fn bits_per_dim(nats: f64, dims: usize) -> f64 {
    nats / (dims as f64 * LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::COSINE_S;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.1, 0.1).unwrap()
    }

    #[test]
    fn q_sample_values() {
        let s = two_step();
        assert_eq!(
            q_sample(&[0.3, -2.0], 0, &[5.0, 1.0], &s).unwrap(),
            [0.3, -2.0]
        );
        let out = q_sample(&[1.0], 2, &[1.0], &s).unwrap();
        assert!((out[0] - (0.81f64.sqrt() + 0.19f64.sqrt())).abs() < 1e-14);
        assert!((out[0] - 1.335890).abs() < 1e-6);
        assert!(q_sample(&[1.0], 3, &[1.0], &s).is_err());
        assert!(q_sample(&[1.0], 1, &[1.0, 2.0], &s).is_err());
    }

    #[test]
    fn two_forward_steps_match_marginal_moments() {
        // x0 ~ N(0.5, 0.25); apply q(x_t | x_{t-1}) twice with fresh noise.
        let s = two_step();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let (mut sum_a, mut sq_a, mut sum_b, mut sq_b) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x0 = 0.5 + 0.5 * z;
            let mut x = x0;
            for t in 1..=2 {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = (1.0 - s.beta(t)).sqrt() * x + s.beta(t).sqrt() * e;
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            let y = q_sample(&[x0], 2, &[e], &s).unwrap()[0];
            sum_a += x;
            sq_a += x * x;
            sum_b += y;
            sq_b += y * y;
        }
        let nf = n as f64;
        let (ma, mb) = (sum_a / nf, sum_b / nf);
        let (va, vb) = (sq_a / nf - ma * ma, sq_b / nf - mb * mb);
        let true_mean = 0.81f64.sqrt() * 0.5;
        let true_var = 0.81 * 0.25 + 0.19;
        let se_mean = (true_var / nf).sqrt();
        let se_var = true_var * (2.0 / nf).sqrt();
        for (m, v) in [(ma, va), (mb, vb)] {
            assert!((m - true_mean).abs() < 4.0 * se_mean, "mean {m}");
            assert!((v - true_var).abs() < 4.0 * se_var, "var {v}");
        }
    }

    #[test]
    fn posterior_collapses_at_first_step() {
        let s = NoiseSchedule::cosine(50, COSINE_S).unwrap();
        let (c0, ct) = posterior_coefficients(1, &s);
        assert!((c0 - 1.0).abs() < 1e-12);
        assert_eq!(ct, 0.0);
        assert_eq!(s.posterior_variance(1), 0.0);
        let post = q_posterior(&[0.7], &[-3.0], 1, &s).unwrap();
        assert!((post.mean[0] - 0.7).abs() < 1e-12);
    }

    /// Brute-force Bayes on a grid: p(x_{t-1} | x_t, x_0) is proportional to
    /// q(x_t | x_{t-1}) q(x_{t-1} | x_0).
    #[test]
    fn posterior_matches_grid_bayes() {
        let s = two_step();
        for (x0, xt) in [(0.0, 1.0), (0.8, -0.4), (-1.5, 2.0)] {
            let ab1 = s.alphabar(1);
            let (lo, hi, n) = (-8.0, 8.0, 400_001);
            let h = (hi - lo) / (n - 1) as f64;
            let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let x = lo + h * i as f64;
                let prior = -(x - ab1.sqrt() * x0).powi(2) / (2.0 * (1.0 - ab1));
                let lik = -(xt - s.alpha(2).sqrt() * x).powi(2) / (2.0 * s.beta(2));
                let p = (prior + lik).exp();
                w += p;
                m1 += p * x;
                m2 += p * x * x;
            }
            let mean = m1 / w;
            let var = m2 / w - mean * mean;
            let post = q_posterior(&[x0], &[xt], 2, &s).unwrap();
            assert!(
                (post.mean[0] - mean).abs() < 1e-8,
                "{} vs {mean}",
                post.mean[0]
            );
            assert!((post.log_variance[0].exp() - var).abs() < 1e-8);
        }
        let (c0, ct) = posterior_coefficients(2, &s);
        assert!((c0 - 0.9f64.sqrt() * 0.1 / 0.19).abs() < 1e-15);
        assert!((ct - 0.9f64.sqrt() * 0.1 / 0.19).abs() < 1e-15);
    }

    #[test]
    fn posterior_coefficients_sum_to_one_in_small_beta_limit() {
        let s = NoiseSchedule::linear(3, 1e-8, 1e-8).unwrap();
        let (c0, ct) = posterior_coefficients(3, &s);
        assert!((c0 + ct - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mu_from_eps_values() {
        let s = two_step();
        let out = mu_from_eps(&[1.0], 2, &[0.0], &s).unwrap();
        assert!((out[0] - 1.0 / 0.9f64.sqrt()).abs() < 1e-15);
        let out = mu_from_eps(&[1.0], 2, &[1.0], &s).unwrap();
        assert!((out[0] - 0.812267).abs() < 1e-6);
    }

    #[test]
    fn mu_from_eps_agrees_with_posterior_mean() {
        let s = NoiseSchedule::cosine(200, COSINE_S).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..1000 {
            let t = 1 + k % 200;
            let x0: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let mu = mu_from_eps(&xt, t, &eps, &s).unwrap();
            let post = q_posterior(&x0, &xt, t, &s).unwrap();
            for (a, b) in mu.iter().zip(&post.mean) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
            let back = predict_x0_from_eps(&xt, t, &eps, &s).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-9 * (1.0 / s.alphabar(t).sqrt()), "t={t}");
            }
        }
    }

    #[test]
    fn sigma_interpolation() {
        let s = NoiseSchedule::cosine(100, COSINE_S).unwrap();
        assert_eq!(sigma_from_v(&[1.0], 40, &s).unwrap()[0], s.beta(40).ln());
        assert_eq!(
            sigma_from_v(&[0.0], 40, &s).unwrap()[0],
            s.posterior_variance(40).ln()
        );
        let mid = 0.5 * (0.005f64.ln() + 0.004f64.ln());
        assert!((mid - -5.409889).abs() < 1e-6);
        // Values outside [0, 1] extrapolate.
        assert!(sigma_from_v(&[2.0], 40, &s).unwrap()[0] > s.beta(40).ln());
    }

    #[test]
    fn kl_values() {
        let p = DiagGaussian::new(vec![1.0, -2.0], vec![0.3, -1.0]).unwrap();
        assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
        let a = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
        let b = DiagGaussian::standard(1);
        assert!((kl_diag(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let c = DiagGaussian::new(vec![0.0], vec![2f64.ln()]).unwrap();
        let expected = 0.5 * (-(2f64.ln()) + 2.0 - 1.0);
        assert!((kl_diag(&c, &b).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.153426).abs() < 1e-6);
        assert!(DiagGaussian::new(vec![0.0], vec![f64::NEG_INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mp in -5.0..5.0f64, mq in -5.0..5.0f64, lp in -6.0..3.0f64, lq in -6.0..3.0f64) {
            let kl = kl_elem(mp, lp, mq, lq);
            prop_assert!(kl >= -1e-12);
            if (mp - mq).abs() > 1e-3 || (lp - lq).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn discretized_masses_partition_unity(mean in -1.5..1.5f64, lv in -12.0..2.0f64) {
            let total: f64 = (0..256).map(|b| discretized_log_mass_elem(b, mean, lv).0.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-10, "total {}", total);
        }
    }

    #[test]
    fn discretized_edge_bin() {
        let ll = discretized_gaussian_ll(&[-1.0], &[-1.0], &[0.0]).unwrap();
        let expected = std_normal_cdf(1.0 / 255.0).ln();
        assert!((ll - expected).abs() < 1e-14);
        assert!((ll - -0.690023).abs() < 1e-6);
    }

    #[test]
    fn discretized_wide_gaussian_approaches_density_times_bin_width() {
        // For sigma >> 1 the bin mass tends to width * pdf(0) / sigma.
        let lv = (1e4f64).ln() * 2.0;
        let x = 130.0 / 127.5 - 1.0;
        let ll = discretized_gaussian_ll(&[x], &[x], &[lv]).unwrap();
        let sigma = (0.5 * lv).exp();
        let rescaled = ll + sigma.ln() + 0.5 * (2.0 * PI).ln();
        assert!((rescaled - (2.0f64 / 255.0).ln()).abs() < 1e-6);
        assert!(((2.0f64 / 255.0).ln() - -4.848).abs() < 1e-3);
    }

    #[test]
    fn discretized_rejects_off_lattice() {
        assert!(discretized_gaussian_ll(&[0.001], &[0.0], &[0.0]).is_err());
        assert!(discretized_gaussian_ll(&[1.2], &[0.0], &[0.0]).is_err());
        // inside the snap tolerance
        let x = 1.0 / 127.5 - 1.0 + 5e-7;
        assert!(discretized_gaussian_ll(&[x], &[0.0], &[0.0]).is_ok());
    }

    #[test]
    fn discretized_gradients_match_finite_differences() {
        for &bin in &[0usize, 1, 100, 200, 254, 255] {
            for &(mean, lv) in &[(0.0, -3.0), (0.4, -6.0), (-0.9, 0.5), (0.95, -8.0)] {
                let (_, dm, dl) = discretized_log_mass_elem(bin, mean, lv);
                let h = 1e-6;
                let fd_m = (discretized_log_mass_elem(bin, mean + h, lv).0
                    - discretized_log_mass_elem(bin, mean - h, lv).0)
                    / (2.0 * h);
                let fd_l = (discretized_log_mass_elem(bin, mean, lv + h).0
                    - discretized_log_mass_elem(bin, mean, lv - h).0)
                    / (2.0 * h);
                let tol = |a: f64, b: f64| (a - b).abs() <= 1e-5 * (1.0 + a.abs().max(b.abs()));
                assert!(tol(dm, fd_m), "bin {bin}: dmean {dm} vs {fd_m}");
                assert!(tol(dl, fd_l), "bin {bin}: dlv {dl} vs {fd_l}");
            }
        }
    }

    #[test]
    fn analytic_eps() {
        let s = NoiseSchedule::cosine(100, COSINE_S).unwrap();
        let t = 30;
        let ab = s.alphabar(t);
        let out = analytic_gaussian_eps(&[0.7, -1.1], t, &[0.0, 0.0], &[1.0, 1.0], &s).unwrap();
        assert!((out[0] - (1.0 - ab).sqrt() * 0.7).abs() < 1e-15);
        assert!((out[1] - (1.0 - ab).sqrt() * -1.1).abs() < 1e-15);
        let mode = ab.sqrt() * 2.0;
        let zero = analytic_gaussian_eps(&[mode], t, &[2.0], &[0.3], &s).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn analytic_eps_matches_regression() {
        // Least-squares slope of eps on x_t over simulated pairs.
        let s = NoiseSchedule::cosine(100, COSINE_S).unwrap();
        let (mu0, var0, t) = (0.5f64, 0.3f64, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let (mut sx, mut se, mut sxx, mut sxe) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let x0 = mu0 + var0.sqrt() * z;
            let xt = q_sample(&[x0], t, &[e], &s).unwrap()[0];
            sx += xt;
            se += e;
            sxx += xt * xt;
            sxe += xt * e;
        }
        let nf = n as f64;
        let slope = (sxe - sx * se / nf) / (sxx - sx * sx / nf);
        let ab = s.alphabar(t);
        let formula = (1.0 - ab).sqrt() / (ab * var0 + 1.0 - ab);
        assert!((slope / formula - 1.0).abs() < 0.01, "{slope} vs {formula}");
        let numeric = analytic_gaussian_eps(&[1.0], t, &[mu0], &[var0], &s).unwrap()[0]
            - analytic_gaussian_eps(&[0.0], t, &[mu0], &[var0], &s).unwrap()[0];
        assert!((numeric - formula).abs() < 1e-14);
    }

    #[test]
    fn unit_conversion() {
        assert!((bits_per_dim(1.0, 1) - 1.442695).abs() < 1e-6);
        assert!((bits_per_dim(6.0, 3) - 2.0 / LN_2).abs() < 1e-15);
    }
}
