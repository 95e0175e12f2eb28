//! Training objectives: the simple noise-prediction loss, per-term
//! variational bound, and their hybrid with a stop-gradient on the mean.
//!
//! Timestep convention: a *transition step* `t` in `1..=T` is the reverse
//! transition `x_t -> x_{t-1}`. The bound's terms are indexed `0..=T`:
//! term 0 is the decoder (transition step 1), term `k` for `1 <= k < T` is
//! the KL at transition step `k + 1`, and term `T` is the prior.

mod importance;

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;

pub use importance::{ImportanceSampler, HISTORY_LEN};

use crate::error::{Error, Result};
use crate::gaussian::{
    self, discretized_log_mass_elem, gaussian_log_density_elem, kl_elem, lattice_index,
    DiagGaussian,
};
use crate::schedule::NoiseSchedule;
use crate::toynet::ModelOutput;

/// Default weight of the bound inside the hybrid objective.
pub const DEFAULT_LAMBDA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Simple,
    Vlb,
    Hybrid,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Objective::Simple),
            "vlb" => Ok(Objective::Vlb),
            "hybrid" => Ok(Objective::Hybrid),
            other => Err(Error::invalid(format!("unknown objective `{other}`"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Simple => "simple",
            Objective::Vlb => "vlb",
            Objective::Hybrid => "hybrid",
        })
    }
}

/// How the reverse-process variance is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// `sigma^2 = beta~_t` (floored at `t = 1`).
    FixedSmall,
    /// `sigma^2 = beta_t`.
    FixedLarge,
    /// Interpolated in log space by the model's `v` head.
    Learned,
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" | "fixed_small" => Ok(VarianceMode::FixedSmall),
            "large" | "fixed_large" => Ok(VarianceMode::FixedLarge),
            "learned" => Ok(VarianceMode::Learned),
            other => Err(Error::invalid(format!("unknown variance mode `{other}`"))),
        }
    }
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMode::FixedSmall => "small",
            VarianceMode::FixedLarge => "large",
            VarianceMode::Learned => "learned",
        })
    }
}

/// Likelihood used for the decoder term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    /// 256-bin discretized Gaussian on `[-1, 1]`; image-like data only.
    Discretized,
    /// Gaussian density; continuous data, nats are per unit volume.
    Continuous,
}

impl FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discretized" => Ok(Decoder::Discretized),
            "continuous" => Ok(Decoder::Continuous),
            other => Err(Error::invalid(format!("unknown decoder `{other}`"))),
        }
    }
}

impl fmt::Display for Decoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decoder::Discretized => "discretized",
            Decoder::Continuous => "continuous",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub stop_grad_mean: bool,
    /// Variance used when evaluating bound terms. Forced to `Learned` for
    /// the `vlb` and `hybrid` objectives.
    pub variance: VarianceMode,
    pub decoder: Decoder,
}

impl LossConfig {
    pub fn new(objective: Objective) -> Self {
        LossConfig {
            objective,
            lambda: DEFAULT_LAMBDA,
            stop_grad_mean: objective == Objective::Hybrid,
            variance: match objective {
                Objective::Simple => VarianceMode::FixedSmall,
                _ => VarianceMode::Learned,
            },
            decoder: Decoder::Continuous,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective == Objective::Hybrid && !(self.lambda > 0.0) {
            return Err(Error::invalid("hybrid objective needs lambda > 0"));
        }
        if self.objective != Objective::Simple && self.variance != VarianceMode::Learned {
            return Err(Error::invalid(
                "vlb and hybrid objectives train the variance head; use learned variance",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VlbTermKind {
    Decoder,
    Kl,
    Prior,
}

/// One term of the bound for one batch element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VlbTerm {
    /// Term index in `0..=T`.
    pub term: usize,
    pub kind: VlbTermKind,
    pub nats: f64,
}

/// Log-variance of the reverse transition at step `t`, from the raw `v`.
pub fn model_log_variance(
    v_raw: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    mode: VarianceMode,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    Ok(match mode {
        VarianceMode::FixedSmall => vec![sched.posterior_log_variance_floored(t); v_raw.len()],
        VarianceMode::FixedLarge => vec![sched.beta(t).ln(); v_raw.len()],
        VarianceMode::Learned => {
            let frac: Vec<f64> = v_raw.iter().map(|v| (v + 1.0) / 2.0).collect();
            gaussian::sigma_from_v(&frac, t, sched)?
        }
    })
}

/// A bound term with its gradients with respect to the model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad {
    pub term: VlbTerm,
    pub d_eps: Vec<f64>,
    pub d_v: Vec<f64>,
}

/// Bound term for the reverse transition at step `t` (1..=T), with the
/// model output evaluated at `xt`.
pub fn vlb_term(
    eps_pred: &[f64],
    v_raw: &[f64],
    x0: &[f64],
    xt: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    variance: VarianceMode,
    decoder: Decoder,
) -> Result<VlbTerm> {
    vlb_term_grad(eps_pred, v_raw, x0, xt, t, sched, variance, decoder).map(|g| g.term)
}

/// [`vlb_term`] plus its gradients.
#[allow(clippy::too_many_arguments)]
pub fn vlb_term_grad(
    eps_pred: &[f64],
    v_raw: &[f64],
    x0: &[f64],
    xt: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    variance: VarianceMode,
    decoder: Decoder,
) -> Result<TermGrad> {
    let dims = x0.len();
    if eps_pred.len() != dims || v_raw.len() != dims || xt.len() != dims {
        return Err(Error::shape(
            "vlb term inputs must share one dimensionality",
        ));
    }
    sched.check_t(t)?;
    let mean = gaussian::mu_from_eps(xt, t, eps_pred, sched)?;
    let lv = model_log_variance(v_raw, t, sched, variance)?;
    let (scale, coef) = gaussian::mu_eps_coefficients(t, sched);
    let dmean_deps = -scale * coef;
    let dlv_dv = match variance {
        VarianceMode::Learned => {
            0.5 * (sched.beta(t).ln() - sched.posterior_log_variance_floored(t))
        }
        _ => 0.0,
    };
    let mut d_eps = vec![0.0; dims];
    let mut d_v = vec![0.0; dims];
    let mut nats = 0.0;
    let kind;
    if t == 1 {
        kind = VlbTermKind::Decoder;
        for i in 0..dims {
            let (ll, dm, dl) = match decoder {
                Decoder::Continuous => gaussian_log_density_elem(x0[i], mean[i], lv[i]),
                Decoder::Discretized => {
                    let bin = lattice_index(x0[i]).ok_or_else(|| {
                        Error::invalid(format!("value {} is not on the 256-level lattice", x0[i]))
                    })?;
                    discretized_log_mass_elem(bin, mean[i], lv[i])
                }
            };
            nats -= ll;
            d_eps[i] = -dm * dmean_deps;
            d_v[i] = -dl * dlv_dv;
        }
    } else {
        kind = VlbTermKind::Kl;
        let post = gaussian::q_posterior(x0, xt, t, sched)?;
        for i in 0..dims {
            let (mq, lq) = (post.mean[i], post.log_variance[i]);
            nats += kl_elem(mq, lq, mean[i], lv[i]);
            let diff = mean[i] - mq;
            let inv_var = (-lv[i]).exp();
            d_eps[i] = diff * inv_var * dmean_deps;
            d_v[i] = 0.5 * (1.0 - (lq - lv[i]).exp() - diff * diff * inv_var) * dlv_dv;
        }
    }
    Ok(TermGrad {
        term: VlbTerm {
            term: t - 1,
            kind,
            nats,
        },
        d_eps,
        d_v,
    })
}

/// Prior term `KL(q(x_T | x_0) || N(0, I))`. Has no model dependence.
pub fn prior_term(x0: &[f64], sched: &NoiseSchedule) -> Result<VlbTerm> {
    let steps = sched.steps();
    let marginal = gaussian::q_marginal(x0, steps, sched)?;
    let nats = gaussian::kl_diag(&marginal, &DiagGaussian::standard(x0.len()))?;
    Ok(VlbTerm {
        term: steps,
        kind: VlbTermKind::Prior,
        nats,
    })
}

/// `||eps - eps_pred||^2` summed over dimensions, averaged over the batch.
pub fn l_simple_term(eps: ArrayView2<'_, f64>, eps_pred: ArrayView2<'_, f64>) -> Result<f64> {
    if eps.dim() != eps_pred.dim() {
        return Err(Error::shape("eps and eps_pred shapes differ"));
    }
    let batch = eps.nrows().max(1) as f64;
    Ok((&eps - &eps_pred).mapv(|d| d * d).sum() / batch)
}

/// Inputs of a batched loss evaluation; every row has its own timestep.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub x0: ArrayView2<'a, f64>,
    pub xt: ArrayView2<'a, f64>,
    pub eps: ArrayView2<'a, f64>,
    pub t: &'a [usize],
    /// Per-row importance weights for the bound terms; `None` means 1.
    pub weights: Option<&'a [f64]>,
}

/// Loss value with gradients with respect to both model heads.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub simple: f64,
    /// Unweighted bound term per row, nats.
    pub vlb_terms: Vec<f64>,
    pub grads: ModelOutput,
}

/// Evaluate the configured objective. For the hybrid objective with
/// `stop_grad_mean`, the bound term only sends gradient into `v`.
///
/// `frozen_eps`, when given, replaces the noise prediction seen by the bound
/// term. This is how a stop-gradient looks to a finite-difference probe.
pub fn batch_loss(
    out: &ModelOutput,
    inputs: &LossInputs<'_>,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
    frozen_eps: Option<ArrayView2<'_, f64>>,
) -> Result<LossEval> {
    let (batch, dims) = inputs.x0.dim();
    if inputs.xt.dim() != (batch, dims)
        || inputs.eps.dim() != (batch, dims)
        || out.eps.dim() != (batch, dims)
        || out.v.dim() != (batch, dims)
        || inputs.t.len() != batch
        || inputs.weights.is_some_and(|w| w.len() != batch)
    {
        return Err(Error::shape("loss inputs disagree on batch shape"));
    }
    let inv_batch = 1.0 / batch.max(1) as f64;
    let mut grads = ModelOutput::zeros(batch, dims);
    let mut simple = 0.0;
    let mut loss = 0.0;
    let mut vlb_terms = vec![0.0; batch];

    let use_simple = cfg.objective != Objective::Vlb;
    let vlb_weight = match cfg.objective {
        Objective::Simple => 0.0,
        Objective::Vlb => 1.0,
        Objective::Hybrid => cfg.lambda,
    };
    let variance = match cfg.objective {
        Objective::Simple => cfg.variance,
        _ => VarianceMode::Learned,
    };
    let mean_grad_flows = !(cfg.objective == Objective::Hybrid && cfg.stop_grad_mean);

    for i in 0..batch {
        let eps_row = out.eps.row(i);
        let target = inputs.eps.row(i);
        let row_simple: f64 = eps_row
            .iter()
            .zip(target.iter())
            .map(|(p, e)| (p - e) * (p - e))
            .sum();
        simple += row_simple * inv_batch;
        if use_simple {
            loss += row_simple * inv_batch;
            for j in 0..dims {
                grads.eps[[i, j]] += 2.0 * (eps_row[j] - target[j]) * inv_batch;
            }
        }

        let bound_eps = match &frozen_eps {
            Some(frozen) => frozen.row(i).to_vec(),
            None => eps_row.to_vec(),
        };
        let term = vlb_term_grad(
            &bound_eps,
            &out.v.row(i).to_vec(),
            &inputs.x0.row(i).to_vec(),
            &inputs.xt.row(i).to_vec(),
            inputs.t[i],
            sched,
            variance,
            cfg.decoder,
        )?;
        vlb_terms[i] = term.term.nats;
        if vlb_weight > 0.0 {
            let w = vlb_weight * inputs.weights.map_or(1.0, |w| w[i]) * inv_batch;
            loss += w * term.term.nats;
            for j in 0..dims {
                if mean_grad_flows && frozen_eps.is_none() {
                    grads.eps[[i, j]] += w * term.d_eps[j];
                }
                grads.v[[i, j]] += w * term.d_v[j];
            }
        }
    }
    if !loss.is_finite() {
        let bad: Vec<usize> = vlb_terms
            .iter()
            .zip(inputs.t)
            .filter(|(v, _)| !v.is_finite())
            .map(|(_, &t)| t)
            .collect();
        return Err(Error::NonFinite {
            context: format!("loss at t = {bad:?}"),
        });
    }
    Ok(LossEval {
        loss,
        simple,
        vlb_terms,
        grads,
    })
}

/// `L_simple + lambda * L_t` with the stop-gradient on the mean pathway.
pub fn hybrid_loss(
    out: &ModelOutput,
    inputs: &LossInputs<'_>,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<LossEval> {
    let cfg = LossConfig {
        lambda,
        ..LossConfig::new(Objective::Hybrid)
    };
    batch_loss(out, inputs, sched, &cfg, None)
}
