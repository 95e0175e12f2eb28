//! Reverse-process generation and likelihood evaluation.
//!
//! Every routine runs on an *active* schedule: the base schedule or a
//! respacing of it. Models are always queried at the parent timestep
//! `active.model_timestep(t)`.

use std::f64::consts::LN_2;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::DataBatch;
use crate::error::{Error, Result};
use crate::gaussian::q_sample;
use crate::gaussian::{
    analytic_gaussian_eps, mu_from_eps, posterior_coefficients, predict_x0_from_eps,
};
use crate::objectives::{
    model_log_variance, prior_term, vlb_term, Decoder, VarianceMode, VlbTermKind,
};
use crate::schedule::{NoiseSchedule, StrideMode, StrideSpec};
use crate::toynet::{ModelOutput, ToyNet};

/// Anything that predicts `(eps, v)` from `x_t` at parent timesteps.
pub trait Denoiser {
    fn input_dims(&self) -> usize;

    fn is_conditional(&self) -> bool {
        false
    }

    fn predict(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<ModelOutput>;
}

impl Denoiser for ToyNet {
    fn input_dims(&self) -> usize {
        self.config.input_dims
    }

    fn is_conditional(&self) -> bool {
        self.config.is_conditional()
    }

    fn predict(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        self.forward(xt, t, labels)
    }
}

/// Closed-form `E[eps | x_t]` for `N(mu0, diag(var0))` data, with a constant
/// raw `v` (`-1` reproduces the fixed-small variance in learned mode).
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub mu0: Vec<f64>,
    pub var0: Vec<f64>,
    /// The schedule the parent timesteps refer to.
    pub schedule: NoiseSchedule,
    pub v_raw: f64,
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn input_dims(&self) -> usize {
        self.mu0.len()
    }

    fn predict(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[usize],
        _labels: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        let (n, d) = xt.dim();
        if d != self.mu0.len() || t.len() != n {
            return Err(Error::shape("analytic denoiser input shape"));
        }
        let mut out = ModelOutput::zeros(n, d);
        out.v.fill(self.v_raw);
        for i in 0..n {
            let eps = analytic_gaussian_eps(
                &xt.row(i).to_vec(),
                t[i],
                &self.mu0,
                &self.var0,
                &self.schedule,
            )?;
            out.eps.row_mut(i).assign(&ArrayView1::from(&eps[..]));
        }
        Ok(out)
    }
}

/// Half-open parent-timestep intervals `[lo, hi)` mapped to model ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSwitch {
    intervals: Vec<(usize, usize, usize)>,
}

impl ModelSwitch {
    /// Intervals must tile `[1, T + 1)` in order.
    pub fn new(intervals: Vec<(usize, usize, usize)>, steps: usize) -> Result<Self> {
        let mut next = 1;
        for &(lo, hi, _) in &intervals {
            if lo != next || hi <= lo {
                return Err(Error::invalid(format!(
                    "switch intervals must partition 1..={steps} in order; bad [{lo}, {hi})"
                )));
            }
            next = hi;
        }
        if next != steps + 1 {
            return Err(Error::invalid(format!(
                "switch intervals must end at {} (exclusive), got {next}",
                steps + 1
            )));
        }
        Ok(ModelSwitch { intervals })
    }

    /// Model 1 on `[lo, hi)`, model 0 elsewhere.
    pub fn ensemble(steps: usize, lo: usize, hi: usize) -> Result<Self> {
        if !(1 <= lo && lo < hi && hi <= steps + 1) {
            return Err(Error::invalid(format!(
                "switch range [{lo}, {hi}) must lie inside [1, {})",
                steps + 1
            )));
        }
        let mut intervals = Vec::new();
        if lo > 1 {
            intervals.push((1, lo, 0));
        }
        intervals.push((lo, hi, 1));
        if hi <= steps {
            intervals.push((hi, steps + 1, 0));
        }
        Self::new(intervals, steps)
    }

    pub fn model_for(&self, parent_t: usize) -> usize {
        self.intervals
            .iter()
            .find(|&&(lo, hi, _)| lo <= parent_t && parent_t < hi)
            .map_or(0, |&(_, _, id)| id)
    }

    fn max_id(&self) -> usize {
        self.intervals.iter().map(|i| i.2).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ancestral,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::invalid(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub variance: VarianceMode,
    pub sampler: SamplerKind,
    /// `None` runs every step of the base schedule.
    pub stride: Option<StrideSpec>,
    pub model_switch: Option<ModelSwitch>,
    /// Clamp the implied `x0` to `[-1, 1]` before forming the mean.
    pub clip_denoised: bool,
}

impl SamplerConfig {
    pub fn new(variance: VarianceMode) -> Self {
        SamplerConfig {
            variance,
            sampler: SamplerKind::Ancestral,
            stride: None,
            model_switch: None,
            clip_denoised: false,
        }
    }

    /// The schedule sampling runs on.
    pub fn active_schedule(&self, base: &NoiseSchedule) -> Result<NoiseSchedule> {
        match &self.stride {
            Some(stride) => base.respace(stride),
            None => Ok(base.clone()),
        }
    }

    fn check_models(&self, models: &[&dyn Denoiser]) -> Result<()> {
        if models.is_empty() {
            return Err(Error::invalid("at least one model is required"));
        }
        let needed = self.model_switch.as_ref().map_or(0, ModelSwitch::max_id);
        if needed >= models.len() {
            return Err(Error::invalid(format!(
                "model switch refers to model {needed}, only {} given",
                models.len()
            )));
        }
        let d = models[0].input_dims();
        if models.iter().any(|m| m.input_dims() != d) {
            return Err(Error::invalid("switched models disagree on input dims"));
        }
        Ok(())
    }
}

fn predict_at(
    models: &[&dyn Denoiser],
    switch: Option<&ModelSwitch>,
    xt: ArrayView2<'_, f64>,
    t: usize,
    sched: &NoiseSchedule,
    labels: Option<&[usize]>,
) -> Result<ModelOutput> {
    let parent = sched.model_timestep(t);
    let model = models[switch.map_or(0, |s| s.model_for(parent))];
    let labels = if model.is_conditional() { labels } else { None };
    model.predict(xt, &vec![parent; xt.nrows()], labels)
}

fn check_finite(x: &Array2<f64>, t: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("sampling state at t = {t}"),
        })
    }
}

/// `rows x cols` standard normals, drawn row-major.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Implied `x0`, clamped when requested.
fn denoised(
    xt: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<Vec<f64>> {
    let mut x0 = predict_x0_from_eps(xt, t, eps, sched)?;
    if clip {
        x0.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    Ok(x0)
}

/// Reverse mean and log-variance at step `t` of the active schedule.
fn reverse_moments(
    out: &ModelOutput,
    xt: ArrayView2<'_, f64>,
    t: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, d) = xt.dim();
    let mut mean = Array2::zeros((n, d));
    let mut lv = Array2::zeros((n, d));
    for i in 0..n {
        let x = xt.row(i).to_vec();
        let eps = out.eps.row(i).to_vec();
        let m = if cfg.clip_denoised {
            let x0 = denoised(&x, t, &eps, sched, true)?;
            let (c0, ct) = posterior_coefficients(t, sched);
            x0.iter().zip(&x).map(|(a, b)| c0 * a + ct * b).collect()
        } else {
            mu_from_eps(&x, t, &eps, sched)?
        };
        let l = model_log_variance(&out.v.row(i).to_vec(), t, sched, cfg.variance)?;
        mean.row_mut(i).assign(&ArrayView1::from(&m[..]));
        lv.row_mut(i).assign(&ArrayView1::from(&l[..]));
    }
    Ok((mean, lv))
}

/// One ancestral step `x_t -> x_{t-1}` on the active schedule. At `t = 1`
/// the mean is returned and no noise is drawn.
pub fn p_sample_step<R: Rng + ?Sized>(
    models: &[&dyn Denoiser],
    xt: ArrayView2<'_, f64>,
    t: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    cfg.check_models(models)?;
    let out = predict_at(models, cfg.model_switch.as_ref(), xt, t, sched, labels)?;
    let (mean, lv) = reverse_moments(&out, xt, t, cfg, sched)?;
    let next = if t == 1 {
        mean
    } else {
        let z = standard_normal(xt.nrows(), xt.ncols(), rng);
        mean + &(lv.mapv(|l| (0.5 * l).exp()) * z)
    };
    check_finite(&next, t)?;
    Ok(next)
}

/// Draw `x_T ~ N(0, I)` and run the ancestral chain down the active
/// schedule.
pub fn ancestral_sample<R: Rng + ?Sized>(
    models: &[&dyn Denoiser],
    n: usize,
    cfg: &SamplerConfig,
    base: &NoiseSchedule,
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    cfg.check_models(models)?;
    let sched = cfg.active_schedule(base)?;
    let mut x = standard_normal(n, models[0].input_dims(), rng);
    for t in (1..=sched.steps()).rev() {
        x = p_sample_step(models, x.view(), t, cfg, &sched, labels, rng)?;
    }
    Ok(x)
}

/// One deterministic DDIM step (eta = 0) from step `t` of the active
/// schedule to step `t - 1`. With clipping, the noise estimate is
/// recomputed from the clamped `x0`.
pub fn ddim_step(
    out: &ModelOutput,
    xt: ArrayView2<'_, f64>,
    t: usize,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    let (n, d) = xt.dim();
    let ab = sched.alphabar(t);
    let ab_prev = sched.alphabar(t - 1);
    let mut next = Array2::zeros((n, d));
    for i in 0..n {
        let x = xt.row(i).to_vec();
        let mut eps = out.eps.row(i).to_vec();
        let x0 = denoised(&x, t, &eps, sched, clip)?;
        if clip {
            for j in 0..d {
                eps[j] = (x[j] - ab.sqrt() * x0[j]) / (1.0 - ab).sqrt();
            }
        }
        for j in 0..d {
            next[[i, j]] = ab_prev.sqrt() * x0[j] + (1.0 - ab_prev).sqrt() * eps[j];
        }
    }
    check_finite(&next, t)?;
    Ok(next)
}

/// DDIM with eta = 0. Only the initial `x_T` is random. Requires the full
/// schedule or a constant stride.
pub fn ddim_sample<R: Rng + ?Sized>(
    models: &[&dyn Denoiser],
    n: usize,
    cfg: &SamplerConfig,
    base: &NoiseSchedule,
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    cfg.check_models(models)?;
    if let Some(stride) = &cfg.stride {
        let full = stride.len() == stride.parent_steps;
        if stride.mode != StrideMode::DdimConstant && !full {
            return Err(Error::invalid(format!(
                "ddim needs a ddim_constant stride, got {}",
                stride.mode
            )));
        }
    }
    let sched = cfg.active_schedule(base)?;
    let mut x = standard_normal(n, models[0].input_dims(), rng);
    for t in (1..=sched.steps()).rev() {
        let out = predict_at(
            models,
            cfg.model_switch.as_ref(),
            x.view(),
            t,
            &sched,
            labels,
        )?;
        x = ddim_step(&out, x.view(), t, &sched, cfg.clip_denoised)?;
    }
    Ok(x)
}

/// Dispatch on `cfg.sampler`.
pub fn sample<R: Rng + ?Sized>(
    models: &[&dyn Denoiser],
    n: usize,
    cfg: &SamplerConfig,
    base: &NoiseSchedule,
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    match cfg.sampler {
        SamplerKind::Ancestral => ancestral_sample(models, n, cfg, base, labels, rng),
        SamplerKind::Ddim => ddim_sample(models, n, cfg, base, labels, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllConfig {
    pub variance: VarianceMode,
    pub decoder: Decoder,
    /// `None` evaluates every step; otherwise an (ideally nll_augmented)
    /// respacing.
    pub stride: Option<StrideSpec>,
    pub repeats: usize,
}

impl NllConfig {
    pub fn new(variance: VarianceMode, decoder: Decoder) -> Self {
        NllConfig {
            variance,
            decoder,
            stride: None,
            repeats: 1,
        }
    }
}

/// Mean of one bound term over data and repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct TermStat {
    /// Term index `0..=K`; `K` is the prior.
    pub term: usize,
    /// Parent timestep of the transition (`T` for the prior).
    pub t_model: usize,
    pub kind: VlbTermKind,
    pub mean_nats: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    pub n: usize,
    pub dims: usize,
    pub repeats: usize,
    /// Total bound per datum in nats, averaged over repeats.
    pub per_datum_nats: Vec<f64>,
    pub per_term: Vec<TermStat>,
    pub nats_per_dim: f64,
    pub bits_per_dim: f64,
}

impl NllReport {
    /// Per-term ratio `self / other` (equal schedules required).
    pub fn term_ratio(&self, other: &NllReport) -> Result<Vec<f64>> {
        if self.per_term.len() != other.per_term.len() {
            return Err(Error::invalid("reports cover different schedules"));
        }
        Ok(self
            .per_term
            .iter()
            .zip(&other.per_term)
            .map(|(a, b)| a.mean_nats / b.mean_nats)
            .collect())
    }
}

/// Stochastic estimate of the full bound for every datum.
///
/// Draw order: for each repeat, for `t = 1..=K` ascending, one `n x d`
/// block of standard normals (row-major) noises the data to `x_t`. The
/// order does not depend on the model, so two models evaluated from the
/// same seed share every draw.
pub fn nll_eval<R: Rng + ?Sized>(
    models: &[&dyn Denoiser],
    switch: Option<&ModelSwitch>,
    data: &DataBatch,
    base: &NoiseSchedule,
    cfg: &NllConfig,
    rng: &mut R,
) -> Result<NllReport> {
    if models.is_empty() || data.is_empty() || cfg.repeats == 0 {
        return Err(Error::invalid(
            "nll_eval needs a model, data and repeats >= 1",
        ));
    }
    if switch.is_some_and(|s| s.max_id() >= models.len()) {
        return Err(Error::invalid("model switch refers to a missing model"));
    }
    if cfg.decoder == Decoder::Discretized && !data.is_on_lattice() {
        return Err(Error::invalid(
            "discretized decoder needs data on the 256-level lattice",
        ));
    }
    let sched = match &cfg.stride {
        Some(stride) => base.respace(stride)?,
        None => base.clone(),
    };
    let (n, d) = data.x.dim();
    let steps = sched.steps();
    let mut term_sums = vec![0.0; steps + 1];
    let mut per_datum = vec![0.0; n];
    for _ in 0..cfg.repeats {
        for t in 1..=steps {
            let eps = standard_normal(n, d, rng);
            let mut xt = Array2::zeros((n, d));
            for i in 0..n {
                let row = q_sample(&data.x.row(i).to_vec(), t, &eps.row(i).to_vec(), &sched)?;
                xt.row_mut(i).assign(&ArrayView1::from(&row[..]));
            }
            let out = predict_at(models, switch, xt.view(), t, &sched, data.labels.as_deref())?;
            for i in 0..n {
                let term = vlb_term(
                    &out.eps.row(i).to_vec(),
                    &out.v.row(i).to_vec(),
                    &data.x.row(i).to_vec(),
                    &xt.row(i).to_vec(),
                    t,
                    &sched,
                    cfg.variance,
                    cfg.decoder,
                )?;
                term_sums[t - 1] += term.nats;
                per_datum[i] += term.nats;
            }
        }
        for i in 0..n {
            let prior = prior_term(&data.x.row(i).to_vec(), &sched)?;
            term_sums[steps] += prior.nats;
            per_datum[i] += prior.nats;
        }
    }
    let reps = cfg.repeats as f64;
    let count = reps * n as f64;
    let per_term = (0..=steps)
        .map(|k| TermStat {
            term: k,
            t_model: if k == steps {
                base.steps()
            } else {
                sched.model_timestep(k + 1)
            },
            kind: match k {
                0 => VlbTermKind::Decoder,
                k if k == steps => VlbTermKind::Prior,
                _ => VlbTermKind::Kl,
            },
            mean_nats: term_sums[k] / count,
        })
        .collect();
    let per_datum_nats: Vec<f64> = per_datum.into_iter().map(|v| v / reps).collect();
    let nats_per_dim = per_datum_nats.iter().sum::<f64>() / (n * d) as f64;
    if !nats_per_dim.is_finite() {
        return Err(Error::NonFinite {
            context: "nll total".into(),
        });
    }
    Ok(NllReport {
        n,
        dims: d,
        repeats: cfg.repeats,
        per_datum_nats,
        per_term,
        nats_per_dim,
        bits_per_dim: nats_per_dim / LN_2,
    })
}
