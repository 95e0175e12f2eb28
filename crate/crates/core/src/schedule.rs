//! Noise schedules for the forward process.
//!
//! Timesteps are 1-indexed at the API (`t = 1..=T`), with `alphabar(0) == 1`
//! stored explicitly. Arrays are 0-indexed internally.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest admissible beta. Cosine betas are clipped to this value.
pub const MAX_BETA: f64 = 0.999;

/// Offset of the cosine schedule.
pub const COSINE_S: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Respaced,
}

/// Enough information to rebuild a base schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleDescriptor {
    Linear {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    Cosine {
        steps: usize,
        s: f64,
    },
}

impl ScheduleDescriptor {
    /// Linear schedule with the endpoints rescaled for `steps` so that the
    /// shape of alphabar matches the 1000-step reference (1e-4 .. 0.02).
    pub fn linear_rescaled(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        ScheduleDescriptor::Linear {
            steps,
            beta_start: 0.0001 * scale,
            beta_end: 0.02 * scale,
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleDescriptor::Linear { steps, .. } | ScheduleDescriptor::Cosine { steps, .. } => {
                steps
            }
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleDescriptor::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(steps, beta_start, beta_end),
            ScheduleDescriptor::Cosine { steps, s } => NoiseSchedule::cosine(steps, s),
        }
    }
}

/// All per-timestep coefficients of a diffusion process of length `T`.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Length `T + 1`, `alphabars[0] == 1`.
    alphabars: Vec<f64>,
    posterior_variances: Vec<f64>,
    /// Timestep of the original training process that each step corresponds to.
    /// Identity for base schedules; the stride for respaced ones.
    model_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated (inclusive) from `beta_start` at `t = 1`
    /// to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end <= MAX_BETA) {
            return Err(Error::invalid(format!(
                "linear betas must satisfy 0 < start <= end <= {MAX_BETA}, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| {
                    let frac = i as f64 / span;
                    beta_start * (1.0 - frac) + beta_end * frac
                })
                .collect()
        };
        Ok(Self::from_betas(ScheduleKind::Linear, betas))
    }

    /// Squared-cosine alphabar with offset `s`, betas clipped at [`MAX_BETA`].
    ///
    /// alphabar is recomputed from the clipped betas so the cumulative-product
    /// invariant holds exactly.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!(
                "cosine offset must be > 0, got {s}"
            )));
        }
        let total = steps as f64;
        let f = |t: usize| {
            let phase = ((t as f64 / total + s) / (1.0 + s)) * FRAC_PI_2;
            phase.cos().powi(2)
        };
        let betas = (1..=steps)
            .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine, betas))
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alphabars = Vec::with_capacity(betas.len() + 1);
        alphabars.push(1.0);
        for a in &alphas {
            let prev = *alphabars.last().unwrap();
            alphabars.push(prev * a);
        }
        let model_timesteps = (1..=betas.len()).collect();
        Self::assemble(kind, betas, alphabars, model_timesteps)
    }

    fn assemble(
        kind: ScheduleKind,
        betas: Vec<f64>,
        alphabars: Vec<f64>,
        model_timesteps: Vec<usize>,
    ) -> Self {
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        let posterior_variances = betas
            .iter()
            .enumerate()
            .map(|(i, b)| (1.0 - alphabars[i]) / (1.0 - alphabars[i + 1]) * b)
            .collect();
        NoiseSchedule {
            kind,
            betas,
            alphas,
            alphabars,
            posterior_variances,
            model_timesteps,
        }
    }

    /// Schedule over the subsequence `stride` of this schedule's timesteps.
    ///
    /// alphabar at the selected steps is copied from the parent, so marginals
    /// are preserved exactly. Where two selected steps are adjacent the parent
    /// beta is reused verbatim, which makes the identity respace bit-exact.
    pub fn respace(&self, stride: &StrideSpec) -> Result<Self> {
        if stride.parent_steps != self.steps() {
            return Err(Error::invalid(format!(
                "stride built for T={} applied to schedule with T={}",
                stride.parent_steps,
                self.steps()
            )));
        }
        stride.validate()?;
        let mut betas = Vec::with_capacity(stride.timesteps.len());
        let mut alphabars = Vec::with_capacity(stride.timesteps.len() + 1);
        alphabars.push(1.0);
        let mut prev = 0usize;
        for &t in &stride.timesteps {
            let beta = if t == prev + 1 {
                self.beta(t)
            } else {
                1.0 - self.alphabar(t) / self.alphabar(prev)
            };
            betas.push(beta);
            alphabars.push(self.alphabar(t));
            prev = t;
        }
        let model_timesteps = stride
            .timesteps
            .iter()
            .map(|&t| self.model_timesteps[t - 1])
            .collect();
        Ok(Self::assemble(
            ScheduleKind::Respaced,
            betas,
            alphabars,
            model_timesteps,
        ))
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alphabar_0 ..= alphabar_T`.
    pub fn alphabars(&self) -> &[f64] {
        &self.alphabars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    /// Parent-process timesteps the model should be conditioned on, per step.
    pub fn model_timesteps(&self) -> &[usize] {
        &self.model_timesteps
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Defined for `t = 0..=T`.
    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabars[t]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }

    /// `log beta~_t` with the `t = 1` value (where beta~ is zero) replaced by
    /// beta~_2. A one-step schedule falls back to `log beta_1`.
    pub fn posterior_log_variance_floored(&self, t: usize) -> f64 {
        if t == 1 {
            if self.steps() >= 2 {
                self.posterior_variances[1].ln()
            } else {
                self.betas[0].ln()
            }
        } else {
            self.posterior_variance(t).ln()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrideMode {
    /// `round(linspace(1, T, K))`, duplicates removed.
    EvenlySpacedRound,
    /// `{1, 1 + T/K, ..., T - T/K + 1}`.
    DdimConstant,
    /// Evenly spaced plus every step in `1..=T/K`.
    NllAugmented,
}

impl FromStr for StrideMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evenly_spaced_round" | "even" => Ok(StrideMode::EvenlySpacedRound),
            "ddim_constant" | "ddim" => Ok(StrideMode::DdimConstant),
            "nll_augmented" | "nll" => Ok(StrideMode::NllAugmented),
            other => Err(Error::invalid(format!("unknown stride mode `{other}`"))),
        }
    }
}

impl fmt::Display for StrideMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrideMode::EvenlySpacedRound => "evenly_spaced_round",
            StrideMode::DdimConstant => "ddim_constant",
            StrideMode::NllAugmented => "nll_augmented",
        })
    }
}

/// A strictly increasing subsequence of `1..=T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrideSpec {
    pub parent_steps: usize,
    pub timesteps: Vec<usize>,
    pub mode: StrideMode,
}

impl StrideSpec {
    pub fn new(parent_steps: usize, count: usize, mode: StrideMode) -> Result<Self> {
        if parent_steps == 0 {
            return Err(Error::invalid("stride over an empty process"));
        }
        if count == 0 || count > parent_steps {
            return Err(Error::invalid(format!(
                "stride count must be in 1..={parent_steps}, got {count}"
            )));
        }
        let needs_divisor = matches!(mode, StrideMode::DdimConstant | StrideMode::NllAugmented);
        if needs_divisor && !parent_steps.is_multiple_of(count) {
            return Err(Error::invalid(format!(
                "{mode} striding needs K dividing T, got T={parent_steps}, K={count}"
            )));
        }
        let timesteps = match mode {
            StrideMode::EvenlySpacedRound => evenly_spaced(parent_steps, count),
            StrideMode::DdimConstant => {
                let step = parent_steps / count;
                (0..count).map(|i| 1 + i * step).collect()
            }
            StrideMode::NllAugmented => {
                let mut ts = evenly_spaced(parent_steps, count);
                ts.extend(1..=parent_steps / count);
                ts.sort_unstable();
                ts.dedup();
                ts
            }
        };
        Ok(StrideSpec {
            parent_steps,
            timesteps,
            mode,
        })
    }

    /// The full sequence `1..=T`.
    pub fn full(parent_steps: usize) -> Self {
        StrideSpec {
            parent_steps,
            timesteps: (1..=parent_steps).collect(),
            mode: StrideMode::EvenlySpacedRound,
        }
    }

    /// Effective number of steps after deduplication.
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let ts = &self.timesteps;
        if ts.is_empty() {
            return Err(Error::invalid("empty stride"));
        }
        if ts[0] < 1 || *ts.last().unwrap() > self.parent_steps {
            return Err(Error::invalid(format!(
                "stride must lie within 1..={}",
                self.parent_steps
            )));
        }
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("stride must be strictly increasing"));
        }
        Ok(())
    }
}

fn evenly_spaced(steps: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![1];
    }
    let span = (steps - 1) as f64 / (count - 1) as f64;
    let mut ts: Vec<usize> = (0..count)
        .map(|i| (1.0 + span * i as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}
