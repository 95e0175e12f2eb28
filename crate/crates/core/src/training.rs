//! Adam, EMA, the training step, gradient checks and the gradient noise
//! scale.

use std::f64::consts::LN_2;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::DataBatch;
use crate::error::{Error, Result};
use crate::gaussian::q_sample;
use crate::objectives::{batch_loss, ImportanceSampler, LossConfig, LossEval, LossInputs};
use crate::rng::{stream, Stream};
use crate::schedule::NoiseSchedule;
use crate::toynet::{NetConfig, NetParams, ToyNet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Base learning rate; the applied rate is divided by
    /// `sqrt(width_multiplier)`.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ema_rate: f64,
    pub total_steps: u64,
    pub loss: LossConfig,
    pub seed: u64,
    pub importance_sampling: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            ema_rate: 0.9999,
            total_steps: 10_000,
            loss,
            seed: 0,
            importance_sampling: false,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::invalid("ema_rate must be in [0, 1]"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be > 0"));
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self, net: &NetConfig) -> f64 {
        self.learning_rate / net.width_multiplier.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetParams,
    pub v: NetParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before
/// any state changes.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut NetParams,
    grads: &NetParams,
    lr: f64,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::shape("gradient layout differs from the parameters"));
    }
    if let Some(bad) = grads
        .blocks
        .iter()
        .find(|b| b.data.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFinite {
            context: format!("gradient block {}", bad.name),
        });
    }
    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(k);
    let c2 = 1.0 - state.beta2.powi(k);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params
        .blocks
        .iter_mut()
        .zip(&grads.blocks)
        .zip(&mut state.m.blocks)
        .zip(&mut state.v.blocks)
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: NetParams,
    pub rate: f64,
}

impl EmaState {
    pub fn new(params: &NetParams, rate: f64) -> Self {
        EmaState {
            shadow: params.clone(),
            rate,
        }
    }
}

/// `shadow = rate * shadow + (1 - rate) * params`.
pub fn ema_update(ema: &mut EmaState, params: &NetParams) {
    let r = ema.rate;
    for (s, p) in ema.shadow.blocks.iter_mut().zip(&params.blocks) {
        s.data
            .iter_mut()
            .zip(&p.data)
            .for_each(|(s, p)| *s = r * *s + (1.0 - r) * p);
    }
}

/// Scale `grads` so its global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut NetParams, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Everything drawn for one training step.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub t: Vec<usize>,
    pub weights: Vec<f64>,
    pub eps: Array2<f64>,
    pub xt: Array2<f64>,
}

impl TrainBatch {
    /// Build `x_t` from explicit draws.
    pub fn new(
        x0: Array2<f64>,
        labels: Option<Vec<usize>>,
        t: Vec<usize>,
        eps: Array2<f64>,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        if t.len() != x0.nrows() || eps.dim() != x0.dim() {
            return Err(Error::shape("batch draws disagree on shape"));
        }
        let mut xt = Array2::zeros(x0.dim());
        for i in 0..x0.nrows() {
            let row = q_sample(&x0.row(i).to_vec(), t[i], &eps.row(i).to_vec(), sched)?;
            xt.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
        }
        let weights = vec![1.0; t.len()];
        Ok(TrainBatch {
            x0,
            labels,
            t,
            weights,
            eps,
            xt,
        })
    }

    fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            x0: self.x0.view(),
            xt: self.xt.view(),
            eps: self.eps.view(),
            t: &self.t,
            weights: Some(&self.weights),
        }
    }
}

/// Loss and parameter gradient of `net` on `batch`.
pub fn loss_and_grad(
    net: &ToyNet,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
    batch: &TrainBatch,
) -> Result<(LossEval, NetParams)> {
    let (out, cache) = net.forward_cached(batch.xt.view(), &batch.t, batch.labels.as_deref())?;
    let eval = batch_loss(&out, &batch.inputs(), sched, cfg, None)?;
    let grads = net.backward(&cache, &eval.grads)?;
    Ok((eval, grads))
}

/// Loss with the bound's noise prediction pinned to `frozen_eps`, which is
/// what the stop-gradient looks like to a finite-difference probe.
fn loss_value(
    net: &ToyNet,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
    batch: &TrainBatch,
    frozen_eps: Option<&Array2<f64>>,
) -> Result<f64> {
    let out = net.forward(batch.xt.view(), &batch.t, batch.labels.as_deref())?;
    let eval = batch_loss(
        &out,
        &batch.inputs(),
        sched,
        cfg,
        frozen_eps.map(|e| e.view()),
    )?;
    Ok(eval.loss)
}

/// Per-step report.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Importance-weighted estimate of the summed transition terms,
    /// `T * mean(w_i L_{t_i})`, in bits per dimension.
    pub vlb_bits_per_dim: f64,
    pub t_drawn: Vec<usize>,
}

/// Model, optimizer state and random streams of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: ToyNet,
    pub adam: AdamState,
    pub ema: EmaState,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub sampler: Option<ImportanceSampler>,
    pub step: u64,
    batch_rng: ChaCha8Rng,
    t_rng: ChaCha8Rng,
    eps_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh run: parameters drawn from the `Init` stream of `config.seed`.
    pub fn new(
        net_config: NetConfig,
        schedule: NoiseSchedule,
        config: TrainConfig,
    ) -> Result<Self> {
        net_config.validate()?;
        let params = NetParams::init(&net_config, &mut stream(config.seed, Stream::Init));
        Self::with_net(ToyNet::new(net_config, params)?, schedule, config)
    }

    pub fn with_net(net: ToyNet, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if net.config.timesteps != schedule.steps() {
            return Err(Error::invalid(format!(
                "net conditioned on {} steps, schedule has {}",
                net.config.timesteps,
                schedule.steps()
            )));
        }
        let sampler = if config.importance_sampling {
            Some(ImportanceSampler::new(schedule.steps())?)
        } else {
            None
        };
        Ok(Trainer {
            adam: AdamState::new(&net.params),
            ema: EmaState::new(&net.params, config.ema_rate),
            net,
            schedule,
            config,
            sampler,
            step: 0,
            batch_rng: stream(config.seed, Stream::Batches),
            t_rng: stream(config.seed, Stream::Timesteps),
            eps_rng: stream(config.seed, Stream::Noise),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.effective_learning_rate(&self.net.config)
    }

    /// Draw rows (with replacement), timesteps and noise for one step.
    pub fn draw_batch(&mut self, data: &DataBatch) -> Result<TrainBatch> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if data.dims() != self.net.config.input_dims {
            return Err(Error::shape("data dims differ from the network input"));
        }
        let n = self.config.batch_size;
        let rows: Vec<usize> = (0..n)
            .map(|_| self.batch_rng.random_range(0..data.len()))
            .collect();
        let picked = data.select(&rows);
        let labels = if self.net.config.is_conditional() {
            Some(
                picked
                    .labels
                    .ok_or_else(|| Error::invalid("conditional model needs labeled data"))?,
            )
        } else {
            None
        };
        let steps = self.schedule.steps();
        let mut t = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let (ti, wi) = match &mut self.sampler {
                Some(s) => s.sample(&mut self.t_rng),
                None => (self.t_rng.random_range(1..=steps), 1.0),
            };
            t.push(ti);
            weights.push(wi);
        }
        let eps = Array2::from_shape_fn((n, data.dims()), |_| {
            StandardNormal.sample(&mut self.eps_rng)
        });
        let mut batch = TrainBatch::new(picked.x, labels, t, eps, &self.schedule)?;
        batch.weights = weights;
        Ok(batch)
    }

    /// One optimizer step on a minibatch drawn from `data`.
    pub fn train_step(&mut self, data: &DataBatch) -> Result<StepMetrics> {
        let batch = self.draw_batch(data)?;
        self.train_on(&batch)
    }

    /// One optimizer step on explicit draws.
    pub fn train_on(&mut self, batch: &TrainBatch) -> Result<StepMetrics> {
        let (eval, mut grads) = loss_and_grad(&self.net, &self.schedule, &self.config.loss, batch)?;
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.learning_rate();
        adam_step(&mut self.adam, &mut self.net.params, &grads, lr)?;
        ema_update(&mut self.ema, &self.net.params);
        if let Some(sampler) = &mut self.sampler {
            for (&t, &l) in batch.t.iter().zip(&eval.vlb_terms) {
                sampler.update(t, l)?;
            }
        }
        self.step += 1;
        let n = batch.t.len() as f64;
        let weighted: f64 = eval
            .vlb_terms
            .iter()
            .zip(&batch.weights)
            .map(|(l, w)| l * w)
            .sum::<f64>()
            / n;
        let dims = self.net.config.input_dims as f64;
        Ok(StepMetrics {
            step: self.step,
            loss: eval.loss,
            vlb_bits_per_dim: weighted * self.schedule.steps() as f64 / (dims * LN_2),
            t_drawn: batch.t.clone(),
        })
    }

    /// EMA parameters packaged as a network.
    pub fn ema_net(&self) -> ToyNet {
        ToyNet {
            config: self.net.config.clone(),
            params: self.ema.shadow.clone(),
        }
    }

    /// Gradient noise scale of the frozen current parameters under `loss`.
    /// Timesteps are uniform; draws come from the `NoiseScale` stream.
    pub fn grad_noise_scale(
        &self,
        data: &DataBatch,
        loss: &LossConfig,
        b_small: usize,
        b_big: usize,
        repeats: usize,
    ) -> Result<NoiseScaleEstimate> {
        let mut rng = stream(self.config.seed, Stream::NoiseScale);
        let steps = self.schedule.steps();
        let conditional = self.net.config.is_conditional();
        estimate_noise_scale(b_small, b_big, repeats, |b| {
            let rows: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
            let picked = data.select(&rows);
            let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=steps)).collect();
            let eps = Array2::from_shape_fn((b, data.dims()), |_| StandardNormal.sample(&mut rng));
            let labels = if conditional { picked.labels } else { None };
            let batch = TrainBatch::new(picked.x, labels, t, eps, &self.schedule)?;
            let (_, grads) = loss_and_grad(&self.net, &self.schedule, loss, &batch)?;
            Ok(grads.iter().collect())
        })
    }
}

/// Result of a two-batch-size noise scale measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseScaleEstimate {
    pub b_simple: f64,
    /// Mean `|G_B|^2` at the small and big batch sizes.
    pub small_sq_norm: f64,
    pub big_sq_norm: f64,
    /// Unbiased estimates of `|G|^2` and `tr(Sigma)`.
    pub grad_sq: f64,
    pub trace: f64,
}

/// `B_simple = B_s B_b (|G_s|^2 - |G_b|^2) / (B_b |G_b|^2 - B_s |G_s|^2)`.
pub fn noise_scale_from_norms(
    b_small: usize,
    b_big: usize,
    small_sq_norm: f64,
    big_sq_norm: f64,
) -> Result<NoiseScaleEstimate> {
    if b_small == 0 || b_big <= b_small {
        return Err(Error::invalid("need 0 < b_small < b_big"));
    }
    let (bs, bb) = (b_small as f64, b_big as f64);
    let denominator = bb * big_sq_norm - bs * small_sq_norm;
    if !(denominator > 0.0) {
        return Err(Error::NoiseScaleUnresolvable { denominator });
    }
    let grad_sq = denominator / (bb - bs);
    let trace = (small_sq_norm - big_sq_norm) / (1.0 / bs - 1.0 / bb);
    Ok(NoiseScaleEstimate {
        b_simple: bs * bb * (small_sq_norm - big_sq_norm) / denominator,
        small_sq_norm,
        big_sq_norm,
        grad_sq,
        trace,
    })
}

/// Average `|grad(b)|^2` over `repeats` draws at each batch size, then apply
/// [`noise_scale_from_norms`]. `grad(b)` must return the mean gradient of a
/// fresh batch of size `b`.
pub fn estimate_noise_scale<F>(
    b_small: usize,
    b_big: usize,
    repeats: usize,
    mut grad: F,
) -> Result<NoiseScaleEstimate>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let mut mean_sq = |b: usize| -> Result<f64> {
        let mut acc = 0.0;
        for _ in 0..repeats {
            acc += grad(b)?.iter().map(|g| g * g).sum::<f64>();
        }
        Ok(acc / repeats as f64)
    };
    let small = mean_sq(b_small)?;
    let big = mean_sq(b_big)?;
    noise_scale_from_norms(b_small, b_big, small, big)
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_block: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor of the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare [`loss_and_grad`] against central differences of step `h` on
/// every parameter. The stop-gradient is honored by freezing the bound's
/// noise prediction at its unperturbed value.
pub fn grad_check(
    net: &ToyNet,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
    batch: &TrainBatch,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(net, sched, cfg, batch)?;
    let frozen = if cfg.objective == crate::objectives::Objective::Hybrid && cfg.stop_grad_mean {
        Some(
            net.forward(batch.xt.view(), &batch.t, batch.labels.as_deref())?
                .eps,
        )
    } else {
        None
    };
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_block: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for i in 0..net.params.len() {
        let orig = net.params.get_flat(i);
        probe.params.set_flat(i, orig + h);
        let up = loss_value(&probe, sched, cfg, batch, frozen.as_ref())?;
        probe.params.set_flat(i, orig - h);
        let down = loss_value(&probe, sched, cfg, batch, frozen.as_ref())?;
        probe.params.set_flat(i, orig);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get_flat(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_block = net.params.block_name_of(i).to_string();
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetKind, DatasetSpec};
    use crate::objectives::{Decoder, Objective, HISTORY_LEN};
    use crate::schedule::{NoiseSchedule, COSINE_S};
    use rand::SeedableRng;

    fn tiny_params() -> NetParams {
        let cfg = NetConfig::new(1, vec![1], 4);
        let mut p = NetParams::zeros(&cfg);
        p.blocks.truncate(2);
        p
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = tiny_params();
        p.set_flat(0, 0.7);
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let zero = p.zeros_like();
        adam_step(&mut state, &mut p, &zero, 1e-2).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_steps_match_hand_trace() {
        let mut p = tiny_params();
        let mut state = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.set_flat(0, 0.5);
        let lr = 0.1;
        adam_step(&mut state, &mut p, &g, lr).unwrap();
        // m_hat = g, v_hat = g^2 after one step.
        let expected1 = -lr * 0.5 / (0.5 + ADAM_EPS);
        assert!((p.get_flat(0) - expected1).abs() < 1e-15);

        g.set_flat(0, -1.0);
        adam_step(&mut state, &mut p, &g, lr).unwrap();
        let m = 0.9 * (0.1 * 0.5) + -0.1;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected2 = expected1 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert!((p.get_flat(0) - expected2).abs() < 1e-14);
        assert_eq!(p.get_flat(1), 0.0);
    }

    #[test]
    fn adam_rejects_non_finite_and_names_block() {
        let mut p = tiny_params();
        let mut state = AdamState::new(&p);
        let mut g = p.zeros_like();
        let last = g.len() - 1;
        g.set_flat(last, f64::NAN);
        let err = adam_step(&mut state, &mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("hidden.0.bias"), "{err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn ema_matches_closed_form() {
        let mut start = tiny_params();
        start.set_flat(0, 2.0);
        let mut ema = EmaState::new(&start, 0.9);
        let mut target = start.zeros_like();
        target.set_flat(0, -1.0);
        for _ in 0..25 {
            ema_update(&mut ema, &target);
        }
        let r: f64 = 0.9f64.powi(25);
        let expected = r * 2.0 + -(1.0 - r);
        assert!((ema.shadow.get_flat(0) - expected).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = tiny_params();
        g.set_flat(0, 3.0);
        g.set_flat(1, 4.0);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.squared_norm() - 1.0).abs() < 1e-12);
    }

    fn toy_setup(objective: Objective, steps: usize) -> (Trainer, DataBatch) {
        let sched = NoiseSchedule::cosine(steps, COSINE_S).unwrap();
        let mut loss = LossConfig::new(objective);
        loss.decoder = Decoder::Continuous;
        let mut cfg = TrainConfig::new(loss);
        cfg.batch_size = 64;
        cfg.learning_rate = 1e-3;
        cfg.seed = 17;
        let trainer = Trainer::new(NetConfig::new(2, vec![32, 32], steps), sched, cfg).unwrap();
        let data = generate(&DatasetSpec {
            kind: DatasetKind::AnalyticGaussian {
                mu0: 0.5,
                var0: 0.25,
                dims: 2,
            },
            n_train: 4096,
            n_eval: 0,
            seed: 2,
        })
        .unwrap()
        .train;
        (trainer, data)
    }

    #[test]
    fn simple_objective_loss_trends_down() {
        let (mut trainer, data) = toy_setup(Objective::Simple, 100);
        trainer.config.learning_rate = 1e-4;
        trainer.config.batch_size = 128;
        let windows: Vec<f64> = (0..5)
            .map(|_| {
                (0..100)
                    .map(|_| trainer.train_step(&data).unwrap().loss)
                    .sum::<f64>()
                    / 100.0
            })
            .collect();
        for w in windows.windows(2) {
            assert!(w[1] < w[0], "{windows:?}");
        }
    }

    #[test]
    fn hybrid_eps_head_gradient_equals_simple() {
        let (mut hybrid, data) = toy_setup(Objective::Hybrid, 50);
        let (mut simple, _) = toy_setup(Objective::Simple, 50);
        // Make the heads non-zero so both pathways carry gradient.
        let params = NetParams::random(&hybrid.net.config, &mut ChaCha8Rng::seed_from_u64(8));
        hybrid.net.params = params.clone();
        simple.net.params = params;
        let bh = hybrid.draw_batch(&data).unwrap();
        let bs = simple.draw_batch(&data).unwrap();
        assert_eq!(bh.t, bs.t);
        assert_eq!(bh.eps, bs.eps);
        let (_, gh) =
            loss_and_grad(&hybrid.net, &hybrid.schedule, &hybrid.config.loss, &bh).unwrap();
        let (_, gs) =
            loss_and_grad(&simple.net, &simple.schedule, &simple.config.loss, &bs).unwrap();
        for name in ["eps_head.weight", "eps_head.bias"] {
            assert_eq!(gh.block(name).unwrap().data, gs.block(name).unwrap().data);
        }
        assert!(gh
            .block("v_head.weight")
            .unwrap()
            .data
            .iter()
            .any(|&g| g != 0.0));
        assert!(gs
            .block("v_head.weight")
            .unwrap()
            .data
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn importance_history_warms_after_exactly_ten_per_step() {
        let steps = 20;
        let sched = NoiseSchedule::cosine(steps, COSINE_S).unwrap();
        let mut cfg = TrainConfig::new(LossConfig::new(Objective::Vlb));
        cfg.importance_sampling = true;
        let mut trainer =
            Trainer::new(NetConfig::new(2, vec![8], steps), sched.clone(), cfg).unwrap();
        let x0 = Array2::from_elem((steps, 2), 0.1);
        let eps = Array2::from_elem((steps, 2), 0.3);
        for round in 0..HISTORY_LEN {
            assert!(!trainer.sampler.as_ref().unwrap().is_warm());
            let mut t: Vec<usize> = (1..=steps).collect();
            if round == HISTORY_LEN - 1 {
                // Hold back the last step so warmup completes on its own draw.
                t[steps - 1] = 1;
            }
            let batch = TrainBatch::new(x0.clone(), None, t, eps.clone(), &sched).unwrap();
            trainer.train_on(&batch).unwrap();
        }
        assert!(!trainer.sampler.as_ref().unwrap().is_warm());
        let last = TrainBatch::new(
            x0.slice(ndarray::s![..1, ..]).to_owned(),
            None,
            vec![steps],
            eps.slice(ndarray::s![..1, ..]).to_owned(),
            &sched,
        )
        .unwrap();
        trainer.train_on(&last).unwrap();
        let s = trainer.sampler.as_ref().unwrap();
        assert!(s.is_warm());
        assert_eq!(
            (1..=steps).map(|t| s.count(t)).sum::<u64>(),
            (HISTORY_LEN * steps) as u64 + 1
        );
    }

    #[test]
    fn importance_weighted_bound_has_lower_variance() {
        // Frozen model, fixed x0; each draw picks t and a fresh eps and
        // returns w_t L_t. One-sided F bound at 99% for 10k vs 10k draws.
        let steps = 50;
        let sched = NoiseSchedule::cosine(steps, COSINE_S).unwrap();
        let cfg = NetConfig::new(2, vec![16], steps);
        let net = ToyNet::new(
            cfg.clone(),
            NetParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)),
        )
        .unwrap();
        let loss = LossConfig::new(Objective::Vlb);
        let x0 = ndarray::array![[0.4, -0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let term = |t: usize, rng: &mut ChaCha8Rng| {
            let eps = Array2::from_shape_fn((1, 2), |_| StandardNormal.sample(rng));
            let batch = TrainBatch::new(x0.clone(), None, vec![t], eps, &sched).unwrap();
            loss_and_grad(&net, &sched, &loss, &batch)
                .unwrap()
                .0
                .vlb_terms[0]
        };
        let mut sampler = ImportanceSampler::new(steps).unwrap();
        for _ in 0..HISTORY_LEN {
            for t in 1..=steps {
                let l = term(t, &mut rng);
                sampler.update(t, l).unwrap();
            }
        }
        let n = 10_000;
        let variance = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let uniform: Vec<f64> = (0..n)
            .map(|_| {
                let t = rng.random_range(1..=steps);
                term(t, &mut rng)
            })
            .collect();
        let weighted: Vec<f64> = (0..n)
            .map(|_| {
                let (t, w) = sampler.sample(&mut rng);
                w * term(t, &mut rng)
            })
            .collect();
        let (vu, vw) = (variance(&uniform), variance(&weighted));
        assert!(vw * 1.05 <= vu, "weighted {vw} uniform {vu}");
    }

    #[test]
    fn losses_stay_finite_over_long_fuzz_runs() {
        let kinds = [
            DatasetKind::Checkerboard,
            DatasetKind::ring_mixture(5, 1.5, 0.02),
            DatasetKind::AnalyticGaussian {
                mu0: -0.3,
                var0: 2.0,
                dims: 2,
            },
        ];
        for (k, objective) in [Objective::Simple, Objective::Vlb, Objective::Hybrid]
            .into_iter()
            .enumerate()
        {
            let steps = 100;
            let sched = NoiseSchedule::cosine(steps, COSINE_S).unwrap();
            let mut cfg = TrainConfig::new(LossConfig::new(objective));
            cfg.batch_size = 16;
            cfg.learning_rate = 1e-3;
            cfg.seed = k as u64;
            cfg.importance_sampling = objective == Objective::Vlb;
            let mut trainer =
                Trainer::new(NetConfig::new(2, vec![16, 16], steps), sched, cfg).unwrap();
            let data = generate(&DatasetSpec {
                kind: kinds[k].clone(),
                n_train: 512,
                n_eval: 0,
                seed: 40 + k as u64,
            })
            .unwrap()
            .train;
            for _ in 0..1000 {
                let m = trainer.train_step(&data).unwrap();
                assert!(m.loss.is_finite() && m.vlb_bits_per_dim.is_finite());
            }
        }
    }

    #[test]
    fn grad_check_all_objectives() {
        let steps = 30;
        let sched = NoiseSchedule::cosine(steps, COSINE_S).unwrap();
        let cfg = NetConfig::new(2, vec![6, 5], steps);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = ToyNet::new(cfg.clone(), NetParams::random(&cfg, &mut rng)).unwrap();
        let x0 = Array2::from_shape_fn((6, 2), |_| StandardNormal.sample(&mut rng));
        let eps = Array2::from_shape_fn((6, 2), |_| StandardNormal.sample(&mut rng));
        let t = vec![1, 2, 5, 11, 29, 30];
        let batch = TrainBatch::new(x0, None, t, eps, &sched).unwrap();
        for objective in [Objective::Simple, Objective::Vlb, Objective::Hybrid] {
            let loss = LossConfig::new(objective);
            let report = grad_check(&net, &sched, &loss, &batch, 1e-5).unwrap();
            assert_eq!(report.checked, net.params.len());
            assert!(report.max_rel_error < 1e-4, "{objective}: {report:?}");
        }
    }

    #[test]
    fn noise_scale_recovers_synthetic_oracle() {
        // Per-example gradient G + N(0, sigma^2 I): B_simple = d sigma^2 / |G|^2.
        let d = 20;
        let g: Vec<f64> = (0..d).map(|i| 0.1 + 0.01 * i as f64).collect();
        let sigma = 0.8f64;
        let truth = d as f64 * sigma * sigma / g.iter().map(|x| x * x).sum::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est = estimate_noise_scale(8, 256, 4000, |b| {
            let scale = sigma / (b as f64).sqrt();
            Ok(g.iter()
                .map(|gi| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    gi + scale * z
                })
                .collect())
        })
        .unwrap();
        assert!(
            (est.b_simple - truth).abs() < 0.1 * truth,
            "{} vs {truth}",
            est.b_simple
        );
    }

    #[test]
    fn noise_scale_zero_variance_and_unresolvable() {
        let est = estimate_noise_scale(4, 32, 3, |_| Ok(vec![0.5, -0.25])).unwrap();
        assert_eq!(est.b_simple, 0.0);
        let err = noise_scale_from_norms(4, 32, 1.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::NoiseScaleUnresolvable { .. }));
        assert!(err.is_numeric());
    }

    #[test]
    fn vlb_gradients_are_noisier_than_hybrid() {
        // Frozen at initialization; uniform t for both objectives.
        let (trainer, data) = toy_setup(Objective::Hybrid, 200);
        let hybrid = trainer
            .grad_noise_scale(&data, &LossConfig::new(Objective::Hybrid), 8, 128, 200)
            .unwrap();
        let vlb = trainer
            .grad_noise_scale(&data, &LossConfig::new(Objective::Vlb), 8, 128, 200)
            .unwrap();
        assert!(
            vlb.b_simple > hybrid.b_simple,
            "vlb {vlb:?} hybrid {hybrid:?}"
        );
    }

    #[test]
    fn learning_rate_scales_with_width() {
        let mut net = NetConfig::new(2, vec![8], 10);
        net.width_multiplier = 4.0;
        let cfg = TrainConfig::new(LossConfig::new(Objective::Simple));
        assert!((cfg.effective_learning_rate(&net) - 0.5e-4).abs() < 1e-18);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (mut a, data) = toy_setup(Objective::Hybrid, 50);
        let (mut b, _) = toy_setup(Objective::Hybrid, 50);
        for _ in 0..5 {
            assert_eq!(a.train_step(&data).unwrap(), b.train_step(&data).unwrap());
        }
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(a.ema.shadow, b.ema.shadow);
    }
}
