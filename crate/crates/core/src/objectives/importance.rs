use rand::Rng;

use crate::error::{Error, Result};

/// Depth of the per-timestep loss history.
pub const HISTORY_LEN: usize = 10;

/// Floor on `sqrt(E[L_t^2])` so an all-zero history stays well defined.
const PROB_FLOOR: f64 = 1e-10;

/// Importance sampler over transition steps `1..=T` with
/// `p_t ∝ sqrt(E[L_t^2])`, estimated from the last [`HISTORY_LEN`] values.
///
/// Uniform until every timestep has [`HISTORY_LEN`] recorded losses.
/// Single-writer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSampler {
    steps: usize,
    /// Squared losses, ring buffer per timestep.
    history: Vec<[f64; HISTORY_LEN]>,
    counts: Vec<u64>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    warm: bool,
    dirty: bool,
}

impl ImportanceSampler {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("importance sampler needs T >= 1"));
        }
        let uniform = 1.0 / steps as f64;
        Ok(ImportanceSampler {
            steps,
            history: vec![[0.0; HISTORY_LEN]; steps],
            counts: vec![0; steps],
            probs: vec![uniform; steps],
            cumulative: Vec::new(),
            warm: false,
            dirty: true,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// True once every timestep has a full history.
    pub fn is_warm(&self) -> bool {
        self.warm
    }

    /// Number of losses recorded for step `t`.
    pub fn count(&self, t: usize) -> u64 {
        self.counts[t - 1]
    }

    /// Current sampling distribution, index `t - 1`.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Most recent squared losses stored for `t`, oldest first.
    pub fn history(&self, t: usize) -> Vec<f64> {
        let i = t - 1;
        let n = self.counts[i] as usize;
        if n < HISTORY_LEN {
            self.history[i][..n].to_vec()
        } else {
            let start = n % HISTORY_LEN;
            (0..HISTORY_LEN)
                .map(|k| self.history[i][(start + k) % HISTORY_LEN])
                .collect()
        }
    }

    /// Weight `1 / (p_t T)`; with it the weighted loss is an unbiased
    /// estimate of the uniform-t mean.
    pub fn weight(&self, t: usize) -> f64 {
        1.0 / (self.probs[t - 1] * self.steps as f64)
    }

    /// Draw a timestep and its importance weight.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (usize, f64) {
        if !self.warm {
            return (rng.random_range(1..=self.steps), 1.0);
        }
        if self.dirty {
            let mut acc = 0.0;
            self.cumulative.clear();
            for p in &self.probs {
                acc += p;
                self.cumulative.push(acc);
            }
            self.dirty = false;
        }
        let u: f64 = rng.random::<f64>() * self.cumulative[self.steps - 1];
        let i = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.steps - 1);
        (i + 1, self.weight(i + 1))
    }

    /// Record the loss observed at `t`.
    pub fn update(&mut self, t: usize, loss: f64) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        let i = t - 1;
        let slot = (self.counts[i] % HISTORY_LEN as u64) as usize;
        self.history[i][slot] = loss * loss;
        self.counts[i] += 1;
        if !self.warm && self.counts.iter().all(|&c| c >= HISTORY_LEN as u64) {
            self.warm = true;
        }
        if self.warm {
            self.recompute();
        }
        Ok(())
    }

    fn recompute(&mut self) {
        let raw: Vec<f64> = self
            .history
            .iter()
            .map(|h| {
                (h.iter().sum::<f64>() / HISTORY_LEN as f64)
                    .sqrt()
                    .max(PROB_FLOOR)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        self.probs = raw.into_iter().map(|r| r / total).collect();
        self.dirty = true;
    }
}
