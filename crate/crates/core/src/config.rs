//! Flat `key = value` run configuration.
//!
//! `#` starts a comment line. Unknown and repeated keys are errors. Every key
//! has a default, so an empty file is a valid (small 2-D) run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::objectives::{Decoder, LossConfig, Objective, VarianceMode};
use crate::schedule::{ScheduleDescriptor, COSINE_S};
use crate::toynet::NetConfig;
use crate::training::TrainConfig;

/// Ordered `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    i + 1
                )));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Typed reads that record which keys were consumed.
struct Reader<'a> {
    kv: &'a KeyValues,
    used: BTreeMap<&'a str, ()>,
}

impl<'a> Reader<'a> {
    fn new(kv: &'a KeyValues) -> Self {
        Reader {
            kv,
            used: BTreeMap::new(),
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a str> {
        self.used.insert(key, ());
        self.kv.get(key)
    }

    fn opt<T: FromStr>(&mut self, key: &'static str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::Config(format!("`{key}`: cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, key: &'static str, sep: char) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(sep)
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("`{key}`: cannot parse {p:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<()> {
        for (k, _) in self.kv.iter() {
            if !self.used.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

fn parse_flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true/false, got {v:?}"
        ))),
    }
}

/// Everything a `train` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleDescriptor,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut r = Reader::new(&kv);

        let steps: usize = r.or("diffusion_steps", 1000)?;
        let schedule = match r.or("schedule", "cosine".to_string())?.as_str() {
            "cosine" => {
                if r.raw("beta_start").is_some() || r.raw("beta_end").is_some() {
                    return Err(Error::Config(
                        "beta_start/beta_end apply to the linear schedule".into(),
                    ));
                }
                ScheduleDescriptor::Cosine {
                    steps,
                    s: r.or("cosine_s", COSINE_S)?,
                }
            }
            "linear" => {
                if r.raw("cosine_s").is_some() {
                    return Err(Error::Config(
                        "cosine_s applies to the cosine schedule".into(),
                    ));
                }
                let default = ScheduleDescriptor::linear_rescaled(steps);
                let (start, end) = match default {
                    ScheduleDescriptor::Linear {
                        beta_start,
                        beta_end,
                        ..
                    } => (beta_start, beta_end),
                    _ => unreachable!(),
                };
                ScheduleDescriptor::Linear {
                    steps,
                    beta_start: r.or("beta_start", start)?,
                    beta_end: r.or("beta_end", end)?,
                }
            }
            other => return Err(Error::Config(format!("unknown schedule `{other}`"))),
        };

        let seed: u64 = r.or("seed", 0)?;
        let n_train = r.or("n_train", 10_000)?;
        let n_eval = r.or("n_eval", 1000)?;
        let data_seed = r.or("data_seed", seed)?;
        let kind = match r.or("dataset", "analytic_gaussian".to_string())?.as_str() {
            "analytic_gaussian" => DatasetKind::AnalyticGaussian {
                mu0: r.or("mu0", 0.0)?,
                var0: r.or("var0", 1.0)?,
                dims: r.or("dims", 2)?,
            },
            "gaussian_mixture" => {
                let var = r.or("mixture_var", 0.01)?;
                let centers: Option<Vec<String>> = r.list("mixture_centers", ';')?;
                let components: Option<usize> = r.opt("mixture_components")?;
                let radius: Option<f64> = r.opt("mixture_radius")?;
                let weights: Option<Vec<f64>> = r.list("mixture_weights", ',')?;
                match centers {
                    Some(c) => {
                        if components.is_some() || radius.is_some() {
                            return Err(Error::Config(
                                "give either mixture_centers or mixture_components/radius".into(),
                            ));
                        }
                        let centers = c
                            .iter()
                            .map(|p| {
                                p.split(',')
                                    .map(|x| {
                                        x.trim().parse::<f64>().map_err(|_| {
                                            Error::Config(format!("`mixture_centers`: {p:?}"))
                                        })
                                    })
                                    .collect::<Result<Vec<f64>>>()
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let k = centers.len();
                        DatasetKind::GaussianMixture {
                            centers,
                            weights: weights.unwrap_or_else(|| vec![1.0 / k as f64; k]),
                            var,
                        }
                    }
                    None => {
                        let ring = DatasetKind::ring_mixture(
                            components.unwrap_or(8),
                            radius.unwrap_or(2.0),
                            var,
                        );
                        match (ring, weights) {
                            (DatasetKind::GaussianMixture { centers, var, .. }, Some(w)) => {
                                DatasetKind::GaussianMixture {
                                    centers,
                                    weights: w,
                                    var,
                                }
                            }
                            (ring, _) => ring,
                        }
                    }
                }
            }
            "checkerboard" => DatasetKind::Checkerboard,
            "image_file" => DatasetKind::ImageFile {
                path: PathBuf::from(
                    r.raw("image_path")
                        .ok_or_else(|| Error::Config("image_file needs image_path".into()))?,
                ),
                side: r.or("image_side", 8)?,
                channels: r.or("image_channels", 1)?,
            },
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        };
        let data = DatasetSpec {
            kind,
            n_train,
            n_eval,
            seed: data_seed,
        };

        let hidden: Vec<usize> = r.list("hidden", ',')?.unwrap_or_else(|| vec![64, 64]);
        let mut net = NetConfig::new(input_dims(&data.kind), hidden, steps);
        net.embed_dim = r.or("embed_dim", net.embed_dim)?;
        net.num_classes = r.or("num_classes", 0)?;
        net.width_multiplier = r.or("width_multiplier", 1.0)?;

        let objective: Objective = r.or("objective", Objective::Hybrid)?;
        let mut loss = LossConfig::new(objective);
        loss.lambda = r.or("lambda", loss.lambda)?;
        if let Some(v) = r.raw("stop_grad_mean") {
            loss.stop_grad_mean = parse_flag("stop_grad_mean", v)?;
        }
        loss.variance = r.or::<VarianceMode>("variance", loss.variance)?;
        let default_decoder = if data.kind.is_image() {
            Decoder::Discretized
        } else {
            Decoder::Continuous
        };
        loss.decoder = r.or::<Decoder>("decoder", default_decoder)?;

        let mut train = TrainConfig::new(loss);
        train.learning_rate = r.or("learning_rate", train.learning_rate)?;
        train.batch_size = r.or("batch_size", train.batch_size)?;
        train.ema_rate = r.or("ema_rate", train.ema_rate)?;
        train.total_steps = r.or("total_steps", train.total_steps)?;
        train.seed = seed;
        if let Some(v) = r.raw("importance_sampling") {
            train.importance_sampling = parse_flag("importance_sampling", v)?;
        }
        train.grad_clip = match r.raw("grad_clip") {
            None | Some("none") | Some("off") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("`grad_clip`: cannot parse {v:?}")))?,
            ),
        };

        let checkpoint_every = r.or("checkpoint_every", 0)?;
        let log_every = r.or("log_every", 100)?;
        r.finish()?;

        let cfg = RunConfig {
            schedule,
            net,
            train,
            data,
            checkpoint_every,
            log_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.schedule.build().map_err(wrap)?;
        self.net.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.net.is_conditional() {
            match &self.data.kind {
                DatasetKind::GaussianMixture { weights, .. }
                    if weights.len() == self.net.num_classes => {}
                _ => {
                    return Err(Error::Config(
                        "num_classes > 0 needs a gaussian_mixture with that many components".into(),
                    ))
                }
            }
        }
        if self.train.loss.decoder == Decoder::Discretized && !self.data.kind.is_image() {
            return Err(Error::Config(
                "the discretized decoder needs image_file data".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical form; parses back to an equal config.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        match self.schedule {
            ScheduleDescriptor::Cosine { steps, s } => {
                kv.push("schedule", "cosine");
                kv.push("diffusion_steps", steps);
                kv.push("cosine_s", s);
            }
            ScheduleDescriptor::Linear {
                steps,
                beta_start,
                beta_end,
            } => {
                kv.push("schedule", "linear");
                kv.push("diffusion_steps", steps);
                kv.push("beta_start", beta_start);
                kv.push("beta_end", beta_end);
            }
        }
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        kv.push("hidden", join(&self.net.hidden_widths));
        kv.push("embed_dim", self.net.embed_dim);
        kv.push("num_classes", self.net.num_classes);
        kv.push("width_multiplier", self.net.width_multiplier);
        let t = &self.train;
        kv.push("objective", t.loss.objective);
        kv.push("lambda", t.loss.lambda);
        kv.push("stop_grad_mean", t.loss.stop_grad_mean);
        kv.push("variance", t.loss.variance);
        kv.push("decoder", t.loss.decoder);
        kv.push("learning_rate", t.learning_rate);
        kv.push("batch_size", t.batch_size);
        kv.push("ema_rate", t.ema_rate);
        kv.push("total_steps", t.total_steps);
        kv.push("importance_sampling", t.importance_sampling);
        kv.push(
            "grad_clip",
            t.grad_clip.map_or("none".to_string(), |c| c.to_string()),
        );
        kv.push("seed", t.seed);
        match &self.data.kind {
            DatasetKind::AnalyticGaussian { mu0, var0, dims } => {
                kv.push("dataset", "analytic_gaussian");
                kv.push("mu0", mu0);
                kv.push("var0", var0);
                kv.push("dims", dims);
            }
            DatasetKind::GaussianMixture {
                centers,
                weights,
                var,
            } => {
                kv.push("dataset", "gaussian_mixture");
                let centers: Vec<String> = centers
                    .iter()
                    .map(|c| c.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
                    .collect();
                kv.push("mixture_centers", centers.join(";"));
                kv.push(
                    "mixture_weights",
                    weights
                        .iter()
                        .map(f64::to_string)
                        .collect::<Vec<_>>()
                        .join(","),
                );
                kv.push("mixture_var", var);
            }
            DatasetKind::Checkerboard => kv.push("dataset", "checkerboard"),
            DatasetKind::ImageFile {
                path,
                side,
                channels,
            } => {
                kv.push("dataset", "image_file");
                kv.push("image_path", path.display());
                kv.push("image_side", side);
                kv.push("image_channels", channels);
            }
        }
        kv.push("n_train", self.data.n_train);
        kv.push("n_eval", self.data.n_eval);
        kv.push("data_seed", self.data.seed);
        kv.push("checkpoint_every", self.checkpoint_every);
        kv.push("log_every", self.log_every);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_key_values().to_text()
    }

    /// Override both the training and data seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }
}

fn input_dims(kind: &DatasetKind) -> usize {
    match kind {
        DatasetKind::AnalyticGaussian { dims, .. } => *dims,
        DatasetKind::GaussianMixture { centers, .. } => centers.first().map_or(0, Vec::len),
        DatasetKind::Checkerboard => 2,
        DatasetKind::ImageFile { side, .. } => side * side,
    }
}
