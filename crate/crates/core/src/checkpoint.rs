//! Checkpoint files.
//!
//! Layout: magic `DLCK`, `version: u32 LE`, `header_len: u32 LE`, a UTF-8
//! header of `key = value` lines, `param_count: u64 LE`, then every
//! parameter as f64 LE in block declaration order. Header keys prefixed
//! `config.` carry the run configuration verbatim.

use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes};
use crate::schedule::ScheduleDescriptor;
use crate::toynet::{NetConfig, NetParams, ToyNet};
use crate::training::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ToyNet,
    pub schedule: ScheduleDescriptor,
    pub step: u64,
    /// True when the parameters are the EMA shadow.
    pub ema: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Run configuration, canonical form.
    pub run_config: KeyValues,
}

impl Checkpoint {
    pub fn new(
        net: ToyNet,
        schedule: ScheduleDescriptor,
        step: u64,
        ema: bool,
        run_config: KeyValues,
    ) -> Self {
        Checkpoint {
            net,
            schedule,
            step,
            ema,
            adam_beta1: ADAM_BETA1,
            adam_beta2: ADAM_BETA2,
            adam_eps: ADAM_EPS,
            run_config,
        }
    }

    /// Whether the checkpoint was trained on image-like data.
    pub fn is_image_like(&self) -> bool {
        self.run_config.get("dataset") == Some("image_file")
    }

    pub fn image_side(&self) -> Option<usize> {
        self.run_config
            .get("image_side")
            .and_then(|s| s.parse().ok())
    }

    fn header(&self) -> KeyValues {
        let c = &self.net.config;
        let mut kv = KeyValues::default();
        kv.push("input_dims", c.input_dims);
        kv.push(
            "hidden_widths",
            c.hidden_widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.push("embed_dim", c.embed_dim);
        kv.push("num_classes", c.num_classes);
        kv.push("width_multiplier", c.width_multiplier);
        kv.push("timesteps", c.timesteps);
        match self.schedule {
            ScheduleDescriptor::Cosine { steps, s } => {
                kv.push("schedule", "cosine");
                kv.push("schedule_steps", steps);
                kv.push("cosine_s", s);
            }
            ScheduleDescriptor::Linear {
                steps,
                beta_start,
                beta_end,
            } => {
                kv.push("schedule", "linear");
                kv.push("schedule_steps", steps);
                kv.push("beta_start", beta_start);
                kv.push("beta_end", beta_end);
            }
        }
        kv.push("step", self.step);
        kv.push("ema", self.ema);
        kv.push("adam_beta1", self.adam_beta1);
        kv.push("adam_beta2", self.adam_beta2);
        kv.push("adam_eps", self.adam_eps);
        for (k, v) in self.run_config.iter() {
            kv.push(format!("config.{k}"), v);
        }
        kv
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = self.header().to_text();
        let params = &self.net.params;
        let mut out = Vec::with_capacity(24 + header.len() + 8 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (missing DLCK magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12 + header_len;
        let header = bytes
            .get(12..header_end)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
        let kv = KeyValues::parse(header).map_err(|e| bad(e.to_string()))?;
        let field = |key: &str| -> Result<&str> {
            kv.get(key)
                .ok_or_else(|| Error::format(path, format!("header lacks `{key}`")))
        };
        fn num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format(path, format!("bad `{key}` value {v:?}")))
        }
        let hidden = field("hidden_widths")?
            .split(',')
            .map(|w| num::<usize>(path, "hidden_widths", w))
            .collect::<Result<Vec<_>>>()?;
        let mut config = NetConfig::new(
            num(path, "input_dims", field("input_dims")?)?,
            hidden,
            num(path, "timesteps", field("timesteps")?)?,
        );
        config.embed_dim = num(path, "embed_dim", field("embed_dim")?)?;
        config.num_classes = num(path, "num_classes", field("num_classes")?)?;
        config.width_multiplier = num(path, "width_multiplier", field("width_multiplier")?)?;
        let steps = num(path, "schedule_steps", field("schedule_steps")?)?;
        let schedule = match field("schedule")? {
            "cosine" => ScheduleDescriptor::Cosine {
                steps,
                s: num(path, "cosine_s", field("cosine_s")?)?,
            },
            "linear" => ScheduleDescriptor::Linear {
                steps,
                beta_start: num(path, "beta_start", field("beta_start")?)?,
                beta_end: num(path, "beta_end", field("beta_end")?)?,
            },
            other => return Err(bad(format!("unknown schedule `{other}`"))),
        };
        let mut run_config = KeyValues::default();
        for (k, v) in kv.iter() {
            if let Some(key) = k.strip_prefix("config.") {
                run_config.push(key, v);
            }
        }

        let body = &bytes[header_end..];
        if body.len() < 8 {
            return Err(bad("truncated parameter count".into()));
        }
        let count = u64::from_le_bytes(body[..8].try_into().expect("8 bytes")) as usize;
        let values = &body[8..];
        let mut params = NetParams::zeros(&config);
        if count != params.len() || values.len() != 8 * count {
            return Err(bad(format!(
                "expected {} parameters for this architecture, file holds {count} ({} bytes)",
                params.len(),
                values.len()
            )));
        }
        let mut it = values
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for block in &mut params.blocks {
            for v in &mut block.data {
                *v = it.next().expect("counted");
            }
        }
        let ckpt = Checkpoint {
            net: ToyNet::new(config, params).map_err(|e| bad(e.to_string()))?,
            schedule,
            step: num(path, "step", field("step")?)?,
            ema: num(path, "ema", field("ema")?)?,
            adam_beta1: num(path, "adam_beta1", field("adam_beta1")?)?,
            adam_beta2: num(path, "adam_beta2", field("adam_beta2")?)?,
            adam_eps: num(path, "adam_eps", field("adam_eps")?)?,
            run_config,
        };
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(path, &read_bytes(path)?)
    }
}
