//! A small fully-connected denoiser with manual reverse-mode gradients.
//!
//! Layout per hidden layer `l`:
//!
//! ```text
//! a_l = W_l h_l + b_l
//! z_l = a_l * (1 + S_l c + s_l) + (B_l c + o_l)
//! h_{l+1} = silu(z_l)
//! ```
//!
//! where `c` is the conditioning vector (time embedding plus the optional
//! class embedding) and `h_0 = [x_t, c]`. Two linear heads read `h_L`: one
//! predicts the noise, the other the raw variance coefficient.

use std::f64::consts::TAU;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Architecture of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_dims: usize,
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    /// 0 means unconditional.
    pub num_classes: usize,
    pub width_multiplier: f64,
    /// Length of the diffusion process the net is conditioned on; sets the
    /// longest embedding period to `10 * timesteps`.
    pub timesteps: usize,
}

impl NetConfig {
    pub fn new(input_dims: usize, hidden_widths: Vec<usize>, timesteps: usize) -> Self {
        NetConfig {
            input_dims,
            hidden_widths,
            embed_dim: 16,
            num_classes: 0,
            width_multiplier: 1.0,
            timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims == 0 {
            return Err(Error::invalid("input_dims must be >= 1"));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::invalid(
                "need at least one hidden layer, all widths >= 1",
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            )));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::invalid("width_multiplier must be > 0"));
        }
        if self.timesteps == 0 {
            return Err(Error::invalid("timesteps must be >= 1"));
        }
        Ok(())
    }

    /// Hidden widths after applying the width multiplier.
    pub fn effective_widths(&self) -> Vec<usize> {
        self.hidden_widths
            .iter()
            .map(|&w| ((w as f64 * self.width_multiplier).round() as usize).max(1))
            .collect()
    }

    pub fn max_period(&self) -> f64 {
        10.0 * self.timesteps as f64
    }

    pub fn is_conditional(&self) -> bool {
        self.num_classes > 0
    }

    /// Names and shapes of every parameter block, in declaration order.
    pub fn block_shapes(&self) -> Vec<(String, usize, usize)> {
        let widths = self.effective_widths();
        let e = self.embed_dim;
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dims + e;
        for (l, &w) in widths.iter().enumerate() {
            shapes.push((format!("hidden.{l}.weight"), w, fan_in));
            shapes.push((format!("hidden.{l}.bias"), 1, w));
            shapes.push((format!("hidden.{l}.scale.weight"), w, e));
            shapes.push((format!("hidden.{l}.scale.bias"), 1, w));
            shapes.push((format!("hidden.{l}.shift.weight"), w, e));
            shapes.push((format!("hidden.{l}.shift.bias"), 1, w));
            fan_in = w;
        }
        let d = self.input_dims;
        shapes.push(("eps_head.weight".into(), d, fan_in));
        shapes.push(("eps_head.bias".into(), 1, d));
        shapes.push(("v_head.weight".into(), d, fan_in));
        shapes.push(("v_head.bias".into(), 1, d));
        if self.is_conditional() {
            shapes.push(("class_embed".into(), self.num_classes, e));
        }
        shapes
    }
}

/// One named, row-major parameter matrix (biases are `1 x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &self.data).expect("block shape")
    }

    pub fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut self.data).expect("block shape")
    }

    fn row_vector(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }
}

/// Flat parameter set, also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub blocks: Vec<ParamBlock>,
}

impl NetParams {
    pub fn zeros(config: &NetConfig) -> Self {
        NetParams {
            blocks: config
                .block_shapes()
                .into_iter()
                .map(|(name, rows, cols)| ParamBlock {
                    name,
                    rows,
                    cols,
                    data: vec![0.0; rows * cols],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    rows: b.rows,
                    cols: b.cols,
                    data: vec![0.0; b.data.len()],
                })
                .collect(),
        }
    }

    /// Training initialization: hidden weights `N(0, 1/fan_in)`, everything
    /// else zero. Both heads start at zero.
    pub fn init<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(config);
        for block in &mut params.blocks {
            let is_hidden_weight = block.name.starts_with("hidden.")
                && block.name.ends_with(".weight")
                && !block.name.contains(".scale.")
                && !block.name.contains(".shift.");
            if is_hidden_weight {
                fill_normal(block, 1.0 / (block.cols as f64).sqrt(), rng);
            } else if block.name == "class_embed" {
                fill_normal(block, 1.0, rng);
            }
        }
        params
    }

    /// Every block random, heads included; for gradient checks.
    pub fn random<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(config);
        for block in &mut params.blocks {
            let scale = if block.rows == 1 {
                0.1
            } else {
                1.0 / (block.cols as f64).sqrt()
            };
            fill_normal(block, scale, rng);
        }
        params
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.data.iter().copied())
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for b in &self.blocks {
            if index < b.data.len() {
                return b.data[index];
            }
            index -= b.data.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for b in &mut self.blocks {
            if index < b.data.len() {
                b.data[index] = value;
                return;
            }
            index -= b.data.len();
        }
        panic!("parameter index out of range");
    }

    /// Name of the block holding flat index `index`.
    pub fn block_name_of(&self, mut index: usize) -> &str {
        for b in &self.blocks {
            if index < b.data.len() {
                return &b.name;
            }
            index -= b.data.len();
        }
        panic!("parameter index out of range");
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum()
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &NetParams, factor: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.data
                .iter_mut()
                .zip(&b.data)
                .for_each(|(x, y)| *x += factor * y);
        }
    }

    pub fn same_layout(&self, other: &NetParams) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols)
    }
}

fn fill_normal<R: Rng + ?Sized>(block: &mut ParamBlock, std: f64, rng: &mut R) {
    for x in &mut block.data {
        let z: f64 = StandardNormal.sample(rng);
        *x = std * z;
    }
}

/// Interleaved `[sin, cos]` pairs of `t` at periods spaced geometrically from
/// 1 to `max_period`.
pub fn time_embed(t: f64, embed_dim: usize, max_period: f64) -> Vec<f64> {
    let half = embed_dim / 2;
    let mut out = Vec::with_capacity(embed_dim);
    for k in 0..half {
        let period = if half == 1 {
            max_period
        } else {
            max_period.powf(k as f64 / (half - 1) as f64)
        };
        let angle = TAU * t / period;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// `(eps_pred, v)`, both `(batch, dims)`. `v` is the raw head output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub eps: Array2<f64>,
    pub v: Array2<f64>,
}

impl ModelOutput {
    pub fn zeros(batch: usize, dims: usize) -> Self {
        ModelOutput {
            eps: Array2::zeros((batch, dims)),
            v: Array2::zeros((batch, dims)),
        }
    }
}

/// Intermediate values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cond: Array2<f64>,
    /// `h_l` for `l = 0..=L`.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    scale: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    labels: Option<Vec<usize>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// A denoiser: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub config: NetConfig,
    pub params: NetParams,
}

impl ToyNet {
    pub fn new(config: NetConfig, params: NetParams) -> Result<Self> {
        config.validate()?;
        if !params.same_layout(&NetParams::zeros(&config)) {
            return Err(Error::shape("parameters do not match the network config"));
        }
        Ok(ToyNet { config, params })
    }

    fn p(&self, name: &str) -> &ParamBlock {
        self.params.block(name).expect("declared block")
    }

    fn conditioning(&self, t: &[usize], labels: Option<&[usize]>) -> Result<Array2<f64>> {
        let e = self.config.embed_dim;
        let max_period = self.config.max_period();
        let mut cond = Array2::zeros((t.len(), e));
        for (i, &ti) in t.iter().enumerate() {
            let emb = time_embed(ti as f64, e, max_period);
            cond.row_mut(i).assign(&ArrayView1::from(&emb[..]));
        }
        match (self.config.is_conditional(), labels) {
            (true, Some(labels)) => {
                if labels.len() != t.len() {
                    return Err(Error::shape("one class label per row required"));
                }
                let table = self.p("class_embed").view();
                for (i, &c) in labels.iter().enumerate() {
                    if c >= self.config.num_classes {
                        return Err(Error::invalid(format!(
                            "class label {c} >= num_classes {}",
                            self.config.num_classes
                        )));
                    }
                    let mut row = cond.row_mut(i);
                    row += &table.row(c);
                }
            }
            (false, None) => {}
            (true, None) => return Err(Error::invalid("conditional model needs class labels")),
            (false, Some(_)) => {
                return Err(Error::invalid("unconditional model given class labels"))
            }
        }
        Ok(cond)
    }

    pub fn forward(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        self.forward_cached(xt, t, labels).map(|(out, _)| out)
    }

    pub fn forward_cached(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<(ModelOutput, ForwardCache)> {
        if xt.ncols() != self.config.input_dims {
            return Err(Error::shape(format!(
                "expected {} input dims, got {}",
                self.config.input_dims,
                xt.ncols()
            )));
        }
        if t.len() != xt.nrows() {
            return Err(Error::shape("one timestep per row required"));
        }
        let cond = self.conditioning(t, labels)?;
        let mut h = concatenate![Axis(1), xt, cond.view()];
        let layers = self.config.hidden_widths.len();
        let mut inputs = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers);
        let mut scales = Vec::with_capacity(layers);
        let mut zs = Vec::with_capacity(layers);
        for l in 0..layers {
            let a = h.dot(&self.p(&format!("hidden.{l}.weight")).view().t())
                + self.p(&format!("hidden.{l}.bias")).row_vector();
            let scale = cond.dot(&self.p(&format!("hidden.{l}.scale.weight")).view().t())
                + self.p(&format!("hidden.{l}.scale.bias")).row_vector();
            let shift = cond.dot(&self.p(&format!("hidden.{l}.shift.weight")).view().t())
                + self.p(&format!("hidden.{l}.shift.bias")).row_vector();
            let z = &a * &scale.mapv(|s| s + 1.0) + &shift;
            let next = z.mapv(silu);
            inputs.push(h);
            pre.push(a);
            scales.push(scale);
            zs.push(z);
            h = next;
        }
        let eps =
            h.dot(&self.p("eps_head.weight").view().t()) + self.p("eps_head.bias").row_vector();
        let v = h.dot(&self.p("v_head.weight").view().t()) + self.p("v_head.bias").row_vector();
        inputs.push(h);
        Ok((
            ModelOutput { eps, v },
            ForwardCache {
                cond,
                inputs,
                pre,
                scale: scales,
                z: zs,
                labels: labels.map(|l| l.to_vec()),
            },
        ))
    }

    /// Parameter gradients of `sum(grad_eps * eps) + sum(grad_v * v)`.
    pub fn backward(&self, cache: &ForwardCache, grads: &ModelOutput) -> Result<NetParams> {
        let batch = cache.cond.nrows();
        let d = self.config.input_dims;
        if grads.eps.dim() != (batch, d) || grads.v.dim() != (batch, d) {
            return Err(Error::shape("output gradients must match the model output"));
        }
        let mut out = self.params.zeros_like();
        let layers = self.config.hidden_widths.len();
        let h_last = &cache.inputs[layers];

        set_block(&mut out, "eps_head.weight", grads.eps.t().dot(h_last));
        set_bias(&mut out, "eps_head.bias", grads.eps.sum_axis(Axis(0)));
        set_block(&mut out, "v_head.weight", grads.v.t().dot(h_last));
        set_bias(&mut out, "v_head.bias", grads.v.sum_axis(Axis(0)));

        let mut dh = grads.eps.dot(&self.p("eps_head.weight").view())
            + grads.v.dot(&self.p("v_head.weight").view());
        let mut dcond = Array2::<f64>::zeros(cache.cond.raw_dim());
        for l in (0..layers).rev() {
            let z = &cache.z[l];
            let dz = &dh * &z.mapv(silu_grad);
            let da = &dz * &cache.scale[l].mapv(|s| s + 1.0);
            let dscale = &dz * &cache.pre[l];
            let w = format!("hidden.{l}");
            set_block(
                &mut out,
                &format!("{w}.weight"),
                da.t().dot(&cache.inputs[l]),
            );
            set_bias(&mut out, &format!("{w}.bias"), da.sum_axis(Axis(0)));
            set_block(
                &mut out,
                &format!("{w}.scale.weight"),
                dscale.t().dot(&cache.cond),
            );
            set_bias(
                &mut out,
                &format!("{w}.scale.bias"),
                dscale.sum_axis(Axis(0)),
            );
            set_block(
                &mut out,
                &format!("{w}.shift.weight"),
                dz.t().dot(&cache.cond),
            );
            set_bias(&mut out, &format!("{w}.shift.bias"), dz.sum_axis(Axis(0)));
            dcond = dcond
                + dscale.dot(&self.p(&format!("{w}.scale.weight")).view())
                + dz.dot(&self.p(&format!("{w}.shift.weight")).view());
            dh = da.dot(&self.p(&format!("{w}.weight")).view());
        }
        if let Some(labels) = &cache.labels {
            // h_0 = [x, cond]; the cond columns feed back into the class table.
            dcond += &dh.slice(s![.., d..]);
            let table = out.block_mut("class_embed").expect("declared block");
            let mut view = table.view_mut();
            for (i, &c) in labels.iter().enumerate() {
                let mut row = view.row_mut(c);
                row += &dcond.row(i);
            }
        }
        Ok(out)
    }
}

fn set_block(params: &mut NetParams, name: &str, value: Array2<f64>) {
    let block = params.block_mut(name).expect("declared block");
    block.view_mut().assign(&value);
}

fn set_bias(params: &mut NetParams, name: &str, value: Array1<f64>) {
    let block = params.block_mut(name).expect("declared block");
    block
        .data
        .copy_from_slice(value.as_slice().expect("contiguous"));
}
