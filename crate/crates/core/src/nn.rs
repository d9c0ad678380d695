//! Differentiable layer primitives composed from graph operations.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{LayerParams, ParameterStore};
use crate::rng::RngHandle;
use crate::tensor::{Float, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Variance floor shared by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch renormalization correction bounds: `r` in `[1/r_max, r_max]`, `d` in `[-d_max, d_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenormLimits {
    pub r_max: f64,
    pub d_max: f64,
}

impl RenormLimits {
    /// `r_max = 1, d_max = 0`: plain batch normalization.
    pub const BATCH_NORM: RenormLimits = RenormLimits { r_max: 1.0, d_max: 0.0 };
    pub const FINAL: RenormLimits = RenormLimits { r_max: 3.0, d_max: 5.0 };

    /// Linear ramp from batch-norm bounds to `FINAL` over the first quarter of training.
    pub fn scheduled(step: u64, total_steps: u64) -> Self {
        let ramp = (total_steps as f64 * 0.25).max(1.0);
        let t = (step as f64 / ramp).min(1.0);
        RenormLimits {
            r_max: 1.0 + t * (Self::FINAL.r_max - 1.0),
            d_max: t * Self::FINAL.d_max,
        }
    }
}

/// Per-forward state: mode, dropout randomness and collected running-stat updates.
pub struct Ctx<T: Float> {
    pub mode: Mode,
    pub renorm: RenormLimits,
    /// Exponential-moving-average rate for running statistics.
    pub momentum: f64,
    rng: RngHandle,
    updates: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Ctx<T> {
    pub fn train(rng: RngHandle, renorm: RenormLimits) -> Self {
        Ctx {
            mode: Mode::Train,
            renorm,
            momentum: 0.01,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn infer() -> Self {
        Ctx {
            mode: Mode::Infer,
            renorm: RenormLimits::BATCH_NORM,
            momentum: 0.0,
            rng: crate::rng::stream(0, "infer"),
            updates: Vec::new(),
        }
    }

    pub fn rng(&mut self) -> &mut RngHandle {
        &mut self.rng
    }

    pub fn into_rng(self) -> RngHandle {
        self.rng
    }

    /// Drains the `(buffer name, new value)` pairs recorded in train mode.
    pub fn take_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }
}

pub fn leaky_relu<'g, T: Float>(x: Var<'g, T>) -> Var<'g, T> {
    x.leaky_relu(T::of(LEAKY_SLOPE))
}

fn add_channel_bias<'g, T: Float>(y: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
    match bias {
        Some(b) => y.channel_affine(None, Some(b)),
        None => y,
    }
}

/// Same-padded convolution; output extent `ceil(input / stride)`.
pub fn conv2d<'g, T: Float>(x: Var<'g, T>, p: &LayerParams<'g, T>, stride: usize) -> Result<Var<'g, T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
        return Err(Error::shape(
            "conv2d",
            format!("{}: input {xs:?}, weight {ws:?}", p.name),
        ));
    }
    if !matches!(ws[2], 1 | 3) || !matches!(stride, 1 | 2) {
        return Err(Error::shape(
            "conv2d",
            format!("{}: kernel {} stride {stride} unsupported", p.name, ws[2]),
        ));
    }
    Ok(add_channel_bias(x.conv2d(p.weight, stride), p.bias))
}

/// Transposed convolution scaling the grid by `upscale` (the fractional-stride
/// deconvolution). Weight layout `[c_in, c_out, k, k]`; it is the adjoint of a
/// stride-`upscale` [`conv2d`] sharing the same kernel.
pub fn deconv2d<'g, T: Float>(x: Var<'g, T>, p: &LayerParams<'g, T>, upscale: usize) -> Result<Var<'g, T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || !matches!(upscale, 1 | 2) {
        return Err(Error::shape(
            "deconv2d",
            format!("{}: input {xs:?}, weight {ws:?}, upscale {upscale}", p.name),
        ));
    }
    let out = (xs[2] * upscale, xs[3] * upscale);
    Ok(add_channel_bias(x.conv2d_transpose(p.weight, upscale, out), p.bias))
}

/// Batch renormalization over `[N, C, H, W]` with per-channel affine.
///
/// Train mode normalizes with batch statistics, corrected toward the running
/// statistics by the clipped factors `r` and `d` (held constant in the
/// backward pass), and records EMA updates of the running statistics in `ctx`.
pub fn batch_renorm<'g, T: Float>(x: Var<'g, T>, p: &LayerParams<'g, T>, ctx: &mut Ctx<T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (running_mean, running_var) = p
        .running_stats
        .clone()
        .ok_or_else(|| Error::Config(format!("{} has no running statistics", p.name)))?;
    let c = shape[1];
    if shape.len() != 4 || p.weight.shape() != [c] || running_mean.shape() != [c] {
        return Err(Error::shape("batch_renorm", format!("{}: input {shape:?}", p.name)));
    }
    let g = x.graph();
    let eps = T::of(NORM_EPS);
    let (base, scale, shift) = match ctx.mode {
        Mode::Train => {
            if shape[0] < 2 {
                return Err(Error::shape("batch_renorm", "train mode needs a batch of at least 2"));
            }
            let m = T::of(1.0 / (shape[0] * shape[2] * shape[3]) as f64);
            let mean = x.sum_per_channel().scale(m);
            let centered = x.channel_affine(None, Some(mean.neg()));
            let var = centered.sum_prod_per_channel(centered).scale(m);
            let inv_std = var.affine(T::one(), eps).powf(T::of(-0.5));

            let mean_v = mean.value();
            let var_v = var.value();
            let (r_max, d_max) = (T::of(ctx.renorm.r_max), T::of(ctx.renorm.d_max));
            let mut r = Vec::with_capacity(c);
            let mut d = Vec::with_capacity(c);
            for i in 0..c {
                let sigma_b = (var_v.data()[i] + eps).sqrt();
                let sigma_r = (running_var.data()[i] + eps).sqrt();
                r.push((sigma_b / sigma_r).max(T::one() / r_max).min(r_max));
                d.push(
                    ((mean_v.data()[i] - running_mean.data()[i]) / sigma_r)
                        .max(-d_max)
                        .min(d_max),
                );
            }
            let r = g.constant(Tensor::new(&[c], r)?);
            let d = g.constant(Tensor::new(&[c], d)?);

            let mom = T::of(ctx.momentum);
            let new_mean = running_mean.zip_map(&mean_v, |run, b| run + mom * (b - run));
            let new_var = running_var.zip_map(&var_v, |run, b| run + mom * (b - run));
            ctx.updates.push((format!("{}.running_mean", p.name), new_mean));
            ctx.updates.push((format!("{}.running_var", p.name), new_var));

            // (x - mean) * inv_std * r + d, then the affine, folded into one pass.
            let scale = inv_std * r * p.weight;
            let shift = d * p.weight;
            let shift = match p.bias {
                Some(b) => shift + b,
                None => shift,
            };
            (centered, scale, shift)
        }
        Mode::Infer => {
            let inv_std = running_var.map(|v| T::one() / (v + eps).sqrt());
            let offset = running_mean.zip_map(&inv_std, |m, s| -m * s);
            let scale = g.constant(inv_std) * p.weight;
            let shift = g.constant(offset) * p.weight;
            let shift = match p.bias {
                Some(b) => shift + b,
                None => shift,
            };
            (x, scale, shift)
        }
    };
    Ok(base.channel_affine(Some(scale), Some(shift)))
}

/// Per-sample normalization over every non-batch axis, then per-channel affine.
pub fn layer_norm<'g, T: Float>(x: Var<'g, T>, p: &LayerParams<'g, T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    if shape.len() < 2 || p.weight.shape() != [shape[1]] {
        return Err(Error::shape("layer_norm", format!("{}: input {shape:?}", p.name)));
    }
    let per_sample: usize = shape[1..].iter().product();
    let inv_n = T::of(1.0 / per_sample as f64);
    let mean = x.sum_per_sample().scale(inv_n);
    let centered = x.sample_affine(None, Some(mean.neg()));
    let var = centered.sum_prod_per_sample(centered).scale(inv_n);
    let inv_std = var.affine(T::one(), T::of(NORM_EPS)).powf(T::of(-0.5));
    let normalized = centered.sample_affine(Some(inv_std), None);
    Ok(normalized.channel_affine(Some(p.weight), p.bias))
}

/// Inverted dropout: train mode zeroes each element with probability `rate`
/// and scales survivors by `1 / (1 - rate)`; infer mode is the identity.
pub fn dropout<'g, T: Float>(x: Var<'g, T>, rate: f64, ctx: &mut Ctx<T>) -> Result<Var<'g, T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if ctx.mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = T::of(1.0 / (1.0 - rate));
    let rng = ctx.rng();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
    Ok(x.mul_mask(Rc::new(mask)))
}

/// `x [N, K] * W [K, M] + b`.
pub fn linear<'g, T: Float>(x: Var<'g, T>, p: &LayerParams<'g, T>) -> Result<Var<'g, T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape(
            "linear",
            format!("{}: input {xs:?}, weight {ws:?}", p.name),
        ));
    }
    let y = x.matmul(p.weight);
    Ok(match p.bias {
        Some(b) => {
            let shape = y.shape();
            y + b.expand(shape[0], 1, &shape)
        }
        None => y,
    })
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn he_normal<T: Float>(shape: &[usize], fan_in: usize, rng: &mut RngHandle) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
}

pub fn init_conv<T: Float>(
    store: &mut ParameterStore<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut RngHandle,
) {
    store.insert_param(
        format!("{name}.weight"),
        he_normal(&[c_out, c_in, k, k], c_in * k * k, rng),
    );
    store.insert_param(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

/// Transposed-convolution weight `[c_in, c_out, k, k]`.
pub fn init_deconv<T: Float>(
    store: &mut ParameterStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    upscale: usize,
    rng: &mut RngHandle,
) {
    let fan_in = (c_in * k * k) / (upscale * upscale);
    store.insert_param(format!("{name}.weight"), he_normal(&[c_in, c_out, k, k], fan_in, rng));
    store.insert_param(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

pub fn init_linear<T: Float>(
    store: &mut ParameterStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngHandle,
) {
    store.insert_param(format!("{name}.weight"), he_normal(&[fan_in, fan_out], fan_in, rng));
    store.insert_param(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

/// Unit scale, zero shift; `running` adds batch-renorm running statistics.
pub fn init_norm<T: Float>(store: &mut ParameterStore<T>, name: &str, channels: usize, running: bool) {
    store.insert_param(format!("{name}.weight"), Tensor::full(&[channels], T::one()));
    store.insert_param(format!("{name}.bias"), Tensor::zeros(&[channels]));
    if running {
        store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
    }
}
