//! Residual U-Net generator split into an encoder and a decoder.
//!
//! Down block `d` runs four 3x3 conv / batch-renorm / leaky-ReLU layers with a
//! residual path at `base * 2^d` channels, hands its pre-scaling output to the
//! decoder through a 1x1 skip convolution, then halves the grid with a stride-2
//! convolution that doubles the channels. The decoder mirrors this: each up
//! block doubles the grid with a transposed convolution, concatenates the
//! mirrored skip and runs its own residual stack. A linear projection of the
//! Gaussian latent is broadcast over the bottleneck grid and concatenated with
//! the encoder output. A sigmoid head produces the 3-channel image.

use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{concat_channels, Var};
use crate::nn::{self, Ctx};
use crate::params::{Bound, ParameterStore};
use crate::rng::RngHandle;
use crate::tensor::{Float, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
const CONVS_PER_BLOCK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Square spatial extent of input and output images (a power of two).
    pub input_size: usize,
    pub base_filters: usize,
    /// Total blocks; half encode, half decode.
    pub num_blocks: usize,
    pub latent_dim: usize,
    /// Channels of the broadcast latent projection.
    pub latent_channels: usize,
    pub dropout_rate: f64,
    /// Concatenate a one-hot class map at the bottleneck.
    pub class_conditioning: bool,
    pub num_classes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_size: 64,
            base_filters: 32,
            num_blocks: 8,
            latent_dim: 128,
            latent_channels: 64,
            dropout_rate: 0.25,
            class_conditioning: false,
            num_classes: 2,
        }
    }
}

impl GeneratorConfig {
    /// Full-resolution configuration (256 x 256).
    pub fn full_scale() -> Self {
        GeneratorConfig {
            input_size: 256,
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.num_blocks / 2
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_filters << self.depth()
    }

    /// Working channels of down block `d` (and of the up block that consumes its skip).
    pub fn block_channels(&self, d: usize) -> usize {
        self.base_filters << d
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.input_size.is_power_of_two() {
            problems.push(format!("input_size {} is not a power of two", self.input_size));
        }
        if self.num_blocks == 0 || !self.num_blocks.is_multiple_of(2) {
            problems.push(format!("num_blocks {} must be even and positive", self.num_blocks));
        } else if self.depth() >= usize::BITS as usize || (self.input_size >> self.depth()) < 2 {
            problems.push(format!(
                "input_size {} is too small for {} blocks (bottleneck must be at least 2x2)",
                self.input_size, self.num_blocks
            ));
        }
        if self.base_filters == 0 || self.latent_dim == 0 || self.latent_channels == 0 {
            problems.push("filter, latent and latent-channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.class_conditioning && self.num_classes < 2 {
            problems.push("class conditioning needs at least 2 classes".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn bottleneck_input_channels(&self) -> usize {
        self.bottleneck_channels() + self.latent_channels + if self.class_conditioning { self.num_classes } else { 0 }
    }
}

/// Encoder feature maps handed to the decoder, finest first.
pub struct SkipState<'g, T: Float> {
    pub maps: Vec<Var<'g, T>>,
}

/// Gaussian draw and its bottleneck projection.
pub struct LatentCode<'g, T: Float> {
    pub z: Tensor<T>,
    pub projected: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Generator { config })
    }

    pub fn init_params<T: Float>(&self, rng: &mut RngHandle) -> ParameterStore<T> {
        let cfg = &self.config;
        let mut s = ParameterStore::new();
        let mut c_in = IMAGE_CHANNELS;
        for d in 0..cfg.depth() {
            let c = cfg.block_channels(d);
            init_res_stack(&mut s, &format!("down{d}"), c_in, c, rng);
            nn::init_conv(&mut s, &format!("skip{d}"), c, c, 1, rng);
            nn::init_conv(&mut s, &format!("down{d}.scale"), 2 * c, c, 3, rng);
            nn::init_norm(&mut s, &format!("down{d}.scale_norm"), 2 * c, true);
            c_in = 2 * c;
        }
        nn::init_linear(&mut s, "latent.proj", cfg.latent_dim, cfg.latent_channels, rng);
        let mut c_prev = cfg.bottleneck_input_channels();
        for u in 0..cfg.depth() {
            let c = cfg.block_channels(cfg.depth() - 1 - u);
            nn::init_deconv(&mut s, &format!("up{u}.scale"), c_prev, c, 3, 2, rng);
            nn::init_norm(&mut s, &format!("up{u}.scale_norm"), c, true);
            init_res_stack(&mut s, &format!("up{u}"), 2 * c, c, rng);
            c_prev = c;
        }
        nn::init_conv(&mut s, "head", IMAGE_CHANNELS, cfg.base_filters, 3, rng);
        s
    }

    /// Encodes conditioning images `[N, 3, S, S]` to the bottleneck map and skips.
    pub fn encode<'g, T: Float>(
        &self,
        x: Var<'g, T>,
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<(Var<'g, T>, SkipState<'g, T>)> {
        let cfg = &self.config;
        let s = x.shape();
        if s.len() != 4 || s[1] != IMAGE_CHANNELS || s[2] != cfg.input_size || s[3] != cfg.input_size {
            return Err(Error::shape(
                "encode",
                format!("expected [N, 3, {0}, {0}], got {s:?}", cfg.input_size),
            ));
        }
        let mut h = x;
        let mut maps = Vec::with_capacity(cfg.depth());
        for d in 0..cfg.depth() {
            let name = format!("down{d}");
            let y = res_stack(h, &name, p, ctx)?;
            maps.push(nn::conv2d(y, &p.layer(&format!("skip{d}")), 1)?);
            let scaled = nn::conv2d(y, &p.layer(&format!("{name}.scale")), 2)?;
            let scaled = nn::leaky_relu(scaled);
            let scaled = nn::batch_renorm(scaled, &p.layer(&format!("{name}.scale_norm")), ctx)?;
            h = nn::dropout(scaled, cfg.dropout_rate, ctx)?;
        }
        Ok((h, SkipState { maps }))
    }

    /// Linear map of `z [N, latent_dim]` broadcast to `[N, latent_channels, b, b]`.
    pub fn project_latent<'g, T: Float>(&self, z: Var<'g, T>, p: &Bound<'g, '_, T>) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != cfg.latent_dim {
            return Err(Error::shape(
                "project_latent",
                format!("expected [N, {}], got {zs:?}", cfg.latent_dim),
            ));
        }
        let n = zs[0];
        let b = cfg.bottleneck_size();
        let flat = nn::linear(z, &p.layer("latent.proj"))?.reshape(&[n * cfg.latent_channels]);
        Ok(flat.expand(1, b * b, &[n, cfg.latent_channels, b, b]))
    }

    /// Decodes the bottleneck plus latent through the skips to images in (0, 1).
    pub fn generate<'g, T: Float>(
        &self,
        r_x: Var<'g, T>,
        latent: Var<'g, T>,
        class_map: Option<Var<'g, T>>,
        skips: &SkipState<'g, T>,
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let (rs, ls) = (r_x.shape(), latent.shape());
        if rs.len() != 4 || ls.len() != 4 || rs[0] != ls[0] || rs[2..] != ls[2..] {
            return Err(Error::shape("generate", format!("r_x {rs:?} vs latent {ls:?}")));
        }
        if skips.maps.len() != cfg.depth() {
            return Err(Error::shape(
                "generate",
                format!("{} skips for depth {}", skips.maps.len(), cfg.depth()),
            ));
        }
        let mut parts = vec![r_x, latent];
        match (cfg.class_conditioning, class_map) {
            (true, Some(c)) => parts.push(c),
            (false, None) => {}
            (true, None) => return Err(Error::Config("class map required".into())),
            (false, Some(_)) => return Err(Error::Config("class conditioning is disabled".into())),
        }
        let mut h = concat_channels(&parts);
        for u in 0..cfg.depth() {
            let name = format!("up{u}");
            let up = nn::deconv2d(h, &p.layer(&format!("{name}.scale")), 2)?;
            let up = nn::leaky_relu(up);
            let up = nn::batch_renorm(up, &p.layer(&format!("{name}.scale_norm")), ctx)?;
            let up = nn::dropout(up, cfg.dropout_rate, ctx)?;
            let skip = skips.maps[cfg.depth() - 1 - u];
            if skip.shape()[2..] != up.shape()[2..] || skip.shape()[1] != up.shape()[1] {
                return Err(Error::shape(
                    "generate",
                    format!("skip {:?} vs decoder {:?}", skip.shape(), up.shape()),
                ));
            }
            h = res_stack(concat_channels(&[up, skip]), &name, p, ctx)?;
        }
        Ok(nn::conv2d(h, &p.layer("head"), 1)?.sigmoid())
    }

    /// `encode -> project_latent -> concat -> generate`.
    pub fn forward<'g, T: Float>(
        &self,
        x_j: Var<'g, T>,
        z: Var<'g, T>,
        classes: Option<&[usize]>,
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'g, T>> {
        let (r_x, skips) = self.encode(x_j, p, ctx)?;
        let latent = self.project_latent(z, p)?;
        let class_map = match classes {
            Some(c) if self.config.class_conditioning => Some(self.class_map(x_j, c)?),
            _ if self.config.class_conditioning => {
                return Err(Error::Config("class conditioning needs class ids".into()))
            }
            _ => None,
        };
        self.generate(r_x, latent, class_map, &skips, p, ctx)
    }

    /// One-hot class planes at bottleneck resolution.
    fn class_map<'g, T: Float>(&self, like: Var<'g, T>, classes: &[usize]) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let n = like.shape()[0];
        if classes.len() != n || classes.iter().any(|&c| c >= cfg.num_classes) {
            return Err(Error::Config(format!("bad class ids {classes:?}")));
        }
        let b = cfg.bottleneck_size();
        let onehot = Tensor::from_fn(&[n * cfg.num_classes], |i| {
            if classes[i / cfg.num_classes] == i % cfg.num_classes {
                T::one()
            } else {
                T::zero()
            }
        });
        Ok(like
            .graph()
            .constant(onehot)
            .expand(1, b * b, &[n, cfg.num_classes, b, b]))
    }

    /// Standard-normal latent batch `[n, latent_dim]`.
    pub fn sample_latent<T: Float>(&self, n: usize, rng: &mut RngHandle) -> Tensor<T> {
        use rand::Rng;
        Tensor::from_fn(&[n, self.config.latent_dim], |_| {
            T::of(rng.sample::<f64, _>(StandardNormal))
        })
    }

    /// Number of skip crossings between encoder and decoder.
    pub fn num_skips(&self) -> usize {
        self.config.depth()
    }
}

fn init_res_stack<T: Float>(s: &mut ParameterStore<T>, name: &str, c_in: usize, c: usize, rng: &mut RngHandle) {
    let mut c_layer = c_in;
    for l in 1..=CONVS_PER_BLOCK {
        nn::init_conv(s, &format!("{name}.conv{l}"), c, c_layer, 3, rng);
        nn::init_norm(s, &format!("{name}.norm{l}"), c, true);
        c_layer = c;
    }
    if c_in != c {
        nn::init_conv(s, &format!("{name}.res"), c, c_in, 1, rng);
    }
}

/// Four conv / renorm / leaky-ReLU layers plus the residual path.
fn res_stack<'g, T: Float>(x: Var<'g, T>, name: &str, p: &Bound<'g, '_, T>, ctx: &mut Ctx<T>) -> Result<Var<'g, T>> {
    let mut h = x;
    for l in 1..=CONVS_PER_BLOCK {
        h = nn::conv2d(h, &p.layer(&format!("{name}.conv{l}")), 1)?;
        h = nn::batch_renorm(h, &p.layer(&format!("{name}.norm{l}")), ctx)?;
        h = nn::leaky_relu(h);
    }
    let c_out = h.shape()[1];
    let residual = if x.shape()[1] == c_out {
        x
    } else {
        nn::conv2d(x, &p.layer(&format!("{name}.res")), 1)?
    };
    Ok(h + residual)
}
