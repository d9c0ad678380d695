//! Alternating critic/generator optimization with the Wasserstein objective
//! and interpolant gradient penalty, plus an optional log-likelihood mode.
//!
//! One outer step runs `n_critic` critic updates followed by one generator
//! update. Every batch is class-homogeneous: a class is drawn uniformly, then
//! `m` distinct same-class pairs `(x_i, x_j)` are sampled. The generator
//! transforms `x_j`; the critic compares `(x_i, x_j)` against `(x_i, x_g)`.

mod checkpoint;
mod losses;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use losses::{
    cgan_generator_loss, cgan_losses, critic_loss, generator_loss, gradient_penalty, interpolate, PROB_CLAMP,
};

use crate::adam::{Adam, AdamConfig};
use crate::critic::Critic;
use crate::dataset::{sample_conditional_batch, ConditionalBatch, Dataset};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, RenormLimits};
use crate::params::{Bound, ParameterStore};
use crate::rng::{stream, RngHandle};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    WganGp,
    Cgan,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::WganGp => "wgan_gp",
            LossMode::Cgan => "cgan",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "wgan_gp" => Some(LossMode::WganGp),
            "cgan" => Some(LossMode::Cgan),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_gp: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub n_critic: usize,
    /// Outer steps; also the horizon of the renormalization schedule.
    pub total_steps: u64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_gp: 10.0,
            adam: AdamConfig::ADVERSARIAL,
            batch_size: 16,
            n_critic: 5,
            total_steps: 2000,
            seed: 0,
            loss_mode: LossMode::WganGp,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.lambda_gp.is_nan() || self.lambda_gp < 0.0 {
            problems.push(format!("lambda_gp {} must be non-negative", self.lambda_gp));
        }
        if self.n_critic == 0 {
            problems.push("n_critic must be at least 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.checkpoint_every == 0 {
            problems.push("checkpoint_every must be positive".to_string());
        }
        if let Err(e) = self.adam.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Losses of one outer step: critic objective and penalty averaged over the
/// inner iterations, and the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub critic_loss: f64,
    pub gp: f64,
    pub gen_loss: f64,
}

impl LossRecord {
    /// One whitespace-delimited log line.
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.9e} {:.9e} {:.9e}",
            self.step, self.critic_loss, self.gp, self.gen_loss
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Float> {
    pub generator: ParameterStore<T>,
    pub gen_opt: Adam<T>,
    pub critic: ParameterStore<T>,
    pub critic_opt: Adam<T>,
    /// Completed outer steps.
    pub step: u64,
    pub rng: RngHandle,
    pub history: Vec<LossRecord>,
}

/// A conditional image generator the trainer can optimize.
pub trait Synthesizer {
    fn latent_dim(&self) -> usize;
    fn init_params<T: Float>(&self, rng: &mut RngHandle) -> ParameterStore<T>;
    fn synthesize<'g, T: Float>(
        &self,
        x_j: Var<'g, T>,
        z: Var<'g, T>,
        classes: &[usize],
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'g, T>>;
}

/// A pair critic the trainer can optimize.
pub trait Scorer {
    fn init_params<T: Float>(&self, rng: &mut RngHandle) -> ParameterStore<T>;
    fn score<'g, T: Float>(
        &self,
        x_i: Var<'g, T>,
        x: Var<'g, T>,
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'g, T>>;
}

impl Synthesizer for Generator {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }
    fn init_params<T: Float>(&self, rng: &mut RngHandle) -> ParameterStore<T> {
        Generator::init_params(self, rng)
    }
    fn synthesize<'g, T: Float>(
        &self,
        x_j: Var<'g, T>,
        z: Var<'g, T>,
        classes: &[usize],
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'g, T>> {
        let classes = self.config.class_conditioning.then_some(classes);
        self.forward(x_j, z, classes, p, ctx)
    }
}

impl Scorer for Critic {
    fn init_params<T: Float>(&self, rng: &mut RngHandle) -> ParameterStore<T> {
        Critic::init_params(self, rng)
    }
    fn score<'g, T: Float>(
        &self,
        x_i: Var<'g, T>,
        x: Var<'g, T>,
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'g, T>> {
        Critic::score(self, x_i, x, p, ctx)
    }
}

/// Standard-normal matrix `[n, dim]`.
pub fn sample_latent<T: Float>(n: usize, dim: usize, rng: &mut RngHandle) -> Tensor<T> {
    Tensor::from_fn(&[n, dim], |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

pub struct Trainer<'a, G, D> {
    pub generator: &'a G,
    pub critic: &'a D,
    pub config: TrainConfig,
    pub data: &'a Dataset,
    /// Dataset indices available for training.
    pub subset: &'a [usize],
}

impl<'a, G: Synthesizer, D: Scorer> Trainer<'a, G, D> {
    pub fn new(
        generator: &'a G,
        critic: &'a D,
        config: TrainConfig,
        data: &'a Dataset,
        subset: &'a [usize],
    ) -> Result<Self> {
        config.validate()?;
        for c in 0..data.num_classes {
            let n = data.class_members(subset, c).len();
            if n < 2 {
                return Err(Error::Dataset(format!(
                    "class {c} has {n} training samples; at least 2 are required"
                )));
            }
        }
        Ok(Trainer {
            generator,
            critic,
            config,
            data,
            subset,
        })
    }

    /// Fresh state: networks and optimizers initialized from the run seed.
    pub fn init_state<T: Float>(&self) -> TrainState<T> {
        let seed = self.config.seed;
        let generator = self.generator.init_params(&mut stream(seed, "generator-init"));
        let critic = self.critic.init_params(&mut stream(seed, "critic-init"));
        TrainState {
            gen_opt: Adam::new(self.config.adam, &generator),
            critic_opt: Adam::new(self.config.adam, &critic),
            generator,
            critic,
            step: 0,
            rng: stream(seed, "train"),
            history: Vec::new(),
        }
    }

    fn batch<T: Float>(&self, ctx: &mut Ctx<T>) -> Result<(ConditionalBatch, Tensor<T>)> {
        let class = ctx.rng().random_range(0..self.data.num_classes);
        let batch = sample_conditional_batch(self.data, self.subset, class, self.config.batch_size, ctx.rng())?;
        let z = sample_latent(self.config.batch_size, self.generator.latent_dim(), ctx.rng());
        Ok((batch, z))
    }

    /// One critic update with the generator frozen; returns `(objective, penalty)`.
    pub fn critic_update<T: Float>(&self, state: &mut TrainState<T>, ctx: &mut Ctx<T>) -> Result<(f64, f64)> {
        let (batch, z) = self.batch(ctx)?;
        let classes = vec![batch.class_id; self.config.batch_size];
        let x_g = {
            let scratch = Graph::new();
            let gen = state.generator.bind_frozen(&scratch);
            let x_j = scratch.constant(batch.x_j.cast::<T>());
            let out = self
                .generator
                .synthesize(x_j, scratch.constant(z), &classes, &gen, ctx)?;
            ctx.take_updates();
            (*out.value()).clone()
        };
        let g = Graph::new();
        let crit = state.critic.bind(&g);
        let x_i = g.constant(batch.x_i.cast::<T>());
        let x_j = g.constant(batch.x_j.cast::<T>());
        let x_g = g.constant(x_g);

        let real = self.critic.score(x_i, x_j, &crit, ctx)?;
        let fake = self.critic.score(x_i, x_g, &crit, ctx)?;
        let (objective, penalty) = match self.config.loss_mode {
            LossMode::WganGp => {
                let eps: Vec<f64> = (0..self.config.batch_size).map(|_| ctx.rng().random()).collect();
                let x_hat = g.param(interpolate(&batch.x_i.cast::<T>(), &x_g.value(), &eps)?);
                let gp = gradient_penalty(|x| self.critic.score(x_i, x, &crit, ctx), x_hat, self.config.lambda_gp)?;
                (critic_loss(fake, real)?, Some(gp))
            }
            LossMode::Cgan => (cgan_losses(real.sigmoid(), fake.sigmoid())?.0, None),
        };
        let loss = match penalty {
            Some(gp) => objective + gp,
            None => objective,
        };
        let value = loss.item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("critic loss at step {}", state.step + 1)));
        }
        let grads = crit.grads(loss);
        state.critic_opt.step(&mut state.critic, &grads)?;
        state.critic.apply_buffer_updates(ctx.take_updates())?;
        Ok((objective.item().f64(), penalty.map_or(0.0, |p| p.item().f64())))
    }

    /// One generator update with the critic frozen; returns the objective.
    pub fn generator_update<T: Float>(&self, state: &mut TrainState<T>, ctx: &mut Ctx<T>) -> Result<f64> {
        let (batch, z) = self.batch(ctx)?;
        let classes = vec![batch.class_id; self.config.batch_size];
        let g = Graph::new();
        let gen = state.generator.bind(&g);
        let crit = state.critic.bind_frozen(&g);
        let x_i = g.constant(batch.x_i.cast::<T>());
        let x_j = g.constant(batch.x_j.cast::<T>());
        let x_g = self.generator.synthesize(x_j, g.constant(z), &classes, &gen, ctx)?;
        let gen_updates = ctx.take_updates();
        let fake = self.critic.score(x_i, x_g, &crit, ctx)?;
        ctx.take_updates();
        let loss = match self.config.loss_mode {
            LossMode::WganGp => generator_loss(fake)?,
            LossMode::Cgan => cgan_generator_loss(fake.sigmoid())?,
        };
        let value = loss.item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at step {}", state.step + 1)));
        }
        let grads = gen.grads(loss);
        state.gen_opt.step(&mut state.generator, &grads)?;
        state.generator.apply_buffer_updates(gen_updates)?;
        Ok(value)
    }

    /// One outer step. On error the state may be partially updated; callers
    /// that need the pre-step state should checkpoint first.
    pub fn step<T: Float>(&self, state: &mut TrainState<T>) -> Result<LossRecord> {
        let renorm = RenormLimits::scheduled(state.step, self.config.total_steps);
        let mut ctx = Ctx::train(state.rng.clone(), renorm);
        let (mut objective, mut penalty) = (0.0, 0.0);
        for _ in 0..self.config.n_critic {
            let (o, p) = self.critic_update(state, &mut ctx)?;
            objective += o;
            penalty += p;
        }
        let gen_loss = self.generator_update(state, &mut ctx)?;
        state.rng = ctx.into_rng();
        state.step += 1;
        let t = self.config.n_critic as f64;
        let record = LossRecord {
            step: state.step,
            critic_loss: objective / t,
            gp: penalty / t,
            gen_loss,
        };
        state.history.push(record);
        Ok(record)
    }

    /// Runs until `config.total_steps`, checkpointing every
    /// `checkpoint_every` steps and at exit when `checkpoint` is given.
    /// A non-finite loss aborts the run without overwriting the last checkpoint.
    pub fn run<T: Float>(
        &self,
        state: &mut TrainState<T>,
        checkpoint: Option<(&Path, &str)>,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<()> {
        while state.step < self.config.total_steps {
            let record = self.step(state)?;
            on_step(&record);
            if let Some((path, text)) = checkpoint {
                if state.step.is_multiple_of(self.config.checkpoint_every) || state.step == self.config.total_steps {
                    save_checkpoint(path, state, text)?;
                }
            }
        }
        if let Some((path, text)) = checkpoint {
            save_checkpoint(path, state, text)?;
        }
        Ok(())
    }
}

/// Convenience wrapper: fresh state, full run.
pub fn train<T: Float, G: Synthesizer, D: Scorer>(
    trainer: &Trainer<'_, G, D>,
    checkpoint: Option<(&Path, &str)>,
) -> Result<TrainState<T>> {
    let mut state = trainer.init_state();
    trainer.run(&mut state, checkpoint, |_| {})?;
    Ok(state)
}
