//! Experiment configuration: a sectioned `key = value` file.
//!
//! Every key has a default, unknown keys are rejected, and the resolved
//! configuration (defaults filled in, seed fixed) is written next to run
//! outputs and embedded in checkpoints.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gaunet_core::adam::AdamConfig;
use gaunet_core::critic::CriticConfig;
use gaunet_core::dataset::{
    load_manifest, make_synthetic_dataset, split_patient_level, Dataset, DatasetSplit, DEFAULT_RATIOS,
};
use gaunet_core::evaluation::ClassifierConfig;
use gaunet_core::generator::GeneratorConfig;
use gaunet_core::training::{LossMode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable consulted when a seed is not given explicitly.
pub const SEED_ENV: &str = "GAU_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV manifest; when empty the synthetic dataset below is generated.
    pub manifest: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub synthetic_per_class: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: String::new(),
            num_classes: 2,
            image_size: 64,
            synthetic_per_class: 500,
            synthetic_noise: 0.05,
            synthetic_seed: 0,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub base_filters: usize,
    pub num_blocks: usize,
    pub latent_dim: usize,
    pub latent_channels: usize,
    pub dropout_rate: f64,
    pub class_conditioning: bool,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        GeneratorSection {
            base_filters: g.base_filters,
            num_blocks: g.num_blocks,
            latent_dim: g.latent_dim,
            latent_channels: g.latent_channels,
            dropout_rate: g.dropout_rate,
            class_conditioning: g.class_conditioning,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSection {
    pub growth_rate: usize,
    pub num_dense_blocks: usize,
    pub layers_per_block: usize,
    pub dropout_rate: f64,
}

impl Default for CriticSection {
    fn default() -> Self {
        let c = CriticConfig::default();
        CriticSection {
            growth_rate: c.growth_rate,
            num_dense_blocks: c.num_dense_blocks,
            layers_per_block: c.layers_per_block,
            dropout_rate: c.dropout_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Falls back to `GAU_SEED`, then 0.
    pub seed: Option<u64>,
    pub total_steps: u64,
    pub batch_size: usize,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// `wgan_gp` or `cgan`.
    pub loss: String,
    pub checkpoint_every: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            seed: None,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            n_critic: t.n_critic,
            lambda_gp: t.lambda_gp,
            alpha: t.adam.alpha,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon_hat,
            loss: t.loss_mode.name().to_string(),
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Width and steps of the CNN that embeds images for FID.
    pub embedder_width: usize,
    pub embedder_steps: usize,
    pub embedder_seed: u64,
    /// `template` (synthetic data only), `classifier`, or `auto`.
    pub oracle: String,
    pub n_generated_per_class: usize,
    pub bootstrap_replicates: usize,
    pub classifier_width: usize,
    pub classifier_steps: usize,
    pub classifier_batch_size: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        EvaluationSection {
            embedder_width: c.width,
            embedder_steps: c.steps,
            embedder_seed: 0,
            oracle: "auto".to_string(),
            n_generated_per_class: 100,
            bootstrap_replicates: 1000,
            classifier_width: c.width,
            classifier_steps: c.steps,
            classifier_batch_size: c.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub data: DataSection,
    pub generator: GeneratorSection,
    pub critic: CriticSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: "run".to_string(),
            data: DataSection::default(),
            generator: GeneratorSection::default(),
            critic: CriticSection::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

fn detail(e: gaunet_core::Error) -> String {
    match e {
        gaunet_core::Error::Config(s) => s,
        other => other.to_string(),
    }
}

/// `explicit`, else `GAU_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Fills the seed and checks every section, reporting all problems at once.
    pub fn resolve(mut self) -> Result<Self> {
        self.training.seed = Some(resolve_seed(self.training.seed)?);
        let mut problems = Vec::new();
        if self.data.manifest.is_empty() && self.data.synthetic_per_class < 2 {
            problems.push("data.synthetic_per_class must be at least 2".to_string());
        }
        for (what, r) in [
            ("generator", self.generator_config().validate()),
            ("critic", self.critic_config().validate()),
            ("evaluation", self.embedder_config().validate()),
        ] {
            if let Err(e) = r {
                problems.push(format!("{what}: {}", detail(e)));
            }
        }
        match self.train_config() {
            Ok(t) => {
                if let Err(e) = t.validate() {
                    problems.push(format!("training: {}", detail(e)));
                }
            }
            Err(e) => problems.push(format!("training: {e}")),
        }
        if !matches!(self.evaluation.oracle.as_str(), "auto" | "template" | "classifier") {
            problems.push(format!(
                "evaluation.oracle {:?} must be auto, template or classifier",
                self.evaluation.oracle
            ));
        }
        if self.evaluation.oracle == "template" && !self.data.manifest.is_empty() {
            problems.push("evaluation.oracle = template needs synthetic data".to_string());
        }
        if !problems.is_empty() {
            bail!("invalid configuration:\n  {}", problems.join("\n  "));
        }
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.training.seed.unwrap_or(0)
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let g = &self.generator;
        GeneratorConfig {
            input_size: self.data.image_size,
            base_filters: g.base_filters,
            num_blocks: g.num_blocks,
            latent_dim: g.latent_dim,
            latent_channels: g.latent_channels,
            dropout_rate: g.dropout_rate,
            class_conditioning: g.class_conditioning,
            num_classes: self.data.num_classes,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        let c = &self.critic;
        CriticConfig {
            input_size: self.data.image_size,
            growth_rate: c.growth_rate,
            num_dense_blocks: c.num_dense_blocks,
            layers_per_block: c.layers_per_block,
            dropout_rate: c.dropout_rate,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let Some(loss_mode) = LossMode::parse(&t.loss) else {
            bail!("loss {:?} must be wgan_gp or cgan", t.loss);
        };
        Ok(TrainConfig {
            lambda_gp: t.lambda_gp,
            adam: AdamConfig {
                alpha: t.alpha,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon_hat: t.epsilon,
            },
            batch_size: t.batch_size,
            n_critic: t.n_critic,
            total_steps: t.total_steps,
            seed: self.seed(),
            loss_mode,
            checkpoint_every: t.checkpoint_every,
        })
    }

    pub fn embedder_config(&self) -> ClassifierConfig {
        let e = &self.evaluation;
        ClassifierConfig {
            input_size: self.data.image_size,
            num_classes: self.data.num_classes,
            width: e.embedder_width,
            steps: e.embedder_steps,
            ..Default::default()
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        let e = &self.evaluation;
        ClassifierConfig {
            input_size: self.data.image_size,
            num_classes: self.data.num_classes,
            width: e.classifier_width,
            steps: e.classifier_steps,
            batch_size: e.classifier_batch_size,
            ..Default::default()
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.data.manifest.is_empty()
    }

    /// The configured dataset and its patient-level split.
    pub fn load_data(&self) -> Result<(Dataset, DatasetSplit)> {
        let d = &self.data;
        let ds = if self.is_synthetic() {
            make_synthetic_dataset(
                d.num_classes,
                d.synthetic_per_class,
                d.image_size,
                d.synthetic_noise,
                d.synthetic_seed,
            )?
        } else {
            let path = Path::new(&d.manifest);
            if !path.is_file() {
                bail!("manifest {} does not exist", path.display());
            }
            load_manifest(path, d.image_size, Some(d.num_classes))
                .with_context(|| format!("loading {}", path.display()))?
        };
        let split = split_patient_level(&ds.records, DEFAULT_RATIOS, d.split_seed)?;
        Ok((ds, split))
    }
}
