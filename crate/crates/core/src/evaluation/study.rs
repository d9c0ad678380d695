//! Downstream classification with and without generated training images.

use rand::Rng;

use crate::dataset::{Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::evaluation::classifier::{stack_images, unstack_images, Classifier, ClassifierConfig};
use crate::evaluation::metrics::{bootstrap_report, ClassificationReport};
use crate::generator::Generator;
use crate::graph::Graph;
use crate::nn::Ctx;
use crate::params::ParameterStore;
use crate::rng::{stream, RngHandle};
use crate::tensor::Tensor;

/// Images per generator forward pass.
const GENERATE_CHUNK: usize = 32;

/// Produces extra training images for one class.
pub trait AugmentSource {
    fn image_size(&self) -> usize;
    fn generate(&self, class: usize, count: usize, rng: &mut RngHandle) -> Result<Vec<ImageTensor>>;
}

/// Runs `generator` on conditioning images `x_j [N, 3, S, S]` with one latent per image.
pub fn generate_images(
    generator: &Generator,
    params: &ParameterStore<f32>,
    conditioning: &[ImageTensor],
    classes: &[usize],
    rng: &mut RngHandle,
) -> Result<Vec<ImageTensor>> {
    if conditioning.len() != classes.len() {
        return Err(Error::Dataset(format!(
            "{} conditioning images for {} classes",
            conditioning.len(),
            classes.len()
        )));
    }
    let mut out = Vec::with_capacity(conditioning.len());
    for (imgs, cls) in conditioning.chunks(GENERATE_CHUNK).zip(classes.chunks(GENERATE_CHUNK)) {
        let x = stack_images(imgs)?;
        let z = generator.sample_latent::<f32>(imgs.len(), rng);
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let cond = generator.config.class_conditioning.then_some(cls);
        let y = generator.forward(g.constant(x), g.constant(z), cond, &p, &mut Ctx::infer())?;
        out.extend(unstack_images(&y.value()));
    }
    Ok(out)
}

/// A trained generator conditioned on real images drawn from a pool of dataset indices.
pub struct GeneratorSource<'a> {
    pub generator: &'a Generator,
    pub params: &'a ParameterStore<f32>,
    pub data: &'a Dataset,
    pub pool: &'a [usize],
}

impl GeneratorSource<'_> {
    /// Conditioning indices drawn uniformly with replacement from the class's pool members.
    pub fn draw_conditioning(&self, class: usize, count: usize, rng: &mut RngHandle) -> Result<Vec<usize>> {
        let members = self.data.class_members(self.pool, class);
        if members.is_empty() {
            return Err(Error::Dataset(format!("class {class} has no conditioning images")));
        }
        Ok((0..count)
            .map(|_| members[rng.random_range(0..members.len())])
            .collect())
    }
}

impl AugmentSource for GeneratorSource<'_> {
    fn image_size(&self) -> usize {
        self.generator.config.input_size
    }

    fn generate(&self, class: usize, count: usize, rng: &mut RngHandle) -> Result<Vec<ImageTensor>> {
        let idx = self.draw_conditioning(class, count, rng)?;
        let cond: Vec<ImageTensor> = idx.iter().map(|&i| self.data.images[i].clone()).collect();
        generate_images(self.generator, self.params, &cond, &vec![class; count], rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub classifier: ClassifierConfig,
    pub n_generated_per_class: usize,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutcome {
    pub without: ClassificationReport,
    pub with: ClassificationReport,
    pub generated: usize,
}

struct TestSet {
    images: Tensor<f32>,
    labels: Vec<usize>,
}

fn train_and_score(
    cfg: &StudyConfig,
    images: &[ImageTensor],
    labels: &[usize],
    test: &TestSet,
) -> Result<ClassificationReport> {
    let mut clf = Classifier::init(cfg.classifier.clone(), cfg.seed)?;
    clf.fit(&stack_images(images)?, labels, cfg.seed)?;
    let scores = clf.predict_proba(&test.images)?;
    bootstrap_report(&scores, &test.labels, cfg.bootstrap_replicates, cfg.seed)
}

/// Trains the same classifier from the same initialization on `train` alone
/// and on `train` plus generated images, and scores both on `test`.
pub fn augmentation_study(
    data: &Dataset,
    train: &[usize],
    test: &[usize],
    source: &dyn AugmentSource,
    cfg: &StudyConfig,
) -> Result<StudyOutcome> {
    let size = cfg.classifier.input_size;
    if source.image_size() != size || data.image_size != size {
        return Err(Error::Config(format!(
            "classifier resolution {size} does not match generator {} / data {}",
            source.image_size(),
            data.image_size
        )));
    }
    if cfg.classifier.num_classes != data.num_classes {
        return Err(Error::Config(format!(
            "classifier has {} classes, data has {}",
            cfg.classifier.num_classes, data.num_classes
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("train and test sets must be non-empty".to_string()));
    }
    let test = TestSet {
        images: data.stack(test),
        labels: data.labels(test),
    };
    let mut images: Vec<ImageTensor> = train.iter().map(|&i| data.images[i].clone()).collect();
    let mut labels = data.labels(train);
    let without = train_and_score(cfg, &images, &labels, &test)?;

    let mut rng = stream(cfg.seed, "augment");
    let mut generated = 0;
    for class in 0..data.num_classes {
        let extra = source.generate(class, cfg.n_generated_per_class, &mut rng)?;
        generated += extra.len();
        labels.extend(std::iter::repeat_n(class, extra.len()));
        images.extend(extra);
    }
    let with = train_and_score(cfg, &images, &labels, &test)?;
    Ok(StudyOutcome {
        without,
        with,
        generated,
    })
}
