//! Image-quality metrics, classification metrics and the augmentation study.

mod classifier;
mod fid;
mod metrics;
mod report;
mod study;

pub use classifier::{argmax, cross_entropy, stack_images, unstack_images, Classifier, ClassifierConfig};
pub use fid::{fid, sqrt_spd, FeatureMoments, COVARIANCE_RIDGE, NEGATIVE_EIGEN_TOL, SYMMETRY_TOL};
pub use metrics::{
    bootstrap_report, classification_metrics, rank_auc, ClassificationMetrics, ClassificationReport, Estimate, CI_LEVEL,
};
pub use report::{
    averaging_label, sample_grid, write_sample_grid, ClassificationBlock, MetricsReport, RunMetadata, GRID_SIDE,
};
pub use study::{augmentation_study, generate_images, AugmentSource, GeneratorSource, StudyConfig, StudyOutcome};

use crate::dataset::{ImageTensor, TemplateOracle};
use crate::error::{Error, Result};

/// A fixed image classifier used to judge generated samples.
pub trait ClassOracle {
    fn num_classes(&self) -> usize;
    fn predict_images(&self, images: &[ImageTensor]) -> Result<Vec<usize>>;
}

impl ClassOracle for TemplateOracle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn predict_images(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        Ok(images.iter().map(|img| self.predict(img)).collect())
    }
}

impl ClassOracle for Classifier {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
    fn predict_images(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        self.predict(&stack_images(images)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalAccuracy {
    pub overall: f64,
    /// `(class, accuracy)` for each class present in the input.
    pub per_class: Vec<(usize, f64)>,
}

/// Fraction of images the oracle assigns to the class they were generated for.
pub fn conditional_accuracy(
    images: &[ImageTensor],
    classes: &[usize],
    oracle: &dyn ClassOracle,
) -> Result<ConditionalAccuracy> {
    if images.is_empty() || images.len() != classes.len() {
        return Err(Error::Metrics(format!(
            "{} images with {} intended classes",
            images.len(),
            classes.len()
        )));
    }
    let k = oracle.num_classes();
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::Metrics(format!(
            "class {bad} is not among the oracle's {k} classes"
        )));
    }
    let pred = oracle.predict_images(images)?;
    let mut hits = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &c) in pred.iter().zip(classes) {
        total[c] += 1;
        hits[c] += usize::from(p == c);
    }
    let per_class = (0..k)
        .filter(|&c| total[c] > 0)
        .map(|c| (c, hits[c] as f64 / total[c] as f64))
        .collect();
    Ok(ConditionalAccuracy {
        overall: hits.iter().sum::<usize>() as f64 / images.len() as f64,
        per_class,
    })
}

/// FID between two image sets under a trained embedder.
pub fn image_fid(embedder: &Classifier, real: &[ImageTensor], fake: &[ImageTensor]) -> Result<f64> {
    let r = FeatureMoments::from_rows(&embedder.embed(&stack_images(real)?)?)?;
    let f = FeatureMoments::from_rows(&embedder.embed(&stack_images(fake)?)?)?;
    fid(&r, &f)
}
