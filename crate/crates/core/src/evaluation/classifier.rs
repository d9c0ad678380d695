//! Small convolutional classifier.
//!
//! One architecture serves three roles: the feature embedder behind FID, the
//! real-data oracle behind conditional accuracy and the downstream model of
//! the augmentation study.

use rand::Rng;

use crate::adam::{Adam, AdamConfig};
use crate::dataset::ImageTensor;
use crate::error::{Error, Result};
use crate::generator::IMAGE_CHANNELS;
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{Bound, ParameterStore};
use crate::rng::stream;
use crate::tensor::{Float, Tensor};

/// Images per forward pass at inference time.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub num_classes: usize,
    /// Channels of the first stage; stages two and three double it.
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_size: 64,
            num_classes: 2,
            width: 8,
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig::CLASSIFIER,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_size < 4 || !self.input_size.is_multiple_of(4) {
            problems.push(format!(
                "input_size {} must be a positive multiple of 4",
                self.input_size
            ));
        }
        if self.num_classes < 2 {
            problems.push(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if self.width == 0 || self.batch_size == 0 {
            problems.push("width and batch_size must be positive".to_string());
        }
        if let Err(Error::Config(e)) = self.adam.validate() {
            problems.push(e);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Length of an embedding row.
    pub fn feature_dim(&self) -> usize {
        4 * self.width
    }
}

/// A classifier architecture together with trained weights.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParameterStore<f32>,
}

fn features<'g>(x: Var<'g, f32>, p: &Bound<'g, '_, f32>) -> Result<Var<'g, f32>> {
    let h = nn::leaky_relu(nn::conv2d(x, &p.layer("stage0"), 1)?).avg_pool2();
    let h = nn::leaky_relu(nn::conv2d(h, &p.layer("stage1"), 1)?).avg_pool2();
    let h = nn::leaky_relu(nn::conv2d(h, &p.layer("stage2"), 1)?);
    Ok(h.global_avg_pool())
}

/// Mean softmax cross-entropy of `logits [N, C]` against integer labels.
pub fn cross_entropy<'g>(logits: Var<'g, f32>, labels: &[usize]) -> Var<'g, f32> {
    let g = logits.graph();
    let shape = logits.shape();
    let c = shape[1];
    let v = logits.value();
    // A per-row constant shift leaves log-softmax unchanged and keeps exp in range.
    let shift = Tensor::from_fn(&shape, |i| {
        let row = &v.data()[(i / c) * c..(i / c + 1) * c];
        -row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x))
    });
    let shifted = logits + g.constant(shift);
    let lse = shifted.exp().sum_per_sample().ln();
    let onehot = Tensor::from_fn(&shape, |i| if labels[i / c] == i % c { 1.0 } else { 0.0 });
    let picked = (shifted * g.constant(onehot)).sum_per_sample();
    (lse - picked).mean()
}

impl Classifier {
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "classifier-init");
        let mut s = ParameterStore::new();
        let w = config.width;
        nn::init_conv(&mut s, "stage0", w, IMAGE_CHANNELS, 3, &mut rng);
        nn::init_conv(&mut s, "stage1", 2 * w, w, 3, &mut rng);
        nn::init_conv(&mut s, "stage2", 4 * w, 2 * w, 3, &mut rng);
        nn::init_linear(&mut s, "head", 4 * w, config.num_classes, &mut rng);
        Ok(Classifier { config, params: s })
    }

    fn check_images(&self, images: &Tensor<f32>) -> Result<usize> {
        let s = images.shape();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != IMAGE_CHANNELS || s[2] != size || s[3] != size {
            return Err(Error::shape(
                "classifier",
                format!("images {s:?} do not match a {size}x{size} classifier"),
            ));
        }
        Ok(s[0])
    }

    /// Minibatch Adam on `(images [N, 3, S, S], labels)`. Batches are drawn
    /// with replacement from a stream keyed by `seed`.
    pub fn fit(&mut self, images: &Tensor<f32>, labels: &[usize], seed: u64) -> Result<()> {
        let n = self.check_images(images)?;
        if n == 0 || labels.len() != n {
            return Err(Error::Dataset(format!(
                "{n} training images with {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} outside the classifier's {} classes",
                self.config.num_classes
            )));
        }
        let mut rng = stream(seed, "classifier-batches");
        let mut opt = Adam::new(self.config.adam, &self.params);
        let plane = images.len() / n;
        let size = self.config.input_size;
        for _ in 0..self.config.steps {
            let idx: Vec<usize> = (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect();
            let mut data = Vec::with_capacity(idx.len() * plane);
            for &i in &idx {
                data.extend_from_slice(&images.data()[i * plane..(i + 1) * plane]);
            }
            let batch = Tensor::new(&[idx.len(), IMAGE_CHANNELS, size, size], data)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let p = self.params.bind(&g);
            let logits = nn::linear(features(g.constant(batch), &p)?, &p.layer("head"))?;
            let loss = cross_entropy(logits, &batch_labels);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite("classifier loss".to_string()));
            }
            let grads = p.grads(loss);
            drop(p);
            opt.step(&mut self.params, &grads)?;
        }
        Ok(())
    }

    fn forward_chunks(&self, images: &Tensor<f32>, head: bool) -> Result<Vec<Vec<f64>>> {
        let n = self.check_images(images)?;
        let plane = images.len().checked_div(n).unwrap_or(0);
        let size = self.config.input_size;
        let mut rows = Vec::with_capacity(n);
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = Tensor::new(
                &[end - start, IMAGE_CHANNELS, size, size],
                images.data()[start * plane..end * plane].to_vec(),
            )?;
            let g = Graph::new();
            let p = self.params.bind_frozen(&g);
            let mut out = features(g.constant(chunk), &p)?;
            if head {
                out = nn::linear(out, &p.layer("head"))?;
            }
            let v = out.value();
            let width = v.len() / (end - start);
            for r in v.data().chunks(width) {
                let row: Vec<f64> = r.iter().map(|&x| x.f64()).collect();
                rows.push(if head { softmax(&row) } else { row });
            }
        }
        Ok(rows)
    }

    /// Penultimate activations, one row of [`ClassifierConfig::feature_dim`] per image.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        self.forward_chunks(images, false)
    }

    /// Softmax class probabilities, one row per image.
    pub fn predict_proba(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        self.forward_chunks(images, true)
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.predict_proba(images)?.iter().map(|r| argmax(r)).collect())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Stacks `[3, S, S]` images into `[N, 3, S, S]`.
pub fn stack_images(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Dataset("no images".to_string()));
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape(
                "stack_images",
                format!("{:?} vs {:?}", img.shape(), shape),
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Splits `[N, 3, S, S]` into per-image tensors.
pub fn unstack_images(batch: &Tensor<f32>) -> Vec<ImageTensor> {
    let s = batch.shape();
    if s.is_empty() || s[0] == 0 {
        return Vec::new();
    }
    let plane = batch.len() / s[0];
    batch
        .data()
        .chunks(plane)
        .map(|c| Tensor::new(&s[1..], c.to_vec()).expect("plane matches shape"))
        .collect()
}
