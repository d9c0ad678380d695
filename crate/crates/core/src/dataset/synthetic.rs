//! Parametric shape images for desk-scale runs, and the template-matching
//! classifier that labels them.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, ImageTensor, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 10;
pub const FOREGROUND: f32 = 0.8;
pub const BACKGROUND: f32 = 0.2;
const THRESHOLD: f32 = 0.5 * (FOREGROUND + BACKGROUND);

pub const SHAPE_NAMES: [&str; MAX_CLASSES] = [
    "disc", "square", "cross", "triangle", "ring", "hbar", "vbar", "diamond", "saltire", "dots",
];

/// Whether the point `(u, v)`, in units of the shape radius about its anchor,
/// lies inside the shape of `class`.
pub fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 1.0,
        1 => au.max(av) <= 0.8,
        2 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        3 => (-0.9..=0.7).contains(&v) && au <= (v + 0.9) * 0.6,
        4 => {
            let r2 = u * u + v * v;
            (0.3025..=1.0).contains(&r2)
        }
        5 => au <= 1.0 && av <= 0.35,
        6 => au <= 0.35 && av <= 1.0,
        7 => au + av <= 1.0,
        8 => au <= 1.0 && av <= 1.0 && (au - av).abs() <= 0.3,
        9 => (u - 0.5).powi(2) + v * v <= 0.16 || (u + 0.5).powi(2) + v * v <= 0.16,
        _ => false,
    }
}

/// Binary mask of a shape anchored at `(cx, cy)` with radius `r` (pixel units).
pub fn render_mask(class: usize, size: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5 - cx) / r;
            let v = (y as f64 + 0.5 - cy) / r;
            out.push(shape_contains(class, u, v));
        }
    }
    out
}

/// Renders a noiseless shape image.
pub fn render_shape(class: usize, size: usize, cx: f64, cy: f64, r: f64) -> ImageTensor {
    let mask = render_mask(class, size, cx, cy, r);
    let plane: Vec<f32> = mask.iter().map(|&m| if m { FOREGROUND } else { BACKGROUND }).collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[3, size, size], data).expect("render extents")
}

/// `num_classes * n_per_class` images, class-major, one patient per image.
pub fn make_synthetic_dataset(
    num_classes: usize,
    n_per_class: usize,
    image_size: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::Config(format!(
            "num_classes {num_classes} outside [2, {MAX_CLASSES}]"
        )));
    }
    if image_size < 8 || noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "image_size {image_size} must be at least 8 and noise_sigma {noise_sigma} non-negative"
        )));
    }
    let mut rng = stream(seed, "synthetic");
    let s = image_size as f64;
    let mut records = Vec::with_capacity(num_classes * n_per_class);
    let mut images = Vec::with_capacity(num_classes * n_per_class);
    for (class, name) in SHAPE_NAMES.iter().enumerate().take(num_classes) {
        for i in 0..n_per_class {
            let r = s * rng.random_range(0.2..0.32);
            let cx = rng.random_range(r + 1.0..s - r - 1.0);
            let cy = rng.random_range(r + 1.0..s - r - 1.0);
            let mut img = render_shape(class, image_size, cx, cy, r);
            if noise_sigma > 0.0 {
                for v in img.data_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = (*v + (n * noise_sigma) as f32).clamp(0.0, 1.0);
                }
            }
            let k = records.len();
            records.push(SampleRecord {
                image_path: format!("{name}_{i:05}.png"),
                class_id: class,
                patient_id: format!("s{k:06}"),
            });
            images.push(img);
        }
    }
    Ok(Dataset {
        records,
        images,
        num_classes,
        image_size,
    })
}

/// Template matcher: thresholds the image, fits each class template to the
/// foreground's area and centroid, and picks the class with the fewest
/// mismatched pixels.
#[derive(Clone, Debug)]
pub struct TemplateOracle {
    pub num_classes: usize,
    /// Per class: template area at unit radius and centroid offset.
    geometry: Vec<(f64, f64, f64)>,
}

impl TemplateOracle {
    pub fn new(num_classes: usize) -> Self {
        const GRID: usize = 600;
        let geometry = (0..num_classes)
            .map(|c| {
                let (mut n, mut su, mut sv) = (0usize, 0.0, 0.0);
                for iy in 0..GRID {
                    for ix in 0..GRID {
                        let u = -1.0 + (ix as f64 + 0.5) * 2.0 / GRID as f64;
                        let v = -1.0 + (iy as f64 + 0.5) * 2.0 / GRID as f64;
                        if shape_contains(c, u, v) {
                            n += 1;
                            su += u;
                            sv += v;
                        }
                    }
                }
                let area = 4.0 * n as f64 / (GRID * GRID) as f64;
                (area, su / n as f64, sv / n as f64)
            })
            .collect();
        TemplateOracle { num_classes, geometry }
    }

    /// Mismatch fraction per class (lower is better).
    pub fn costs(&self, img: &ImageTensor) -> Vec<f64> {
        let s = img.shape();
        let (size, plane) = (s[1], s[1] * s[2]);
        let d = img.data();
        let mask: Vec<bool> = (0..plane)
            .map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0 > THRESHOLD)
            .collect();
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                n += 1;
                sx += (i % size) as f64 + 0.5;
                sy += (i / size) as f64 + 0.5;
            }
        }
        if n == 0 {
            return vec![1.0; self.num_classes];
        }
        let (mx, my) = (sx / n as f64, sy / n as f64);
        self.geometry
            .iter()
            .enumerate()
            .map(|(c, &(area, ou, ov))| {
                let r = (n as f64 / area).sqrt();
                let t = render_mask(c, size, mx - r * ou, my - r * ov, r);
                let wrong = t.iter().zip(&mask).filter(|(a, b)| a != b).count();
                wrong as f64 / n as f64
            })
            .collect()
    }

    pub fn predict(&self, img: &ImageTensor) -> usize {
        let costs = self.costs(img);
        let mut best = 0;
        for (c, &v) in costs.iter().enumerate() {
            if v < costs[best] {
                best = c;
            }
        }
        best
    }
}
