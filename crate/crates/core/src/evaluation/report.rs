//! Plain-text metrics reports and sample grids.
//!
//! A report is a sequence of `[section]` headers followed by `key: value`
//! lines. Numbers are written in shortest round-trip form, so parsing a
//! written report gives back an identical value. The `[footer]` section holds
//! wall-clock data and is the only part allowed to differ between reruns.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{write_png, ImageTensor};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{ClassificationReport, Estimate};
use crate::generator::IMAGE_CHANNELS;
use crate::tensor::Tensor;

/// Tiles per side of a sample grid.
pub const GRID_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationBlock {
    /// `without` or `with` in an augmentation study.
    pub name: String,
    /// `binary` (class 1 positive) or `macro`.
    pub averaging: String,
    pub report: ClassificationReport,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub fid: Option<f64>,
    /// Oracle agreement with the conditioning class (reported as `pa`).
    pub conditional_accuracy: Option<f64>,
    /// `(class, accuracy)` for every class that was generated.
    pub per_class_accuracy: Vec<(usize, f64)>,
    pub classification: Vec<ClassificationBlock>,
    pub metadata: RunMetadata,
    pub footer: Vec<(String, String)>,
}

pub fn averaging_label(num_classes: usize) -> &'static str {
    if num_classes == 2 {
        "binary"
    } else {
        "macro"
    }
}

fn estimate_text(e: &Estimate) -> String {
    format!("{:?} {:?} {:?}", e.value, e.lo, e.hi)
}

/// Name, averaging and the four estimates of a block being parsed.
type PendingBlock = (String, Option<String>, [Option<Estimate>; 4]);

impl MetricsReport {
    /// The report without its footer.
    pub fn body(&self) -> String {
        let mut out = String::new();
        if self.fid.is_some() || self.conditional_accuracy.is_some() || !self.per_class_accuracy.is_empty() {
            out.push_str("[image_quality]\n");
            if let Some(f) = self.fid {
                let _ = writeln!(out, "fid: {f:?}");
            }
            if let Some(a) = self.conditional_accuracy {
                let _ = writeln!(out, "pa_conditional_accuracy: {a:?}");
            }
            for (c, a) in &self.per_class_accuracy {
                let _ = writeln!(out, "class_{c}_conditional_accuracy: {a:?}");
            }
        }
        for block in &self.classification {
            let r = &block.report;
            let _ = writeln!(out, "[classification.{}]", block.name);
            let _ = writeln!(out, "averaging: {}", block.averaging);
            let _ = writeln!(out, "accuracy: {}", estimate_text(&r.accuracy));
            let _ = writeln!(out, "precision: {}", estimate_text(&r.precision));
            let _ = writeln!(out, "recall: {}", estimate_text(&r.recall));
            let _ = writeln!(out, "auc: {}", estimate_text(&r.auc));
        }
        out.push_str("[metadata]\n");
        let _ = writeln!(out, "seed: {}", self.metadata.seed);
        let _ = writeln!(out, "config_hash: {}", self.metadata.config_hash);
        let _ = writeln!(out, "checkpoint: {}", self.metadata.checkpoint);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = self.body();
        if !self.footer.is_empty() {
            out.push_str("[footer]\n");
            for (k, v) in &self.footer {
                let _ = writeln!(out, "{k}: {v}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = MetricsReport::default();
        let mut section = String::new();
        let mut pending: Option<PendingBlock> = None;
        let bad = |line: usize, why: &str| Error::Metrics(format!("report line {line}: {why}"));
        let num = |line: usize, v: &str| v.parse::<f64>().map_err(|_| bad(line, &format!("bad number {v:?}")));

        let finish = |pending: &mut Option<PendingBlock>, report: &mut MetricsReport, line: usize| -> Result<()> {
            match pending.take() {
                None => Ok(()),
                Some((name, averaging, [Some(accuracy), Some(precision), Some(recall), Some(auc)])) => {
                    report.classification.push(ClassificationBlock {
                        name,
                        averaging: averaging.unwrap_or_default(),
                        report: ClassificationReport {
                            accuracy,
                            precision,
                            recall,
                            auc,
                        },
                    });
                    Ok(())
                }
                Some(_) => Err(bad(line, "incomplete classification block")),
            }
        };

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                finish(&mut pending, &mut report, line_no)?;
                section = name.to_string();
                if let Some(block) = section.strip_prefix("classification.") {
                    pending = Some((block.to_string(), None, [None; 4]));
                }
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| bad(line_no, "expected key: value"))?;
            let (key, value) = (key.trim(), value.trim());
            match section.as_str() {
                "image_quality" => match key {
                    "fid" => report.fid = Some(num(line_no, value)?),
                    "pa_conditional_accuracy" => report.conditional_accuracy = Some(num(line_no, value)?),
                    _ => {
                        let class = key
                            .strip_prefix("class_")
                            .and_then(|k| k.strip_suffix("_conditional_accuracy"))
                            .and_then(|k| k.parse::<usize>().ok())
                            .ok_or_else(|| bad(line_no, &format!("unknown key {key}")))?;
                        report.per_class_accuracy.push((class, num(line_no, value)?));
                    }
                },
                s if s.starts_with("classification.") => {
                    let block = pending.as_mut().expect("block opened by its header");
                    let slot = match key {
                        "averaging" => {
                            block.1 = Some(value.to_string());
                            continue;
                        }
                        "accuracy" => 0,
                        "precision" => 1,
                        "recall" => 2,
                        "auc" => 3,
                        _ => return Err(bad(line_no, &format!("unknown key {key}"))),
                    };
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(bad(line_no, "expected value, lower and upper bound"));
                    }
                    block.2[slot] = Some(Estimate {
                        value: num(line_no, parts[0])?,
                        lo: num(line_no, parts[1])?,
                        hi: num(line_no, parts[2])?,
                    });
                }
                "metadata" => match key {
                    "seed" => {
                        report.metadata.seed = value.parse().map_err(|_| bad(line_no, "bad seed"))?;
                    }
                    "config_hash" => report.metadata.config_hash = value.to_string(),
                    "checkpoint" => report.metadata.checkpoint = value.to_string(),
                    _ => return Err(bad(line_no, &format!("unknown key {key}"))),
                },
                "footer" => report.footer.push((key.to_string(), value.to_string())),
                _ => return Err(bad(line_no, &format!("unknown section [{section}]"))),
            }
        }
        finish(&mut pending, &mut report, text.lines().count())?;
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Tiles up to 64 images row-major into an 8x8 grid; unused tiles stay black.
pub fn sample_grid(images: &[ImageTensor]) -> Result<ImageTensor> {
    let Some(first) = images.first() else {
        return Err(Error::Dataset("sample grid needs at least one image".to_string()));
    };
    let s = first.shape()[1];
    let side = GRID_SIDE * s;
    let mut grid = Tensor::zeros(&[IMAGE_CHANNELS, side, side]);
    for (t, img) in images.iter().take(GRID_SIDE * GRID_SIDE).enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape(
                "sample_grid",
                format!("{:?} vs {:?}", img.shape(), first.shape()),
            ));
        }
        let (ty, tx) = (t / GRID_SIDE, t % GRID_SIDE);
        for c in 0..IMAGE_CHANNELS {
            for y in 0..s {
                let src = &img.data()[(c * s + y) * s..(c * s + y + 1) * s];
                let row = (c * side + ty * s + y) * side + tx * s;
                grid.data_mut()[row..row + s].copy_from_slice(src);
            }
        }
    }
    Ok(grid)
}

pub fn write_sample_grid(images: &[ImageTensor], path: &Path) -> Result<()> {
    write_png(path, &sample_grid(images)?)
}
