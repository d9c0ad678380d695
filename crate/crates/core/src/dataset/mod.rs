//! Image records, manifest ingestion, patient-level splits and
//! class-conditional pair sampling.

mod image;
mod split;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

pub use image::{quantize, read_png, resize_bilinear, to_level, write_png, ImageTensor};
pub use split::{split_patient_level, DatasetSplit, DEFAULT_RATIOS};
pub use synthetic::{
    make_synthetic_dataset, render_mask, render_shape, shape_contains, TemplateOracle, MAX_CLASSES, SHAPE_NAMES,
};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngHandle;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 3] = ["path", "class", "patient_id"];
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: String,
    pub class_id: usize,
    pub patient_id: String,
}

/// Records with their decoded `[3, S, S]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<ImageTensor>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Members of `class_id` among `subset`, in subset order.
    pub fn class_members(&self, subset: &[usize], class_id: usize) -> Vec<usize> {
        subset
            .iter()
            .copied()
            .filter(|&i| self.records[i].class_id == class_id)
            .collect()
    }

    /// Stacks the images at `indices` into `[m, 3, S, S]`.
    pub fn stack(&self, indices: &[usize]) -> Tensor<f32> {
        let per = 3 * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::new(&[indices.len(), 3, self.image_size, self.image_size], data).expect("dataset images share a shape")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].class_id).collect()
    }
}

fn row_err(row: usize, reason: impl ToString) -> Error {
    Error::ManifestRow {
        row,
        reason: reason.to_string(),
    }
}

/// Reads the `path,class,patient_id` header plus rows only. Relative image
/// paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path, num_classes: Option<usize>) -> Result<(Vec<SampleRecord>, Vec<PathBuf>)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_slice());
    let header = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Dataset(format!(
            "{}: header must be {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut files = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let n = i + 1;
        let row = row.map_err(|e| row_err(n, e))?;
        let class_id: usize = row[1]
            .parse()
            .map_err(|_| row_err(n, format!("unknown class {:?}", &row[1])))?;
        if num_classes.is_some_and(|k| class_id >= k) {
            return Err(row_err(n, format!("unknown class {class_id}")));
        }
        if row[0].is_empty() || row[2].is_empty() {
            return Err(row_err(n, "empty path or patient_id"));
        }
        let file = base.join(&row[0]);
        if !file.is_file() {
            return Err(row_err(n, format!("missing file {}", file.display())));
        }
        files.push(file);
        records.push(SampleRecord {
            image_path: row[0].to_string(),
            class_id,
            patient_id: row[2].to_string(),
        });
    }
    Ok((records, files))
}

/// Loads a manifest, decoding and resizing every image to `image_size`.
pub fn load_manifest(path: &Path, image_size: usize, num_classes: Option<usize>) -> Result<Dataset> {
    let (records, files) = read_manifest(path, num_classes)?;
    if records.is_empty() {
        return Err(Error::Dataset(format!("{} lists no images", path.display())));
    }
    let num_classes = match num_classes {
        Some(k) => k,
        None => records.iter().map(|r| r.class_id).max().unwrap_or(0) + 1,
    };
    let decoded = par::map_indexed(files.len(), |i| {
        read_png(&files[i])
            .map(|img| resize_bilinear(&img, image_size))
            .map_err(|e| row_err(i + 1, e))
    });
    let images = decoded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        records,
        images,
        num_classes,
        image_size,
    })
}

/// Writes every image as PNG into `dir` plus a manifest; returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (rec, img) in ds.records.iter().zip(&ds.images) {
        write_png(&dir.join(&rec.image_path), img)?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Dataset(e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in &ds.records {
        w.write_record([r.image_path.as_str(), &r.class_id.to_string(), r.patient_id.as_str()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(&manifest, bytes).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// `m` ordered pairs of distinct same-class samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalBatch {
    pub class_id: usize,
    pub i_idx: Vec<usize>,
    pub j_idx: Vec<usize>,
    pub x_i: Tensor<f32>,
    pub x_j: Tensor<f32>,
}

/// Draws `m` pairs uniformly among ordered pairs of distinct members of
/// `class_id` within `subset`.
pub fn sample_conditional_batch(
    ds: &Dataset,
    subset: &[usize],
    class_id: usize,
    m: usize,
    rng: &mut RngHandle,
) -> Result<ConditionalBatch> {
    let pool = ds.class_members(subset, class_id);
    if pool.len() < 2 {
        return Err(Error::Dataset(format!(
            "class {class_id} has {} samples; pairs need at least 2",
            pool.len()
        )));
    }
    let mut i_idx = Vec::with_capacity(m);
    let mut j_idx = Vec::with_capacity(m);
    for _ in 0..m {
        let a = rng.random_range(0..pool.len());
        let mut b = rng.random_range(0..pool.len() - 1);
        if b >= a {
            b += 1;
        }
        i_idx.push(pool[a]);
        j_idx.push(pool[b]);
    }
    Ok(ConditionalBatch {
        class_id,
        x_i: ds.stack(&i_idx),
        x_j: ds.stack(&j_idx),
        i_idx,
        j_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn pair_of_two_is_the_only_pair() {
        let ds = make_synthetic_dataset(2, 2, 8, 0.0, 0).unwrap();
        let all: Vec<usize> = (0..4).collect();
        let mut rng = stream(0, "t");
        let b = sample_conditional_batch(&ds, &all, 1, 20, &mut rng).unwrap();
        for (&i, &j) in b.i_idx.iter().zip(&b.j_idx) {
            assert!((i == 2 && j == 3) || (i == 3 && j == 2));
        }
        assert_eq!(b.x_i.shape(), &[20, 3, 8, 8]);
    }

    #[test]
    fn singleton_class_is_an_error() {
        let ds = make_synthetic_dataset(2, 3, 8, 0.0, 0).unwrap();
        assert!(sample_conditional_batch(&ds, &[0, 3, 4], 0, 1, &mut stream(0, "t")).is_err());
    }

    #[test]
    fn x_j_slot_is_uniform() {
        let ds = make_synthetic_dataset(2, 10, 8, 0.0, 0).unwrap();
        let all: Vec<usize> = (0..20).collect();
        let mut rng = stream(5, "t");
        let mut counts = [0usize; 10];
        let draws = 10_000;
        let b = sample_conditional_batch(&ds, &all, 0, draws, &mut rng).unwrap();
        for &j in &b.j_idx {
            counts[j] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.1).abs() < 0.02, "{f}");
        }
        assert!(b.i_idx.iter().zip(&b.j_idx).all(|(a, b)| a != b));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_dataset(2, 3, 16, 0.05, 4).unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let back = load_manifest(&manifest, 16, Some(2)).unwrap();
        assert_eq!(back.records, ds.records);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a, &quantize(b));
        }
    }

    #[test]
    fn manifest_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_dataset(2, 2, 8, 0.0, 4).unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join(&ds.records[2].image_path)).unwrap();
        let err = load_manifest(&manifest, 8, None).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "path,class,patient_id\ndisc_00000.png,7,p\n").unwrap();
        let err = load_manifest(&bad, 8, Some(2)).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("unknown class"), "{err}");
    }
}
