//! Dataset ingestion: the IDX image/label codec and seeded synthetic blobs.
//!
//! Both sources serve the same role — a pool that per-client datasets are
//! drawn from deterministically. Synthetic data is generated on the fly;
//! IDX files are loaded once and sampled by class.

use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::{Dirichlet, StandardNormal};

use crate::error::{Error, Result};
use crate::federation::ClientDataset;
use crate::harness::config::{data_file, DatasetConfig, ExperimentConfig};
use crate::seeding;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard deviation of every synthetic class blob.
pub const BLOB_STD: f64 = 1.0;
/// Minimum pairwise distance between class means, in blob standard
/// deviations times `BLOB_STD`.
pub const BLOB_SPACING: f64 = 4.0;

// ---------------------------------------------------------------------------
// IDX codec
// ---------------------------------------------------------------------------

/// Byte-offset-tracking reader over a whole file image.
struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        IdxReader {
            bytes,
            offset: 0,
            path: path.display().to_string(),
        }
    }

    fn fail(&self, offset: usize, message: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            message,
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let at = self.offset;
        let slice = self
            .bytes
            .get(at..at + 4)
            .ok_or_else(|| self.fail(self.bytes.len(), format!("truncated before {what}")))?;
        self.offset += 4;
        Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let at = self.offset;
        let slice = self.bytes.get(at..at + n).ok_or_else(|| {
            self.fail(
                self.bytes.len(),
                format!("truncated: {what} needs {n} bytes from byte {at}, file has {}", self.bytes.len()),
            )
        })?;
        self.offset += n;
        Ok(slice)
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(self.fail(
                self.offset,
                format!("{} trailing bytes", self.bytes.len() - self.offset),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        message: format!("cannot read file: {e}"),
    })
}

/// Parse an IDX image file into a `[count, 1, rows, cols]` tensor with
/// pixels scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut r = IdxReader::new(&bytes, path);
    let magic = r.read_u32("magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(r.fail(0, format!("magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")));
    }
    let count = r.read_u32("image count")? as usize;
    let rows = r.read_u32("row count")? as usize;
    let cols = r.read_u32("column count")? as usize;
    let pixels = r.take(count * rows * cols, "pixel data")?;
    r.finish()?;
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::new(vec![count, 1, rows, cols], data)
}

/// Parse an IDX label file into a label vector.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let mut r = IdxReader::new(&bytes, path);
    let magic = r.read_u32("magic number")?;
    if magic != LABELS_MAGIC {
        return Err(r.fail(0, format!("magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")));
    }
    let count = r.read_u32("label count")? as usize;
    let raw = r.take(count, "label data")?;
    r.finish()?;
    if let Some(i) = raw.iter().position(|&l| l > 9) {
        return Err(r.fail(8 + i, format!("label {} outside 0-9", raw[i])));
    }
    Ok(raw.iter().map(|&l| l as usize).collect())
}

/// Load the image/label pair from `dir`, checking count consistency.
pub fn load_mnist(dir: &Path) -> Result<(Tensor, Vec<usize>)> {
    let images = read_idx_images(&dir.join(data_file::IMAGES))?;
    let labels_path = dir.join(data_file::LABELS);
    let labels = read_idx_labels(&labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 4,
            message: format!(
                "{} labels for {} images",
                labels.len(),
                images.shape()[0]
            ),
        });
    }
    Ok((images, labels))
}

/// Write a `[count, 1, rows, cols]` tensor of `[0, 1]` pixels as an IDX
/// image file (values are quantized to bytes).
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Shape(format!(
            "expected [count, 1, rows, cols] images, got {shape:?}"
        )));
    }
    let mut bytes = Vec::with_capacity(16 + images.data().len());
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(shape[0] as u32).to_be_bytes());
    bytes.extend_from_slice(&(shape[2] as u32).to_be_bytes());
    bytes.extend_from_slice(&(shape[3] as u32).to_be_bytes());
    bytes.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

/// Write labels (each in 0..=9) as an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Domain(format!("label {bad} outside 0-9")));
    }
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

/// Mean of class `class` in `dim` dimensions.
///
/// Class `c` sits at distance `BLOB_SPACING * (1 + c / dim)` along axis
/// `c % dim`, which keeps every pair of means at least `BLOB_SPACING`
/// apart for any class count.
pub fn class_mean(class: usize, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    mean[class % dim] = BLOB_STD * BLOB_SPACING * (1.0 + (class / dim) as f64);
    mean
}

/// `count` labeled samples: labels uniform over classes, features drawn
/// from the label's Gaussian blob. Deterministic in `seed`.
pub fn gen_synthetic(
    n_classes: usize,
    dim: usize,
    count: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if n_classes < 2 {
        return Err(Error::Domain(format!(
            "synthetic data needs at least 2 classes, got {n_classes}"
        )));
    }
    if dim == 0 || count == 0 {
        return Err(Error::Domain(
            "synthetic data needs a positive dimension and count".into(),
        ));
    }
    let mut rng = seeding::stream(seed, "synthetic-blobs", 0);
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let label = rng.gen_range(0..n_classes);
        labels.push(label);
        let mean = class_mean(label, dim);
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mean[j] + BLOB_STD * z);
        }
    }
    let samples = Tensor::new(vec![count, dim], data)?;
    Ok((samples, labels))
}

// ---------------------------------------------------------------------------
// Client dataset source
// ---------------------------------------------------------------------------

/// A pool that client datasets are drawn from.
pub enum DataSource {
    /// Blobs generated per client on demand.
    Synthetic { n_classes: usize, dim: usize, seed: Option<u64> },
    /// A fixed labeled pool (loaded IDX files), sampled by class.
    Pool {
        samples: Tensor,
        labels: Vec<usize>,
        by_class: Vec<Vec<usize>>,
        n_classes: usize,
    },
}

impl DataSource {
    /// Build the source a config describes, loading files if needed.
    pub fn from_config(config: &ExperimentConfig) -> Result<DataSource> {
        match &config.dataset {
            DatasetConfig::Synthetic { n_classes, dim, seed } => Ok(DataSource::Synthetic {
                n_classes: *n_classes,
                dim: *dim,
                seed: *seed,
            }),
            DatasetConfig::Mnist { .. } => {
                let dir = config.dataset.mnist_dir().expect("mnist dataset has a directory");
                let (samples, labels) = load_mnist(&dir)?;
                DataSource::pool(samples, labels, config.num_classes())
            }
        }
    }

    /// Wrap an existing labeled pool.
    pub fn pool(samples: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<DataSource> {
        if samples.shape().is_empty() || samples.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for sample stack {:?}",
                labels.len(),
                samples.shape()
            )));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::Domain(format!(
                    "label {l} out of range for {n_classes} classes"
                )));
            }
            by_class[l].push(i);
        }
        Ok(DataSource::Pool {
            samples,
            labels,
            by_class,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        match self {
            DataSource::Synthetic { n_classes, .. } => *n_classes,
            DataSource::Pool { n_classes, .. } => *n_classes,
        }
    }

    /// Materialize one client's local dataset.
    ///
    /// Labels are drawn from a per-client class distribution — uniform, or
    /// Dirichlet(`alpha`) when label skew is on — then features come from
    /// the blob generator or are copied from pool rows of that class.
    /// Everything derives from (`seed`, `client_id`), so the same call is
    /// bit-identical on repeat.
    pub fn client_dataset(
        &self,
        client_id: u32,
        size: usize,
        sample_shape: &[usize],
        alpha: Option<f64>,
        seed: u64,
    ) -> Result<ClientDataset> {
        if size == 0 {
            return Err(Error::Domain("client dataset size must be positive".into()));
        }
        let n = self.n_classes();
        let seed = match self {
            DataSource::Synthetic { seed: Some(s), .. } => *s,
            _ => seed,
        };
        let dim: usize = sample_shape.iter().product();

        // Per-client class distribution.
        let weights: Vec<f64> = match alpha {
            None => vec![1.0; n],
            Some(a) => {
                let mut rng = seeding::stream(seed, "client-skew", u64::from(client_id));
                let dir = Dirichlet::new(&vec![a; n])
                    .map_err(|e| Error::Domain(format!("label skew: {e}")))?;
                dir.sample(&mut rng)
            }
        };
        let class_draw = WeightedIndex::new(&weights)
            .map_err(|e| Error::Domain(format!("label skew: {e}")))?;

        let mut rng = seeding::stream(seed, "client-data", u64::from(client_id));
        let mut labels = Vec::with_capacity(size);
        let mut data = Vec::with_capacity(size * dim);
        match self {
            DataSource::Synthetic { dim: feat, .. } => {
                if *feat != dim {
                    return Err(Error::Shape(format!(
                        "sample shape {sample_shape:?} does not hold {feat} features"
                    )));
                }
                for _ in 0..size {
                    let label = class_draw.sample(&mut rng);
                    labels.push(label);
                    let mean = class_mean(label, dim);
                    for j in 0..dim {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(mean[j] + BLOB_STD * z);
                    }
                }
            }
            DataSource::Pool {
                samples, by_class, ..
            } => {
                let feat: usize = samples.shape()[1..].iter().product();
                if feat != dim {
                    return Err(Error::Shape(format!(
                        "sample shape {sample_shape:?} does not hold {feat} features"
                    )));
                }
                for _ in 0..size {
                    let label = class_draw.sample(&mut rng);
                    let rows = &by_class[label];
                    if rows.is_empty() {
                        return Err(Error::Domain(format!(
                            "pool has no examples of class {label}"
                        )));
                    }
                    let row = rows[rng.gen_range(0..rows.len())];
                    labels.push(label);
                    data.extend_from_slice(&samples.data()[row * feat..(row + 1) * feat]);
                }
            }
        }
        let mut shape = Vec::with_capacity(1 + sample_shape.len());
        shape.push(size);
        shape.extend_from_slice(sample_shape);
        ClientDataset::new(client_id, Tensor::new(shape, data)?, labels, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn temp_path(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("fedfish-data-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn two_image_fixture_roundtrips_exactly() {
        let img = temp_path("fixture-images");
        let lbl = temp_path("fixture-labels");
        // Two 2x2 images with known bytes.
        let pixels: Vec<f64> = [0u8, 51, 102, 153, 204, 255, 0, 128]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        let images = Tensor::new(vec![2, 1, 2, 2], pixels.clone()).unwrap();
        write_idx_images(&img, &images).unwrap();
        write_idx_labels(&lbl, &[7, 3]).unwrap();

        let back = read_idx_images(&img).unwrap();
        assert_eq!(back.shape(), &[2, 1, 2, 2]);
        assert_eq!(back.data(), &pixels[..]);
        assert_eq!(read_idx_labels(&lbl).unwrap(), vec![7, 3]);
    }

    #[test]
    fn image_magic_on_a_label_file_is_rejected_at_offset_zero() {
        let path = temp_path("bad-magic-labels");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(4);
        fs::write(&path, bytes).unwrap();
        match read_idx_labels(&path).unwrap_err() {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 0);
                assert!(message.contains("0x00000803"), "got {message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_image_file_reports_the_file_end() {
        let path = temp_path("truncated-images");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]); // needs 8 pixel bytes
        fs::write(&path, bytes).unwrap();
        match read_idx_images(&path).unwrap_err() {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 19);
                assert!(message.contains("truncated"), "got {message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch_is_reported() {
        let dir = std::env::temp_dir().join(format!("fedfish-mismatch-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let images = Tensor::new(vec![2, 1, 2, 2], vec![0.5; 8]).unwrap();
        write_idx_images(&dir.join(data_file::IMAGES), &images).unwrap();
        write_idx_labels(&dir.join(data_file::LABELS), &[1]).unwrap();
        match load_mnist(&dir).unwrap_err() {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 4);
                assert!(message.contains("1 labels for 2 images"), "got {message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let (a, la) = gen_synthetic(3, 5, 40, 11).unwrap();
        let (b, lb) = gen_synthetic(3, 5, 40, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = gen_synthetic(3, 5, 40, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_means_stay_separated() {
        for (n, dim) in [(10, 32), (10, 3), (7, 1), (4, 784)] {
            for a in 0..n {
                for b in (a + 1)..n {
                    let (ma, mb) = (class_mean(a, dim), class_mean(b, dim));
                    let dist: f64 = ma
                        .iter()
                        .zip(&mb)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    assert!(
                        dist >= BLOB_SPACING * BLOB_STD - 1e-12,
                        "classes {a},{b} in dim {dim}: distance {dist}"
                    );
                }
            }
        }
    }

    #[test]
    fn labels_are_uniform_within_multinomial_bounds() {
        let n = 4;
        let count = 20_000;
        let (_, labels) = gen_synthetic(n, 3, count, 5).unwrap();
        let mut freq = vec![0usize; n];
        for &l in &labels {
            freq[l] += 1;
        }
        let p = 1.0 / n as f64;
        let sigma = (count as f64 * p * (1.0 - p)).sqrt();
        for (class, &f) in freq.iter().enumerate() {
            let dev = (f as f64 - count as f64 * p).abs();
            assert!(dev <= 5.0 * sigma, "class {class}: {f} of {count}");
        }
    }

    #[test]
    fn synthetic_client_datasets_are_deterministic_and_shaped() {
        let src = DataSource::Synthetic {
            n_classes: 4,
            dim: 12,
            seed: None,
        };
        let a = src.client_dataset(3, 16, &[1, 2, 6], None, 99).unwrap();
        let b = src.client_dataset(3, 16, &[1, 2, 6], None, 99).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.samples().shape(), &[16, 1, 2, 6]);
        let c = src.client_dataset(4, 16, &[1, 2, 6], None, 99).unwrap();
        assert_ne!(a.labels(), c.labels());
    }

    #[test]
    fn strong_label_skew_concentrates_client_classes() {
        let src = DataSource::Synthetic {
            n_classes: 10,
            dim: 4,
            seed: None,
        };
        for client in 0..5 {
            let ds = src
                .client_dataset(client, 200, &[4], Some(0.01), 42)
                .unwrap();
            let mut freq = vec![0usize; 10];
            for &l in ds.labels() {
                freq[l] += 1;
            }
            let max = *freq.iter().max().unwrap();
            // Uniform draws put ~20 samples per class; a concentration of
            // 0.01 should hand one class the majority.
            assert!(
                max >= 100,
                "client {client}: expected a dominant class, got {freq:?}"
            );
        }
    }

    #[test]
    fn pool_clients_copy_rows_of_the_requested_class() {
        let (samples, labels) = gen_synthetic(3, 6, 50, 8).unwrap();
        let src = DataSource::pool(samples.clone(), labels.clone(), 3).unwrap();
        let ds = src.client_dataset(1, 30, &[6], None, 77).unwrap();
        for (i, &label) in ds.labels().iter().enumerate() {
            let row = &ds.samples().data()[i * 6..(i + 1) * 6];
            let found = labels.iter().enumerate().any(|(j, &l)| {
                l == label && samples.data()[j * 6..(j + 1) * 6] == *row
            });
            assert!(found, "sample {i} is not a pool row of class {label}");
        }
    }

    #[test]
    fn pool_missing_a_class_is_reported() {
        let samples = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let src = DataSource::pool(samples, vec![0, 0], 2).unwrap();
        let err = src.client_dataset(0, 10, &[3], None, 1).unwrap_err();
        assert!(
            err.to_string().contains("no examples of class 1"),
            "got {err}"
        );
    }

    #[test]
    fn dataset_seed_override_pins_synthetic_draws() {
        let pinned = DataSource::Synthetic {
            n_classes: 3,
            dim: 4,
            seed: Some(5),
        };
        let a = pinned.client_dataset(0, 8, &[4], None, 100).unwrap();
        let b = pinned.client_dataset(0, 8, &[4], None, 200).unwrap();
        assert_eq!(a.samples(), b.samples(), "blob seed should override the trial seed");
    }
}
