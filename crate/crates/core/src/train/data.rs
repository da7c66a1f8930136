use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

/// Images `N×h×w×c` with values in `[0, 1]` and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: String,
}

#[derive(Deserialize)]
struct LabelRow {
    index: usize,
    label: i64,
}

impl Dataset {
    /// Builds a dataset after checking every invariant.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        check_images(&images, Path::new("<memory>"))?;
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Range(format!(
                "label {l} at row {row} is outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)` of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copy of image `i` as an `h×w×c` tensor.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        image_at(&self.images, i)
    }

    /// Writes the image tensor and a `index,label` CSV.
    pub fn save(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        save_tensor(images_path, &self.images)?;
        let mut w = csv::Writer::from_path(labels_path)?;
        w.write_record(["index", "label"])?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(labels_path, e))?;
        Ok(())
    }
}

/// Copy of image `i` of an `N×h×w×c` tensor.
pub fn image_at(images: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let s = images.shape();
    let len = s[1] * s[2] * s[3];
    Tensor::from_parts(s[1..].to_vec(), images.data()[i * len..(i + 1) * len].to_vec())
}

fn check_images(images: &Tensor<f32>, path: &Path) -> Result<()> {
    if images.rank() != 4 {
        return Err(Error::Rank {
            path: path.to_path_buf(),
            expected: 4,
            shape: images.shape().to_vec(),
        });
    }
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("{}: pixel value {v} outside [0, 1]", path.display())));
    }
    Ok(())
}

/// Reads and checks an `N×h×w×c` image tensor without labels.
pub fn load_images(path: &Path) -> Result<Tensor<f32>> {
    let images = load_tensor(path)?;
    check_images(&images, path)?;
    Ok(images)
}

/// Reads a PVGT image tensor and its label CSV.
pub fn load_dataset(images_path: &Path, labels_path: &Path, num_classes: usize) -> Result<Dataset> {
    let images = load_images(images_path)?;
    let mut reader = csv::Reader::from_path(labels_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(labels_path, io),
        other => Error::Format {
            path: labels_path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    })?;
    let mut labels = Vec::new();
    for (row, rec) in reader.deserialize::<LabelRow>().enumerate() {
        let rec = rec.map_err(|e| Error::Format {
            path: labels_path.to_path_buf(),
            detail: format!("row {row}: {e}"),
        })?;
        if rec.index != row {
            return Err(Error::Format {
                path: labels_path.to_path_buf(),
                detail: format!("row {row} carries index {}", rec.index),
            });
        }
        if rec.label < 0 || rec.label as usize >= num_classes {
            return Err(Error::Range(format!(
                "{}: label {} at row {row} is outside [0, {num_classes})",
                labels_path.display(),
                rec.label
            )));
        }
        labels.push(rec.label as usize);
    }
    let split = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, num_classes, &split)
}

/// Colours of the painted square per class.
pub const PATCH_COLORS: [[f32; 3]; 2] = [[0.9, 0.1, 0.1], [0.1, 0.1, 0.9]];

/// Two-class toy set: uniform noise in `[0.25, 0.75)` with an `patch×patch`
/// square painted red (class 0) or blue (class 1) at a random position.
pub fn patch_dataset(n: usize, size: usize, patch: usize, seed: u64) -> Result<Dataset> {
    if patch == 0 || patch > size {
        return Err(Error::Config(format!("patch {patch} does not fit a {size}×{size} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..2usize);
        let (py, px) = (rng.random_range(0..=size - patch), rng.random_range(0..=size - patch));
        for y in 0..size {
            for x in 0..size {
                let inside = (py..py + patch).contains(&y) && (px..px + patch).contains(&x);
                for ch in 0..3 {
                    let noise = rng.random_range(0.25f32..0.75);
                    data.push(if inside { PATCH_COLORS[label][ch] } else { noise });
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, size, size, 3], data)?, labels, 2, "synthetic")
}

/// Shallow reference classifier for [`patch_dataset`]: class 0 when the
/// image's mean red exceeds its mean blue.
pub fn red_blue_oracle(image: &Tensor<f32>) -> usize {
    let (mut r, mut b) = (0.0f64, 0.0f64);
    for px in image.data().chunks_exact(3) {
        r += px[0] as f64;
        b += px[2] as f64;
    }
    usize::from(r <= b)
}
