use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Row-major `N x F` inputs with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(features: usize, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() * features {
            return Err(Error::DimensionMismatch { expected: labels.len() * features, got: inputs.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {bad} outside [0, {classes})")));
        }
        let splits = vec![Split::Train; labels.len()];
        Ok(Self { features, classes, inputs, labels, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Tags a random `test_fraction` of the samples as test data.
    pub fn split_random<R: Rng + ?Sized>(&mut self, test_fraction: f64, rng: &mut R) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        self.splits = vec![Split::Train; self.len()];
        for &i in &order[..n_test] {
            self.splits[i] = Split::Test;
        }
    }

    /// Standardizes every feature with statistics of the train split.
    pub fn standardize(&mut self) {
        let train = self.indices(Split::Train);
        let n = train.len().max(1) as f64;
        for f in 0..self.features {
            let mean = train.iter().map(|&i| self.inputs[i * self.features + f]).sum::<f64>() / n;
            let var = train.iter().map(|&i| (self.inputs[i * self.features + f] - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.len() {
                let x = &mut self.inputs[i * self.features + f];
                *x = (*x - mean) / sd;
            }
        }
    }
}

/// Isotropic 2-d Gaussian blobs, centers evenly spaced on the unit circle.
/// Samples are shuffled and all tagged as train data.
pub fn make_blobs<R: Rng + ?Sized>(classes: usize, per_class: usize, spread: f64, rng: &mut R) -> Dataset {
    let mut rows: Vec<(f64, f64, usize)> = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = std::f64::consts::TAU * c as f64 / classes as f64;
        let (cy, cx) = angle.sin_cos();
        for _ in 0..per_class {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            rows.push((cx + spread * dx, cy + spread * dy, c));
        }
    }
    rows.shuffle(rng);
    let inputs = rows.iter().flat_map(|r| [r.0, r.1]).collect();
    let labels = rows.iter().map(|r| r.2).collect();
    Dataset::new(2, classes, inputs, labels).expect("consistent by construction")
}

/// Decoded IDX image tensor with pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx { offset: bytes.len(), message: "truncated header".into() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Idx { offset: 0, message: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}") });
    }
    Ok(())
}

fn check_length(bytes: &[u8], header: usize, payload: usize) -> Result<()> {
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(Error::Idx { offset: bytes.len(), message: format!("data ends early, header declares {expected} bytes") });
    }
    if bytes.len() > expected {
        return Err(Error::Idx { offset: expected, message: "trailing bytes after declared data".into() });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8], max_items: Option<usize>) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    check_length(bytes, 16, count * rows * cols)?;
    let take = max_items.map_or(count, |m| m.min(count));
    let pixels = bytes[16..16 + take * rows * cols].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(IdxImages { count: take, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8], max_items: Option<usize>) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_length(bytes, 8, count)?;
    let take = max_items.map_or(count, |m| m.min(count));
    Ok(bytes[8..8 + take].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn load_idx_images(path: impl AsRef<Path>, max_items: Option<usize>) -> Result<IdxImages> {
    parse_idx_images(&read(path.as_ref())?, max_items)
}

pub fn load_idx_labels(path: impl AsRef<Path>, max_items: Option<usize>) -> Result<Vec<usize>> {
    parse_idx_labels(&read(path.as_ref())?, max_items)
}

/// Loads an image file and its label file into a 10-class dataset.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, max_items: Option<usize>) -> Result<Dataset> {
    let img = load_idx_images(images, max_items)?;
    let lab = load_idx_labels(labels, max_items)?;
    if lab.len() != img.count {
        return Err(Error::DimensionMismatch { expected: img.count, got: lab.len() });
    }
    let classes = lab.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(img.rows * img.cols, classes, img.pixels, lab)
}

/// Center-crops every `side x side` image of a dataset to `crop x crop` and
/// average-pools by `pool`, so 28x28 digits become 8x8 with `crop = 24,
/// pool = 3`.
pub fn crop_pool(data: &Dataset, side: usize, crop: usize, pool: usize) -> Result<Dataset> {
    if data.features != side * side || crop > side || pool == 0 || crop % pool != 0 {
        return Err(invalid("crop/pool geometry does not match the images"));
    }
    let out_side = crop / pool;
    let start = (side - crop) / 2;
    let mut inputs = Vec::with_capacity(data.len() * out_side * out_side);
    for i in 0..data.len() {
        let img = data.input(i);
        for r in 0..out_side {
            for c in 0..out_side {
                let mut s = 0.0;
                for dr in 0..pool {
                    for dc in 0..pool {
                        s += img[(start + r * pool + dr) * side + start + c * pool + dc];
                    }
                }
                inputs.push(s / (pool * pool) as f64);
            }
        }
    }
    let mut out = Dataset::new(out_side * out_side, data.classes, inputs, data.labels.clone())?;
    out.splits = data.splits.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn tight_blobs_are_separable_by_centroids() {
        let d = make_blobs(3, 50, 1e-9, &mut seeded(0));
        assert_eq!(d.len(), 150);
        for i in 0..d.len() {
            let x = d.input(i);
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da = dist(x, a);
                    let db = dist(x, b);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, d.labels[i]);
        }
        fn dist(x: &[f64], c: usize) -> f64 {
            let a = std::f64::consts::TAU * c as f64 / 3.0;
            (x[0] - a.cos()).powi(2) + (x[1] - a.sin()).powi(2)
        }
    }

    #[test]
    fn blobs_are_reproducible() {
        assert_eq!(make_blobs(3, 10, 0.3, &mut seeded(5)), make_blobs(3, 10, 0.3, &mut seeded(5)));
    }

    fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        b
    }

    #[test]
    fn idx_images_round_trip() {
        let bytes = idx_images(3, 2, 2, 255);
        let img = parse_idx_images(&bytes, None).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (3, 2, 2));
        assert!(img.pixels.iter().all(|&p| p == 1.0));
        let bytes = idx_images(150, 2, 2, 51);
        let img = parse_idx_images(&bytes, Some(100)).unwrap();
        assert_eq!(img.count, 100);
        assert_eq!(img.pixels.len(), 400);
        assert!((img.pixels[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let mut bytes = idx_images(2, 2, 2, 0);
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes, None), Err(Error::Idx { offset: 0, .. })));
        let bytes = idx_images(2, 2, 2, 0);
        assert!(matches!(parse_idx_images(&bytes[..20], None), Err(Error::Idx { offset: 20, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(parse_idx_images(&long, None), Err(Error::Idx { offset: 24, .. })));
        assert!(matches!(parse_idx_labels(&bytes, None), Err(Error::Idx { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&bytes[..6], None), Err(Error::Idx { offset: 6, .. })));
    }

    #[test]
    fn idx_labels_and_files() {
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend(3u32.to_be_bytes());
        labels.extend([7u8, 1, 9]);
        assert_eq!(parse_idx_labels(&labels, None).unwrap(), vec![7, 1, 9]);

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, idx_images(3, 28, 28, 255)).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let d = load_idx(&ip, &lp, Some(2)).unwrap();
        assert_eq!((d.len(), d.features, d.classes), (2, 784, 10));
        let small = crop_pool(&d, 28, 24, 3).unwrap();
        assert_eq!(small.features, 64);
        assert!(small.inputs.iter().all(|&p| (p - 1.0).abs() < 1e-12));
        assert!(matches!(load_idx_images(dir.path().join("missing"), None), Err(Error::Io { .. })));
    }

    #[test]
    fn standardize_uses_train_statistics() {
        let mut d = Dataset::new(1, 2, vec![0.0, 2.0, 100.0], vec![0, 1, 0]).unwrap();
        d.splits[2] = Split::Test;
        d.standardize();
        assert_eq!(&d.inputs[..2], &[-1.0, 1.0]);
        assert_eq!(d.inputs[2], 99.0);
    }
}
