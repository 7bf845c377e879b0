//! Datasets: CIFAR-10 binary batches, synthetic spiral and blob sets, and
//! crop/flip augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Samples stored row-wise as `f32`; images are channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input: InputShape,
    pub classes: usize,
    pub train_x: Matrix<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Matrix<f32>,
    pub test_y: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_y.len()
    }

    /// Rows `indices` of a split, converted to `T`.
    pub fn batch<T: Scalar>(&self, split: Split, indices: &[usize]) -> (Matrix<T>, Vec<usize>) {
        let (x, y) = match split {
            Split::Train => (&self.train_x, &self.train_y),
            Split::Test => (&self.test_x, &self.test_y),
        };
        let d = x.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(x.row(i).iter().map(|&v| T::of(v as f64)));
        }
        let m = Matrix::new(indices.len(), d, data).expect("row lengths agree");
        (m, indices.iter().map(|&i| y[i]).collect())
    }

    /// Keeps the first `n` training samples.
    pub fn truncate_train(&mut self, n: usize) {
        let n = n.min(self.train_len());
        let keep: Vec<usize> = (0..n).collect();
        self.train_x = self.train_x.select_rows(&keep);
        self.train_y.truncate(n);
    }
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Raw labels and pixel bytes from one binary batch file.
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_batch(&bytes, path)
}

/// Splits 3073-byte records into labels and pixels. A trailing partial
/// record is reported at the byte offset where it starts.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let whole = bytes.len() / CIFAR_RECORD;
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data {
            path: path.to_path_buf(),
            offset: (whole * CIFAR_RECORD) as u64,
            message: format!(
                "truncated record: {} of {CIFAR_RECORD} bytes",
                bytes.len() - whole * CIFAR_RECORD
            ),
        });
    }
    if whole == 0 {
        return Err(Error::Data {
            path: path.to_path_buf(),
            offset: 0,
            message: "no records".into(),
        });
    }
    let mut labels = Vec::with_capacity(whole);
    let mut pixels = Vec::with_capacity(whole * CIFAR_PIXELS);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                offset: (k * CIFAR_RECORD) as u64,
                message: format!("label byte {} outside 0..10", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads CIFAR-10 from `dir`, keeping the first `train_subset` training
/// images when given. Pixels are scaled to `[0, 1]` and standardized per
/// channel with statistics of the retained training images only.
pub fn load_cifar10(dir: &Path, train_subset: Option<usize>) -> Result<Dataset> {
    let mut train_labels = Vec::new();
    let mut train_pixels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        if train_subset.is_some_and(|n| train_labels.len() >= n) {
            break;
        }
        let (l, p) = read_cifar_batch(&dir.join(name))?;
        train_labels.extend(l);
        train_pixels.extend(p);
    }
    if let Some(n) = train_subset {
        let n = n.min(train_labels.len());
        train_labels.truncate(n);
        train_pixels.truncate(n * CIFAR_PIXELS);
    }
    let (test_labels, test_pixels) = read_cifar_batch(&dir.join(CIFAR_TEST_FILE))?;
    let (mean, std) = channel_stats(&train_pixels);
    Ok(Dataset {
        input: InputShape::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
        classes: 10,
        train_x: normalize(&train_pixels, &mean, &std),
        train_y: train_labels.into_iter().map(usize::from).collect(),
        test_x: normalize(&test_pixels, &mean, &std),
        test_y: test_labels.into_iter().map(usize::from).collect(),
    })
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
pub fn channel_stats(pixels: &[u8]) -> ([f64; 3], [f64; 3]) {
    let plane = CIFAR_PIXELS / 3;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = [0usize; 3];
    for img in pixels.chunks_exact(CIFAR_PIXELS) {
        for c in 0..3 {
            for &p in &img[c * plane..(c + 1) * plane] {
                let v = p as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            count[c] += plane;
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [1.0; 3];
    for c in 0..3 {
        if count[c] > 0 {
            let n = count[c] as f64;
            mean[c] = sum[c] / n;
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }
    (mean, std)
}

fn normalize(pixels: &[u8], mean: &[f64; 3], std: &[f64; 3]) -> Matrix<f32> {
    let plane = CIFAR_PIXELS / 3;
    let data: Vec<f32> = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i % CIFAR_PIXELS) / plane;
            ((p as f64 / 255.0 - mean[c]) / std[c]) as f32
        })
        .collect();
    Matrix::new(pixels.len() / CIFAR_PIXELS, CIFAR_PIXELS, data).expect("whole images")
}

/// Data directory: `SSA_DATA_DIR` when set, else `fallback`.
pub fn data_dir(fallback: &Path) -> PathBuf {
    std::env::var_os("SSA_DATA_DIR").map_or_else(|| fallback.to_path_buf(), PathBuf::from)
}

/// Radians each spiral arm turns between the origin and radius 1. Kept
/// under a half turn so every ray from the origin crosses each arm at most
/// once, which a network without hidden biases can still separate.
pub const SPIRAL_TWIST: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Three interleaved 2-D spiral arms.
    Spiral,
    /// Unit-variance Gaussian clusters whose means are `separation` times a
    /// standard normal draw.
    Blobs {
        dim: usize,
        classes: usize,
        separation: f64,
    },
}

/// Deterministic synthetic set, shuffled and split 80/20.
pub fn synthetic_dataset(kind: SyntheticKind, n_samples: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, classes) = match kind {
        SyntheticKind::Spiral => (2, 3),
        SyntheticKind::Blobs { dim, classes, .. } => (dim, classes),
    };
    if n_samples < 5 || dim == 0 || classes < 2 {
        return Err(Error::arg(
            "synthetic set needs at least 5 samples, 1 dimension and 2 classes",
        ));
    }
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    let mut ys: Vec<usize> = Vec::with_capacity(n_samples);
    match kind {
        SyntheticKind::Spiral => {
            let per_class = n_samples.div_ceil(classes);
            for i in 0..n_samples {
                let class = i % classes;
                let k = i / classes;
                let r = k as f64 / per_class.max(2).saturating_sub(1) as f64;
                let noise: f64 = StandardNormal.sample(&mut rng);
                let t = std::f64::consts::TAU / classes as f64 * class as f64 + SPIRAL_TWIST * r + 0.2 * noise;
                xs.push(vec![r * t.sin(), r * t.cos()]);
                ys.push(class);
            }
        }
        SyntheticKind::Blobs { separation, .. } => {
            let means: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    (0..dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            separation * z
                        })
                        .collect::<Vec<f64>>()
                })
                .collect();
            for i in 0..n_samples {
                let class = i % classes;
                let x = means[class]
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + z
                    })
                    .collect();
                xs.push(x);
                ys.push(class);
            }
        }
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng);
    let n_train = n_samples * 4 / 5;
    let to_matrix = |idx: &[usize]| Matrix::from_fn(idx.len(), dim, |i, j| xs[idx[i]][j] as f32);
    let (tr, te) = order.split_at(n_train);
    Ok(Dataset {
        input: InputShape::Flat(dim),
        classes,
        train_x: to_matrix(tr),
        train_y: tr.iter().map(|&i| ys[i]).collect(),
        test_x: to_matrix(te),
        test_y: te.iter().map(|&i| ys[i]).collect(),
    })
}

pub const AUGMENT_PAD: usize = 4;

/// Window at offset `(oy, ox)` of the image zero-padded by 4 pixels on each
/// side, optionally mirrored left-right. Offsets lie in `0..=8`; `(4, 4)`
/// without a flip returns the input.
pub fn crop_flip<T: Scalar>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    oy: usize,
    ox: usize,
    flip: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); image.len()];
    for c in 0..channels {
        for y in 0..height {
            let sy = (y + oy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            for x in 0..width {
                let xx = if flip { width - 1 - x } else { x };
                let sx = (xx + ox) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= width as isize {
                    continue;
                }
                out[(c * height + y) * width + x] = image[(c * height + sy as usize) * width + sx as usize];
            }
        }
    }
    out
}

/// Random 4-pixel-padded crop and independent 50% horizontal flip.
pub fn augment<T: Scalar, R: Rng>(image: &[T], channels: usize, height: usize, width: usize, rng: &mut R) -> Vec<T> {
    let oy = rng.random_range(0..=2 * AUGMENT_PAD);
    let ox = rng.random_range(0..=2 * AUGMENT_PAD);
    let flip = rng.random_bool(0.5);
    crop_flip(image, channels, height, width, oy, ox, flip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_arithmetic() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 6;
        let (labels, pixels) = parse_cifar_batch(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(labels, vec![6, 0]);
        assert_eq!(pixels.len(), 2 * CIFAR_PIXELS);
        bytes.truncate(2 * CIFAR_RECORD - 1);
        match parse_cifar_batch(&bytes, Path::new("x.bin")) {
            Err(Error::Data { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_cifar_batch(Path::new("/nonexistent/data_batch_1.bin")).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"));
    }

    #[test]
    fn synthetic_split_and_determinism() {
        let a = synthetic_dataset(SyntheticKind::Spiral, 3000, 1).unwrap();
        assert_eq!((a.train_len(), a.test_len()), (2400, 600));
        assert_eq!(a, synthetic_dataset(SyntheticKind::Spiral, 3000, 1).unwrap());
        assert_ne!(a, synthetic_dataset(SyntheticKind::Spiral, 3000, 2).unwrap());
    }

    #[test]
    fn crop_and_flip() {
        let img: Vec<f64> = (0..2 * 3 * 5).map(|i| i as f64).collect();
        assert_eq!(crop_flip(&img, 2, 3, 5, 4, 4, false), img);
        let once = crop_flip(&img, 2, 3, 5, 4, 4, true);
        assert_ne!(once, img);
        assert_eq!(crop_flip(&once, 2, 3, 5, 4, 4, true), img);
        let shifted = crop_flip(&img, 2, 3, 5, 5, 4, false);
        assert_eq!(shifted[0], img[5]);
        assert_eq!(shifted[2 * 5], 0.0);
    }
}
