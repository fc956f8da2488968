use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labelled images held in memory as one `[N, C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} samples at {n}",
                self.len()
            )));
        }
        let head = self.images.slice_outer(0, n)?;
        let tail = self.images.slice_outer(n, self.len() - n)?;
        Ok((
            Self::new(head, self.labels[..n].to_vec(), self.classes)?,
            Self::new(tail, self.labels[n..].to_vec(), self.classes)?,
        ))
    }
}

/// Seeded image-classification task with known structure.
///
/// Each class owns a fixed pattern of oriented sinusoidal gratings per
/// channel. A sample is its class pattern, randomly translated, scaled by
/// a per-sample contrast, offset by a per-sample brightness and corrupted
/// with pixel noise. Contrast and brightness vary over a wide range, so
/// per-instance statistics differ strongly between samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    pub image: [usize; 3],
    /// Standard deviation of the pixel noise.
    pub noise: f64,
    /// Contrast is drawn log-uniformly from `[1/contrast_range, contrast_range]`.
    pub contrast_range: f64,
    /// Standard deviation of the brightness offset.
    pub brightness: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            samples: 2500,
            image: [3, 32, 32],
            noise: 1.0,
            contrast_range: 4.0,
            brightness: 2.0,
        }
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    amplitude: f64,
}

pub fn synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    let [c, h, w] = spec.image;
    if spec.classes < 2 || spec.samples == 0 || c * h * w == 0 {
        return Err(Error::InvalidArgument(
            "synthetic task needs ≥ 2 classes and ≥ 1 sample".into(),
        ));
    }
    if !(spec.contrast_range >= 1.0) || !(spec.noise >= 0.0) || !(spec.brightness >= 0.0) {
        return Err(Error::InvalidArgument("synthetic noise parameters out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns: Vec<Vec<Grating>> = (0..spec.classes * c)
        .map(|_| {
            (0..2)
                .map(|_| Grating {
                    fx: rng.random_range(-3i32..=3) as f64,
                    fy: rng.random_range(1i32..=3) as f64,
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude: rng.random_range(0.5..1.0),
                })
                .collect()
        })
        .collect();

    let plane = h * w;
    let mut data = Vec::with_capacity(spec.samples * c * plane);
    let mut labels = Vec::with_capacity(spec.samples);
    let log_range = spec.contrast_range.ln();
    for _ in 0..spec.samples {
        let label = rng.random_range(0..spec.classes);
        let (dx, dy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let contrast = (rng.random_range(-1.0..=1.0) * log_range).exp();
        let offset = spec.brightness * rng.sample::<f64, _>(StandardNormal);
        for ch in 0..c {
            let gratings = &patterns[label * c + ch];
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (x as f64 / w as f64 + dx, y as f64 / h as f64 + dy);
                    let signal: f64 = gratings
                        .iter()
                        .map(|g| g.amplitude * (2.0 * PI * (g.fx * u + g.fy * v) + g.phase).sin())
                        .sum();
                    let noise = spec.noise * rng.sample::<f64, _>(StandardNormal);
                    data.push(T::from_f64(contrast * signal + offset + noise));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(&[spec.samples, c, h, w], data)?, labels, spec.classes)
}

pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_CLASSES: usize = 10;
/// Per-channel mean and standard deviation of the CIFAR-10 training set
/// after scaling pixels to `[0, 1]`.
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decodes CIFAR-10 binary records: one label byte followed by 3072
/// pixel bytes, channel-major, each channel a row-major 32×32 plane.
/// Pixels are scaled to `[0, 1]` and, if `standardize` is set, shifted
/// and scaled by [`CIFAR10_MEAN`] and [`CIFAR10_STD`].
pub fn parse_cifar10<T: Scalar>(bytes: &[u8], standardize: bool) -> Result<Dataset<T>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR10_RECORD_BYTES * CIFAR10_RECORD_BYTES;
        return Err(Error::Format(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR10_RECORD_BYTES}-byte records; \
             incomplete record starts at byte offset {whole}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::Format(format!(
                "label byte {label} at byte offset {} exceeds 9",
                r * CIFAR10_RECORD_BYTES
            )));
        }
        labels.push(label);
        for (ch, pixels) in record[1..].chunks_exact(1024).enumerate() {
            let (m, s) = if standardize {
                (CIFAR10_MEAN[ch], CIFAR10_STD[ch])
            } else {
                (0.0, 1.0)
            };
            data.extend(pixels.iter().map(|&p| T::from_f64((p as f64 / 255.0 - m) / s)));
        }
    }
    Dataset::new(Tensor::new(&[n, 3, 32, 32], data)?, labels, CIFAR10_CLASSES)
}

/// Reads `data_batch_1.bin` … `data_batch_5.bin` (train) or
/// `test_batch.bin` (test) from `dir`.
pub fn load_cifar10<T: Scalar>(dir: &Path, split: Split, standardize: bool) -> Result<Dataset<T>> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut bytes = Vec::new();
    for f in files {
        let path = dir.join(&f);
        let chunk = std::fs::read(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        if chunk.len() % CIFAR10_RECORD_BYTES != 0 {
            let whole = chunk.len() / CIFAR10_RECORD_BYTES * CIFAR10_RECORD_BYTES;
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of records; incomplete record at byte offset {whole}",
                path.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes, standardize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (r, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend((0..3072).map(|i| ((i + r) % 256) as u8));
        }
        out
    }

    #[test]
    fn cifar_records_decode() {
        let bytes = fixture(&[3, 0, 9, 1, 1, 2, 5, 7, 8, 6]);
        assert_eq!(bytes.len(), 30730);
        let ds: Dataset<f32> = parse_cifar10(&bytes, false).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels()[0], 3);
        // record 0: red plane first, pixel (0, 1) is byte 1
        assert_eq!(ds.images().at(&[0, 0, 0, 1]), 1.0 / 255.0);
        // green plane starts at byte 1024 → value 1024 % 256 = 0
        assert_eq!(ds.images().at(&[0, 1, 0, 0]), 0.0);
        assert_eq!(ds.images().at(&[1, 0, 0, 0]), 1.0 / 255.0);
        let std: Dataset<f64> = parse_cifar10(&bytes, true).unwrap();
        let expected = (0.0 - CIFAR10_MEAN[1]) / CIFAR10_STD[1];
        assert!((std.images().at(&[0, 1, 0, 0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn truncated_cifar_file_names_the_offset() {
        let mut bytes = fixture(&[1, 2]);
        bytes.truncate(bytes.len() - 5);
        let err = parse_cifar10::<f32>(&bytes, false).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("offset 3073"), "{err}");
    }

    #[test]
    fn bad_label_is_rejected() {
        let bytes = fixture(&[1, 10]);
        let err = parse_cifar10::<f32>(&bytes, false).unwrap_err();
        assert!(err.to_string().contains("offset 3073"), "{err}");
    }

    #[test]
    fn synthetic_task_is_seeded() {
        let spec = SyntheticSpec {
            samples: 20,
            image: [3, 8, 8],
            ..SyntheticSpec::default()
        };
        let a: Dataset<f32> = synthetic(&spec).unwrap();
        let b: Dataset<f32> = synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c: Dataset<f32> = synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
        assert!(a.labels().iter().all(|&l| l < 4));
        let (train, val) = a.split_at(15).unwrap();
        assert_eq!((train.len(), val.len()), (15, 5));
        let (x, y) = a.batch(&[3, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(y, vec![a.labels()[3], a.labels()[0]]);
    }
}
