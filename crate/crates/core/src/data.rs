//! Labelled image sets: IDX ingestion, synthetic generators and batching.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::one_hot;
use crate::scalar::Real;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// NHWC images in `[0, 1]` with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Vec<T>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
    pub split: String,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Vec<T>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize, split: &str) -> Result<Self> {
        let d: usize = shape.iter().product();
        if d == 0 || images.len() != labels.len() * d {
            return Err(Error::CountMismatch {
                images: images.len() / d.max(1),
                labels: labels.len(),
            });
        }
        if let Some(v) = images.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!("pixel {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            shape,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[T] {
        &self.images
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let d = self.sample_len();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Samples at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset<T>, Dataset<T>) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Keeps samples of the listed classes, relabelled `0..classes.len()` in
    /// list order.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset<T> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.subset(&keep);
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).unwrap_or(0);
        }
        out.num_classes = classes.len();
        out
    }

    /// `(x, one-hot y)` tensors for the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let sub = self.subset(indices);
        let [h, w, c] = self.shape;
        let x = Tensor::from_vec(&[indices.len(), h, w, c], sub.images)?;
        Ok((x, one_hot(&sub.labels, self.num_classes)?))
    }

    /// Index batches covering every sample once; shuffled when `rng` is given.
    /// The last batch may be short.
    pub fn batch_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(r) = rng {
            order.shuffle(r);
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Converts the pixel type.
    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.iter().map(|v| U::lit(v.as_f64())).collect(),
            labels: self.labels.clone(),
            shape: self.shape,
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Truncated(format!("{what} header")))?;
    Ok(u32::from_be_bytes(b))
}

fn read_payload<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n);
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Truncated(format!("{what}: expected {n} bytes, found {}", buf.len())));
    }
    Ok(buf)
}

/// Parses IDX image and label streams (big-endian headers, u8 payload).
pub fn parse_idx<T: Real, R1: Read, R2: Read>(mut images: R1, mut labels: R2, split: &str) -> Result<Dataset<T>> {
    let magic = read_u32(&mut images, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(&mut images, "images")? as usize;
    let h = read_u32(&mut images, "images")? as usize;
    let w = read_u32(&mut images, "images")? as usize;
    let magic = read_u32(&mut labels, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let nl = read_u32(&mut labels, "labels")? as usize;
    if n != nl {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    let pixels = read_payload(&mut images, n * h * w, "images")?;
    let labs = read_payload(&mut labels, n, "labels")?;
    let k = labs.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    Dataset::new(
        pixels.into_iter().map(|p| T::lit(f64::from(p) / 255.0)).collect(),
        labs.into_iter().map(usize::from).collect(),
        [h, w, 1],
        k,
        split,
    )
}

/// Loads an IDX image/label file pair (MNIST distribution format).
pub fn load_idx<T: Real>(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset<T>> {
    let split = images.as_ref().file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_idx(
        BufReader::new(File::open(images)?),
        BufReader::new(File::open(labels)?),
        &split,
    )
}

/// Writes a single-channel dataset as IDX streams, quantising to u8.
pub fn write_idx<T: Real, W1: Write, W2: Write>(d: &Dataset<T>, mut images: W1, mut labels: W2) -> Result<()> {
    let [h, w, c] = d.shape();
    if c != 1 {
        return Err(Error::IncompatibleShape(format!("IDX images are single-channel, got {c}")));
    }
    for v in [IDX_IMAGES_MAGIC, d.len() as u32, h as u32, w as u32] {
        images.write_all(&v.to_be_bytes())?;
    }
    let bytes: Vec<u8> = d.images().iter().map(|v| (v.as_f64() * 255.0).round() as u8).collect();
    images.write_all(&bytes)?;
    for v in [IDX_LABELS_MAGIC, d.len() as u32] {
        labels.write_all(&v.to_be_bytes())?;
    }
    labels.write_all(&d.labels().iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    Ok(())
}

/// Parameters of the synthetic generators.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// `raster-moons` or `blob-K` (K classes).
    pub generator: String,
    pub n: usize,
    pub shape: [usize; 3],
    /// Side of the centred window holding the class signal, as a fraction of
    /// the image.
    pub extent: f64,
    /// Amplitude of a class-signed checkerboard laid over the window.
    pub texture: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Blob radius (standard deviation) as a fraction of the window.
    pub blob_sigma: f64,
    /// Standard deviation of the class-conditional position noise; larger
    /// values make the classes overlap.
    pub jitter: f64,
}

impl SynthSpec {
    pub fn new(generator: &str, n: usize, shape: [usize; 3]) -> Self {
        SynthSpec {
            generator: generator.to_string(),
            n,
            shape,
            extent: 1.0,
            texture: 0.0,
            noise: 0.05,
            blob_sigma: 0.1,
            jitter: 0.1,
        }
    }

    /// Class count implied by the generator name.
    pub fn num_classes(&self) -> Result<usize> {
        if self.generator == "raster-moons" {
            return Ok(2);
        }
        self.generator
            .strip_prefix("blob-")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 2)
            .ok_or_else(|| Error::UnknownGenerator(self.generator.clone()))
    }
}

/// Point of the two-moons distribution for `class`, mapped into `[0, 1]^2`.
fn moon_point(rng: &mut ChaCha8Rng, class: usize, jitter: &Normal<f64>) -> (f64, f64) {
    let t = rng.gen_range(0.0..std::f64::consts::PI);
    let (x, y) = if class == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    let (x, y) = (x + jitter.sample(rng), y + jitter.sample(rng));
    // moons span x in [-1, 2], y in [-0.5, 1]; rows grow downward
    (((1.0 - y) / 1.5).clamp(0.0, 1.0), ((x + 1.0) / 3.0).clamp(0.0, 1.0))
}

fn blob_point(rng: &mut ChaCha8Rng, class: usize, k: usize, jitter: &Normal<f64>) -> (f64, f64) {
    // centres evenly spaced on a circle of radius 0.35 around the middle
    let a = std::f64::consts::TAU * class as f64 / k as f64;
    let (cy, cx) = (0.5 - 0.35 * a.cos(), 0.5 + 0.35 * a.sin());
    (
        (cy + jitter.sample(rng)).clamp(0.0, 1.0),
        (cx + jitter.sample(rng)).clamp(0.0, 1.0),
    )
}

/// Deterministic synthetic dataset. Classes cycle `0, 1, ..., k-1`, so class
/// counts differ by at most one.
///
/// Each image is a background level, a Gaussian blob at a class-dependent
/// position inside the centred window, an optional class-signed checkerboard
/// over the same window and pixel noise, clipped to `[0, 1]`.
pub fn synth_dataset<T: Real>(spec: &SynthSpec, seed: u64) -> Result<Dataset<T>> {
    let k = spec.num_classes()?;
    let [h, w, c] = spec.shape;
    if h == 0 || w == 0 || c == 0 || !(spec.extent > 0.0 && spec.extent <= 1.0) {
        return Err(Error::InvalidArgument(format!("bad synthetic geometry {:?} extent {}", spec.shape, spec.extent)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let jitter = Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let wh = spec.extent * h as f64;
    let ww = spec.extent * w as f64;
    let (top, left) = ((h as f64 - wh) / 2.0, (w as f64 - ww) / 2.0);
    let sigma = spec.blob_sigma * wh.min(ww);
    let background = 0.2;
    let mut images = Vec::with_capacity(spec.n * h * w * c);
    let mut labels = Vec::with_capacity(spec.n);
    for s in 0..spec.n {
        let class = s % k;
        let (py, px) = if k == 2 && spec.generator == "raster-moons" {
            moon_point(&mut rng, class, &jitter)
        } else {
            blob_point(&mut rng, class, k, &jitter)
        };
        // keep a one-sigma margin inside the window
        let cy = top + sigma + py * (wh - 2.0 * sigma).max(0.0);
        let cx = left + sigma + px * (ww - 2.0 * sigma).max(0.0);
        let sign = if class % 2 == 0 { 1.0 } else { -1.0 };
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let blob = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                let (ci, cj) = (i as f64 + 0.5, j as f64 + 0.5);
                let inside = ci >= top && ci < top + wh && cj >= left && cj < left + ww;
                let checker = match (inside, (i + j) % 2 == 0) {
                    (false, _) => 0.0,
                    (true, true) => 1.0,
                    (true, false) => -1.0,
                };
                let base = background + 0.75 * blob + spec.texture * sign * checker;
                for _ in 0..c {
                    let v = (base + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
                    images.push(T::lit(v));
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(images, labels, spec.shape, k, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset<f64> {
        Dataset::new(vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.5], vec![0, 1, 2], [1, 2, 1], 3, "t").unwrap()
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let d = Dataset::<f64>::new(
            (0..12).map(|v| v as f64 / 255.0).collect(),
            vec![3, 1, 4],
            [2, 2, 1],
            10,
            "x",
        )
        .unwrap();
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        write_idx(&d, &mut im, &mut lb).unwrap();
        assert_eq!(&im[..4], &[0, 0, 8, 3]);
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);
        let back: Dataset<f64> = parse_idx(&im[..], &lb[..], "x").unwrap();
        assert_eq!(back, d);

        let mut bad = im.clone();
        bad[3] = 0x04;
        assert_eq!(
            parse_idx::<f64, _, _>(&bad[..], &lb[..], "x").unwrap_err(),
            Error::BadMagic { expected: 0x803, found: 0x804 }
        );
        let mut short_labels = lb.clone();
        short_labels[7] = 2;
        short_labels.pop();
        assert_eq!(
            parse_idx::<f64, _, _>(&im[..], &short_labels[..], "x").unwrap_err(),
            Error::CountMismatch { images: 3, labels: 2 }
        );
        assert!(matches!(parse_idx::<f64, _, _>(&im[..im.len() - 1], &lb[..], "x"), Err(Error::Truncated(_))));
        assert!(matches!(parse_idx::<f64, _, _>(&im[..6], &lb[..], "x"), Err(Error::Truncated(_))));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::<f64>::new(vec![1.5], vec![0], [1, 1, 1], 2, "t").is_err());
        assert!(Dataset::<f64>::new(vec![0.5], vec![2], [1, 1, 1], 2, "t").is_err());
        assert!(matches!(
            Dataset::<f64>::new(vec![0.5; 3], vec![0], [1, 1, 1], 2, "t"),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn batching_and_subsets() {
        let d = tiny();
        let (x, y) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 1]);
        assert_eq!(x.data(), &[0.75, 0.5, 0.0, 0.5]);
        assert_eq!(y.data(), &[0., 0., 1., 1., 0., 0.]);
        let b = d.batch_indices::<ChaCha8Rng>(2, None);
        assert_eq!(b, vec![vec![0, 1], vec![2]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all: Vec<usize> = d.batch_indices(2, Some(&mut rng)).concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        let f = d.filter_classes(&[2, 0]);
        assert_eq!((f.labels(), f.num_classes()), (&[1, 0][..], 2));
        assert_eq!(f.image(0), &[0.0, 0.5]);
        let (a, b) = d.split_at(1);
        assert_eq!((a.len(), b.len()), (1, 2));
    }

    #[test]
    fn moons_are_balanced_and_deterministic() {
        let spec = SynthSpec::new("raster-moons", 2000, [8, 8, 1]);
        let a: Dataset<f64> = synth_dataset(&spec, 7).unwrap();
        assert_eq!(a.class_counts(), vec![1000, 1000]);
        let b: Dataset<f64> = synth_dataset(&spec, 7).unwrap();
        assert_eq!(a, b);
        let odd = SynthSpec::new("blob-3", 7, [6, 6, 2]);
        let c: Dataset<f32> = synth_dataset(&odd, 1).unwrap();
        assert_eq!(c.class_counts(), vec![3, 2, 2]);
        assert!(matches!(
            synth_dataset::<f64>(&SynthSpec::new("spirals", 4, [4, 4, 1]), 0),
            Err(Error::UnknownGenerator(_))
        ));
    }

    #[test]
    fn texture_is_class_signed_and_confined_to_window() {
        let mut spec = SynthSpec::new("raster-moons", 200, [10, 10, 1]);
        spec.noise = 0.0;
        spec.extent = 0.4;
        let plain: Dataset<f64> = synth_dataset(&spec, 3).unwrap();
        spec.texture = 0.1;
        let tex: Dataset<f64> = synth_dataset(&spec, 3).unwrap();
        // window rows and columns 3..7
        for n in 0..tex.len() {
            let sign = if tex.labels()[n] == 0 { 1.0 } else { -1.0 };
            for i in 0..10 {
                for j in 0..10 {
                    let inside = (3..7).contains(&i) && (3..7).contains(&j);
                    let checker = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    let want = if inside { 0.1 * sign * checker } else { 0.0 };
                    let (a, b) = (tex.image(n)[i * 10 + j], plain.image(n)[i * 10 + j]);
                    if a < 1.0 {
                        assert!((a - b - want).abs() < 1e-12, "sample {n} pixel ({i},{j})");
                    }
                }
            }
        }
    }
}
