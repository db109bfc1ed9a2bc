//! Datasets: seeded synthetic shape images and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Shape, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MEAN: [Real; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [Real; 3] = [0.2470, 0.2435, 0.2616];

/// Labelled images held as one `N×C×H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::shape(format!("{} labels for images {}", labels.len(), images.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::shape(format!("label {l} for {n_classes} classes")));
        }
        Ok(Dataset { images, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Shape {
        let s = self.images.shape();
        Shape::new(1, s.c, s.h, s.w)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_batch(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Seeded shuffle, then the first `round(fraction·N)` samples go to the
    /// second half of the returned pair.
    pub fn split(&self, fraction: Real, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("split fraction must lie in (0,1], got {fraction}")));
        }
        let perm = rng.permutation(self.len());
        let k = ((self.len() as Real) * fraction).round() as usize;
        let (held, rest) = perm.split_at(k);
        Ok((self.subset(rest), self.subset(held)))
    }

    /// `(x − mean_c) / std_c` per channel.
    pub fn normalize(&mut self, mean: &[Real], std: &[Real]) -> Result<()> {
        let s = self.images.shape();
        if mean.len() != s.c || std.len() != s.c || std.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config(format!("normalization needs {} means and positive stds", s.c)));
        }
        let plane = s.plane();
        for (i, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let c = i % s.c;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[c]) / std[c]);
        }
        Ok(())
    }
}

/// Batches of indices covering `0..n` in `order`; the last one may be short.
pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}

/// Parses concatenated 3073-byte CIFAR-10 records; pixels scaled to [0,1].
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::TruncatedRecord(bytes.len() % CIFAR_RECORD));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::LabelOutOfRange(rec[0]));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as Real / 255.0));
    }
    Dataset::new(Tensor::new([n, 3, 32, 32], data)?, labels, 10)
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar10(&fs::read(path)?)
}

/// Concatenates several datasets of equal image shape.
pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or(Error::EmptyDataset)?;
    let (shape, k) = (first.image_shape(), first.n_classes);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.image_shape() != shape {
            return Err(Error::shape(format!("cannot concatenate {} with {}", p.image_shape(), shape)));
        }
        labels.extend(p.labels);
        data.extend(p.images.into_data());
    }
    let n = labels.len();
    Dataset::new(Tensor::new([n, shape.c, shape.h, shape.w], data)?, labels, k)
}

/// The eight synthetic pattern classes, in label order.
pub const PATTERNS: [&str; 8] =
    ["horizontal_bar", "vertical_bar", "centered_blob", "corner_blob", "diagonal", "cross", "ring", "checker"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_hw: (usize, usize),
    pub channels: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub noise_std: Real,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { image_hw: (16, 16), channels: 3, n_classes: 8, n_samples: 1024, noise_std: 1.0, seed: 0 }
    }
}

fn paint(img: &mut [Real], h: usize, w: usize, class: usize, amp: Real, rng: &mut RngStream) {
    let mut put = |i: usize, j: usize| img[i * w + j] = amp;
    let (hf, wf) = (h as Real, w as Real);
    match class {
        0 => {
            let r = rng.below(h.saturating_sub(1).max(1));
            for i in r..(r + 2).min(h) {
                (0..w).for_each(|j| put(i, j));
            }
        }
        1 => {
            let c = rng.below(w.saturating_sub(1).max(1));
            for j in c..(c + 2).min(w) {
                (0..h).for_each(|i| put(i, j));
            }
        }
        2 | 3 => {
            let rad = 0.2 * hf.min(wf);
            let (ci, cj) = if class == 2 {
                (hf / 2.0 - 0.5 + rng.uniform_range(-1.0, 1.0), wf / 2.0 - 0.5 + rng.uniform_range(-1.0, 1.0))
            } else {
                let corner = rng.below(4);
                let (a, b) = (rad, hf - 1.0 - rad);
                let (c, d) = (rad, wf - 1.0 - rad);
                (if corner & 1 == 0 { a } else { b }, if corner & 2 == 0 { c } else { d })
            };
            for i in 0..h {
                for j in 0..w {
                    let (di, dj) = (i as Real - ci, j as Real - cj);
                    if di * di + dj * dj <= rad * rad {
                        put(i, j);
                    }
                }
            }
        }
        4 => {
            let anti = rng.below(2) == 1;
            let off = rng.below(5) as isize - 2;
            for i in 0..h {
                let j = if anti { w as isize - 1 - i as isize + off } else { i as isize + off };
                if (0..w as isize).contains(&j) {
                    put(i, j as usize);
                }
            }
        }
        5 => {
            let (r, c) = (h / 4 + rng.below(h / 2 + 1), w / 4 + rng.below(w / 2 + 1));
            (0..w).for_each(|j| put(r.min(h - 1), j));
            (0..h).for_each(|i| put(i, c.min(w - 1)));
        }
        6 => {
            let (ci, cj) = (hf / 2.0 - 0.5, wf / 2.0 - 0.5);
            let rad = 0.3 * hf.min(wf) + rng.uniform_range(-0.5, 0.5);
            for i in 0..h {
                for j in 0..w {
                    let d = ((i as Real - ci).powi(2) + (j as Real - cj).powi(2)).sqrt();
                    if (d - rad).abs() <= 0.75 {
                        put(i, j);
                    }
                }
            }
        }
        _ => {
            let cell = (h.min(w) / 4).max(1);
            let phase = rng.below(2);
            for i in 0..h {
                for j in 0..w {
                    if (i / cell + j / cell + phase) % 2 == 0 {
                        put(i, j);
                    }
                }
            }
        }
    }
}

/// Seeded, class-balanced pattern images with additive Gaussian pixel noise.
/// Sample `i` has label `i mod K` before the final seeded shuffle.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    gen_synthetic_split(spec, "train")
}

/// Like [`gen_synthetic`] but drawn from the streams of the named split, so
/// train and test sets of one spec are independent.
pub fn gen_synthetic_split(spec: &SyntheticSpec, split: &str) -> Result<Dataset> {
    if !(2..=8).contains(&spec.n_classes) {
        return Err(Error::UnsupportedClassCount(spec.n_classes));
    }
    if spec.noise_std < 0.0 || !spec.noise_std.is_finite() {
        return Err(Error::Config(format!("noise_std must be finite and >= 0, got {}", spec.noise_std)));
    }
    let (h, w) = spec.image_hw;
    if h < 4 || w < 4 || spec.channels == 0 {
        return Err(Error::Config("synthetic images need at least 4×4 pixels and one channel".into()));
    }
    let mut rng = RngStream::new(spec.seed, &format!("synthetic/{split}/images"));
    let plane = h * w;
    let per = spec.channels * plane;
    let mut data = vec![0.0; spec.n_samples * per];
    let mut labels = Vec::with_capacity(spec.n_samples);
    for (i, img) in data.chunks_mut(per).enumerate() {
        let class = i % spec.n_classes;
        labels.push(class);
        let amp = rng.uniform_range(0.6, 1.0);
        let (first, rest) = img.split_at_mut(plane);
        paint(first, h, w, class, amp, &mut rng);
        for c in rest.chunks_mut(plane) {
            c.copy_from_slice(first);
        }
        if spec.noise_std > 0.0 {
            img.iter_mut().for_each(|v| *v += rng.normal(0.0, spec.noise_std));
        }
    }
    let ds = Dataset::new(Tensor::new([spec.n_samples, spec.channels, h, w], data)?, labels, spec.n_classes)?;
    let perm = RngStream::new(spec.seed, &format!("synthetic/{split}/order")).permutation(spec.n_samples);
    Ok(ds.subset(&perm))
}

/// Zeroes one `length×length` square per sample, centred uniformly over the
/// image and clipped at the borders.
pub fn cutout(x: &Tensor, length: usize, rng: &mut RngStream) -> Tensor {
    let mut out = x.clone();
    let s = x.shape();
    if length == 0 {
        return out;
    }
    for n in 0..s.n {
        let (ci, cj) = (rng.below(s.h) as isize, rng.below(s.w) as isize);
        let half = (length / 2) as isize;
        let (i0, j0) = ((ci - half).max(0) as usize, (cj - half).max(0) as usize);
        let i1 = ((ci - half + length as isize).max(0) as usize).min(s.h);
        let j1 = ((cj - half + length as isize).max(0) as usize).min(s.w);
        for c in 0..s.c {
            for i in i0..i1 {
                for j in j0..j1 {
                    out.set(n, c, i, j, 0.0);
                }
            }
        }
    }
    out
}
