//! Labelled datasets: CIFAR binary ingestion, augmentation, and a synthetic
//! grating set small enough to train in seconds.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs stacked along the first axis with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for inputs {:?}", labels.len(), inputs.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape (everything after the batch axis).
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }

    /// Shuffled mini-batch row indices; the last batch may be short.
    pub fn batches<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

/// Parses CIFAR binary records: `label_bytes` label bytes (the last one is
/// used) followed by 3072 channel-planar pixel bytes.
pub fn parse_cifar(bytes: &[u8], label_bytes: usize, classes: usize, path: &Path) -> Result<Dataset> {
    parse_records(bytes, label_bytes, [3, 32, 32], classes, path)
}

/// The same record layout with an arbitrary `[C,H,W]` image.
pub fn parse_records(
    bytes: &[u8],
    label_bytes: usize,
    image: [usize; 3],
    classes: usize,
    path: &Path,
) -> Result<Dataset> {
    if !(1..=2).contains(&label_bytes) {
        return Err(Error::config(format!("records carry 1 or 2 label bytes, not {label_bytes}")));
    }
    let pixels: usize = image.iter().product();
    let record = label_bytes + pixels;
    if bytes.len() % record != 0 {
        let n = bytes.len() / record;
        return Err(Error::data(
            path,
            format!(
                "truncated record {n} at byte offset {}: {} of {record} bytes present",
                n * record,
                bytes.len() - n * record
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(Error::data(
                path,
                format!("record {i} at byte offset {} has label {label} outside 0..{classes}", i * record),
            ));
        }
        labels.push(label);
        data.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    let [c, h, w] = image;
    let inputs = Tensor::new([n, c, h, w], data)?;
    Dataset::new(inputs, labels, classes)
}

pub fn load_records(path: &Path, label_bytes: usize, image: [usize; 3], classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, label_bytes, image, classes, path)
}

pub fn load_cifar(path: &Path, label_bytes: usize, classes: usize) -> Result<Dataset> {
    load_records(path, label_bytes, [3, 32, 32], classes)
}

/// Training-time image augmentation on `[C,H,W]` examples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub crop_pad: usize,
    pub flip: bool,
    /// Maximum brightness/contrast perturbation; 0 disables jitter.
    pub jitter: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            crop_pad: 4,
            flip: true,
            jitter: 0.0,
        }
    }
}

pub fn hflip(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = img[row + w - 1 - x];
            }
        }
    }
    out
}

/// Zero-padded crop at offset `(dy, dx)` in the padded frame.
pub fn padded_crop(img: &[f64], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

impl Augment {
    /// Augments every example of a `[N,C,H,W]` batch.
    pub fn apply<R: Rng>(&self, batch: &Tensor, rng: &mut R) -> Tensor {
        let s = batch.shape();
        if s.len() != 4 {
            return batch.clone();
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let per = c * h * w;
        let mut out = Vec::with_capacity(batch.numel());
        for img in batch.data().chunks(per) {
            let mut v = if self.crop_pad > 0 {
                let dy = rng.gen_range(0..=2 * self.crop_pad);
                let dx = rng.gen_range(0..=2 * self.crop_pad);
                padded_crop(img, c, h, w, self.crop_pad, dy, dx)
            } else {
                img.to_vec()
            };
            if self.flip && rng.gen_bool(0.5) {
                v = hflip(&v, c, h, w);
            }
            if self.jitter > 0.0 {
                let gain = 1.0 + rng.gen_range(-self.jitter..=self.jitter);
                let shift = rng.gen_range(-self.jitter..=self.jitter);
                v.iter_mut().for_each(|p| *p = (*p * gain + shift).clamp(0.0, 1.0));
            }
            out.extend(v);
        }
        Tensor::new(s.to_vec(), out).expect("same shape")
    }
}

/// Single-channel sinusoidal gratings, one orientation per class, with random
/// phase, frequency jitter and additive noise.
pub fn gratings<R: Rng>(n: usize, classes: usize, side: usize, noise: f64, rng: &mut R) -> Result<Dataset> {
    if classes == 0 || side == 0 {
        return Err(Error::config("grating set needs classes and a positive side"));
    }
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let theta = PI * label as f64 / classes as f64;
        let freq = rng.gen_range(0.25..0.45);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (s, c) = theta.sin_cos();
        for y in 0..side {
            for x in 0..side {
                let u = c * x as f64 + s * y as f64;
                data.push(0.5 + 0.5 * (freq * u + phase).sin() + gauss.sample(rng));
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new([n, 1, side, side], data)?, labels, classes)
}
