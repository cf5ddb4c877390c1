//! Datasets, splits and token-labeling augmentation.
//!
//! On disk a dataset is a directory with `manifest.json` and `data.bin`.
//! The binary file holds `count` records of one label byte followed by
//! `3·H·W` raw channel-major pixel bytes. Pixels are scaled to `[0, 1]`
//! by dividing by 255 on load.

mod augment;

pub use augment::{
    build_batch, cutmix_mask, cutmix_with_mask, mixup_tokens, patchwise_cutmix, switch_augment, AugConfig, AugKind,
    Augmented, LabeledBatch,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// `format` value of a manifest describing binary records.
pub const RECORD_FORMAT: &str = "cifar-bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "data.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub count: usize,
}

impl Manifest {
    pub fn record_len(&self) -> usize {
        1 + 3 * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: RECORD_FORMAT.into(),
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            count: self.samples.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::contract(format!("{} classes; records hold 1 to 256", self.num_classes)));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(Error::contract(format!("sample {i} has label {} of {} classes", s.label, self.num_classes)));
            }
            if s.image.shape() != [3, self.height, self.width] {
                return Err(Error::contract(format!(
                    "sample {i} has shape {:?}, dataset is 3x{}x{}",
                    s.image.shape(),
                    self.height,
                    self.width
                )));
            }
        }
        Ok(())
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Same header, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset { num_classes: self.num_classes, height: self.height, width: self.width, samples }
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Encodes samples as binary records. Pixels are rounded to the nearest
/// of the 256 levels, so images already on those levels round-trip exactly.
pub fn encode_records(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let mut out = Vec::with_capacity(dataset.len() * dataset.manifest().record_len());
    for s in &dataset.samples {
        out.push(s.label as u8);
        out.extend(s.image.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn decode_records(bytes: &[u8], manifest: &Manifest) -> Result<Vec<Sample>> {
    if manifest.format != RECORD_FORMAT {
        return Err(Error::Format { offset: 0, detail: format!("unknown dataset format `{}`", manifest.format) });
    }
    let len = manifest.record_len();
    if !bytes.len().is_multiple_of(len) {
        let offset = (bytes.len() - bytes.len() % len) as u64;
        return Err(Error::Format {
            offset,
            detail: format!("trailing record of {} bytes, records are {len} bytes", bytes.len() % len),
        });
    }
    if bytes.len() / len != manifest.count {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("{} records, manifest declares {}", bytes.len() / len, manifest.count),
        });
    }
    bytes
        .chunks(len)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= manifest.num_classes {
                return Err(Error::Format {
                    offset: (i * len) as u64,
                    detail: format!("label {label} of {} classes", manifest.num_classes),
                });
            }
            let pixels = rec[1..].iter().map(|&b| dequantize(b)).collect();
            Ok(Sample { image: Tensor::new([3, manifest.height, manifest.width], pixels)?, label })
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes `manifest.json` and `data.bin` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode_records(dataset)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, serde_json::to_string_pretty(&dataset.manifest())?).map_err(io_err(&manifest))?;
    let records = dir.join(RECORDS_FILE);
    fs::write(&records, bytes).map_err(io_err(&records))
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// A dataset directory or its manifest file.
    Records(PathBuf),
    Synthetic(SyntheticSpec),
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Records(path) => read_dataset(path),
        DataSource::Synthetic(spec) => spec.generate(),
    }
}

/// Reads a dataset directory, or the directory holding the given manifest.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (manifest_path, dir) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let records = dir.join(RECORDS_FILE);
    let bytes = fs::read(&records).map_err(io_err(&records))?;
    let samples = decode_records(&bytes, &manifest)?;
    Ok(Dataset { num_classes: manifest.num_classes, height: manifest.height, width: manifest.width, samples })
}

/// Class-dependent Gaussian blobs on a noisy grey background. Each class
/// has its own blob centre and colour; samples jitter the centre. Labels
/// cycle through the classes, so counts differ by at most one. Pixels sit
/// on the 256 record levels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.num_classes == 0 || self.num_classes > 256 || self.size == 0 {
            return Err(Error::contract(format!(
                "synthetic data needs 1 to 256 classes and a positive size, got {} and {}",
                self.num_classes, self.size
            )));
        }
        let n = self.size;
        let side = n as f64;
        let classes: Vec<([f64; 2], [f64; 3])> = (0..self.num_classes)
            .map(|c| {
                let mut r = rng::stream(self.seed, &[tag::SYNTHETIC, 0, c as u64]);
                let centre = [r.random_range(0.2..0.8) * side, r.random_range(0.2..0.8) * side];
                let colour = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
                (centre, colour)
            })
            .collect();
        let sigma = side / 6.0;
        let jitter = Normal::new(0.0, side / 24.0).unwrap();
        let noise = Normal::new(0.0, 0.08).unwrap();
        let samples = (0..self.count)
            .map(|i| {
                let label = i % self.num_classes;
                let mut r = rng::stream(self.seed, &[tag::SYNTHETIC, 1, i as u64]);
                let (centre, colour) = classes[label];
                let (cy, cx) = (centre[0] + jitter.sample(&mut r), centre[1] + jitter.sample(&mut r));
                let mut data = vec![0f32; 3 * n * n];
                for y in 0..n {
                    for x in 0..n {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let w = (-d2 / (2.0 * sigma * sigma)).exp();
                        for (ch, &col) in colour.iter().enumerate() {
                            let v = 0.5 * (1.0 - w) + col * w + noise.sample(&mut r);
                            data[(ch * n + y) * n + x] = dequantize(quantize(v as f32));
                        }
                    }
                }
                Ok(Sample { image: Tensor::new([3, n, n], data)?, label })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { num_classes: self.num_classes, height: n, width: n, samples })
    }
}

/// Holds out `per_class_val` samples of every class that occurs, chosen by
/// a per-class seeded shuffle. Both parts keep the input order. Returns
/// `(subtrain, subval)` index lists.
pub fn split_indices(labels: &[usize], per_class_val: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut is_val = vec![false; labels.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() <= per_class_val {
            return Err(Error::contract(format!(
                "class {c} has {} samples, needs more than {per_class_val} to hold out {per_class_val}",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, &[tag::SPLIT, c as u64]));
        for &i in &members[..per_class_val] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| is_val[i]);
    Ok((train, val))
}

/// Sub-train and sub-validation parts of `samples`.
pub fn subtrain_subval_split(samples: &[Sample], per_class_val: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (train, val) = split_indices(&labels, per_class_val, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| samples[i].clone()).collect();
    Ok((pick(train), pick(val)))
}

/// Visiting order of `n` samples in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch]));
    order
}
