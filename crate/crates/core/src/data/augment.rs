use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::autodiff::{perfect_sqrt, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub cutmix_enabled: bool,
    pub mixup_enabled: bool,
    /// Probability of patch-wise CutMix when both are enabled.
    pub switch_prob: f64,
    /// Mixup draws `λ ~ Beta(mixup_beta, mixup_beta)`.
    pub mixup_beta: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { cutmix_enabled: true, mixup_enabled: true, switch_prob: 0.5, mixup_beta: 0.8 }
    }
}

impl AugConfig {
    /// No mixing: every example keeps its own image and one-hot labels.
    pub fn off() -> Self {
        AugConfig { cutmix_enabled: false, mixup_enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::contract(format!("switch_prob {} outside [0, 1]", self.switch_prob)));
        }
        if !(self.mixup_beta > 0.0 && self.mixup_beta.is_finite()) {
            return Err(Error::contract(format!("mixup_beta {} must be positive", self.mixup_beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    CutMix,
    Mixup,
    Identity,
}

/// One augmented training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: Tensor<f32>,
    /// `[classes]`.
    pub image_label: Vec<f32>,
    /// `[K · classes]`, patch-major.
    pub patch_labels: Vec<f32>,
    /// Weight of the first source.
    pub lambda: f64,
    pub kind: AugKind,
    /// CutMix only: `true` where the patch comes from the first source.
    pub mask: Option<Vec<bool>>,
}

fn one_hot(label: usize, classes: usize) -> Result<Vec<f32>> {
    if label >= classes {
        return Err(Error::contract(format!("label {label} of {classes} classes")));
    }
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Ok(v)
}

fn blend(a: &[f32], b: &[f32], lambda: f64) -> Vec<f32> {
    let l = lambda as f32;
    let m = 1.0 - l;
    a.iter().zip(b).map(|(&x, &y)| l * x + m * y).collect()
}

/// Side length of the patch grid and of one pixel patch.
fn patch_geometry(k: usize, image: &Tensor<f32>) -> Result<(usize, usize)> {
    let side = match perfect_sqrt(k) {
        Some(s) if s > 0 => s,
        _ => return Err(Error::contract(format!("K = {k} is not a perfect square"))),
    };
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h != w || h % side != 0 {
        return Err(Error::contract(format!("{side}x{side} patches do not tile a {h}x{w} image")));
    }
    Ok((side, h / side))
}

fn check_pair(s1: &Sample, s2: &Sample) -> Result<()> {
    if s1.image.shape() != s2.image.shape() || s1.image.rank() != 3 || s1.image.shape()[0] != 3 {
        return Err(Error::dim("augment", format!("{:?} vs {:?}", s1.image.shape(), s2.image.shape())));
    }
    Ok(())
}

/// `K` independent fair bits.
pub fn cutmix_mask<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<bool> {
    (0..k).map(|_| rng.random::<bool>()).collect()
}

/// Patch `p` (row-major over the patch grid) is copied from `s1` where
/// `mask[p]` holds, else from `s2`; its label follows its source.
pub fn cutmix_with_mask(s1: &Sample, s2: &Sample, mask: &[bool], classes: usize) -> Result<Augmented> {
    check_pair(s1, s2)?;
    let k = mask.len();
    let (side, patch) = patch_geometry(k, &s1.image)?;
    let (y1, y2) = (one_hot(s1.label, classes)?, one_hot(s2.label, classes)?);
    let n = s1.image.shape()[1];
    let mut data = s2.image.data().to_vec();
    let src = s1.image.data();
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (py, px) = (p / side * patch, p % side * patch);
        for c in 0..3 {
            for y in py..py + patch {
                let row = (c * n + y) * n;
                data[row + px..row + px + patch].copy_from_slice(&src[row + px..row + px + patch]);
            }
        }
    }
    let ones = mask.iter().filter(|&&m| m).count();
    let lambda = ones as f64 / k as f64;
    let patch_labels = mask.iter().flat_map(|&m| if m { y1.clone() } else { y2.clone() }).collect();
    Ok(Augmented {
        image: Tensor::new(s1.image.shape().to_vec(), data)?,
        image_label: blend(&y1, &y2, lambda),
        patch_labels,
        lambda,
        kind: AugKind::CutMix,
        mask: Some(mask.to_vec()),
    })
}

pub fn patchwise_cutmix<R: Rng + ?Sized>(s1: &Sample, s2: &Sample, k: usize, classes: usize, rng: &mut R) -> Result<Augmented> {
    patch_geometry(k, &s1.image)?;
    cutmix_with_mask(s1, s2, &cutmix_mask(k, rng), classes)
}

/// Pixelwise blend; every patch carries the image label.
pub fn mixup_tokens(s1: &Sample, s2: &Sample, lambda: f64, k: usize, classes: usize) -> Result<Augmented> {
    check_pair(s1, s2)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("mixup λ = {lambda} outside [0, 1]")));
    }
    let image_label = blend(&one_hot(s1.label, classes)?, &one_hot(s2.label, classes)?, lambda);
    Ok(Augmented {
        image: Tensor::new(s1.image.shape().to_vec(), blend(s1.image.data(), s2.image.data(), lambda))?,
        patch_labels: image_label.repeat(k),
        image_label,
        lambda,
        kind: AugKind::Mixup,
        mask: None,
    })
}

fn identity(s: &Sample, k: usize, classes: usize) -> Result<Augmented> {
    let y = one_hot(s.label, classes)?;
    Ok(Augmented {
        image: s.image.clone(),
        patch_labels: y.repeat(k),
        image_label: y,
        lambda: 1.0,
        kind: AugKind::Identity,
        mask: None,
    })
}

/// Patch-wise CutMix with probability `switch_prob`, otherwise Mixup.
/// A disabled method hands every draw to the other one; with both off the
/// first sample passes through unchanged.
pub fn switch_augment<R: Rng + ?Sized>(
    s1: &Sample,
    s2: &Sample,
    cfg: &AugConfig,
    k: usize,
    classes: usize,
    rng: &mut R,
) -> Result<Augmented> {
    cfg.validate()?;
    let cutmix = match (cfg.cutmix_enabled, cfg.mixup_enabled) {
        (false, false) => return identity(s1, k, classes),
        (true, false) => true,
        (false, true) => false,
        (true, true) => rng.random::<f64>() < cfg.switch_prob,
    };
    if cutmix {
        patchwise_cutmix(s1, s2, k, classes, rng)
    } else {
        let lambda = Beta::new(cfg.mixup_beta, cfg.mixup_beta).unwrap().sample(rng);
        mixup_tokens(s1, s2, lambda, k, classes)
    }
}

/// Images with image-level and patch-level soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// `[B, 3, H, W]`.
    pub images: Tensor<f32>,
    /// `[B, classes]`.
    pub image_labels: Tensor<f32>,
    /// `[B, K, classes]`.
    pub patch_labels: Tensor<f32>,
}

impl LabeledBatch {
    pub fn from_augmented(items: &[Augmented]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::contract("empty batch"))?;
        let classes = first.image_label.len();
        let k = first.patch_labels.len() / classes.max(1);
        let b = items.len();
        let mut shape = vec![b];
        shape.extend_from_slice(first.image.shape());
        let images = Tensor::new(shape, items.iter().flat_map(|a| a.image.data().iter().copied()).collect())?;
        let image_labels = Tensor::new([b, classes], items.iter().flat_map(|a| a.image_label.iter().copied()).collect())?;
        let patch_labels =
            Tensor::new([b, k, classes], items.iter().flat_map(|a| a.patch_labels.iter().copied()).collect())?;
        let batch = LabeledBatch { images, image_labels, patch_labels };
        batch.validate()?;
        Ok(batch)
    }

    /// Unmixed samples with one-hot labels.
    pub fn plain(samples: &[&Sample], k: usize, classes: usize) -> Result<Self> {
        let items = samples.iter().map(|s| identity(s, k, classes)).collect::<Result<Vec<_>>>()?;
        Self::from_augmented(&items)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.image_labels.shape()[1]
    }

    pub fn patches(&self) -> usize {
        self.patch_labels.shape()[1]
    }

    /// Shapes agree and every label row sums to 1 within `1e-5`.
    pub fn validate(&self) -> Result<()> {
        let b = self.images.shape()[0];
        let c = self.image_labels.shape()[1];
        if self.image_labels.shape()[0] != b || self.patch_labels.shape()[0] != b || self.patch_labels.shape()[2] != c {
            return Err(Error::dim(
                "labeled batch",
                format!(
                    "images {:?}, image labels {:?}, patch labels {:?}",
                    self.images.shape(),
                    self.image_labels.shape(),
                    self.patch_labels.shape()
                ),
            ));
        }
        for row in self.image_labels.data().chunks(c).chain(self.patch_labels.data().chunks(c)) {
            let s: f32 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::contract(format!("label row sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Augmented batch of `samples[indices]`. Example `j` is mixed with
/// example `B - 1 - j`; its random draws come from a stream keyed by
/// `(epoch, indices[j])`, so the result does not depend on scheduling.
pub fn build_batch(
    samples: &[Sample],
    indices: &[usize],
    cfg: &AugConfig,
    k: usize,
    classes: usize,
    seed: u64,
    epoch: u64,
) -> Result<LabeledBatch> {
    let b = indices.len();
    if let Some(&i) = indices.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::contract(format!("sample index {i} of {}", samples.len())));
    }
    let items = (0..b)
        .into_par_iter()
        .map(|j| {
            let (s1, s2) = (&samples[indices[j]], &samples[indices[b - 1 - j]]);
            let mut r = rng::stream(seed, &[tag::AUGMENT, epoch, indices[j] as u64]);
            switch_augment(s1, s2, cfg, k, classes, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledBatch::from_augmented(&items)
}
