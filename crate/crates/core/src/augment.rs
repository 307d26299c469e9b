//! MixUp, channel masking, and the two augmented views used for contrastive
//! pretraining.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Mixup,
    ChannelMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Shape of the symmetric Beta distribution λ is drawn from.
    pub mixup_alpha: f64,
    /// Probability that a channel is zeroed.
    pub mask_prob: f64,
    pub view_a: Vec<Transform>,
    pub view_b: Vec<Transform>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup_alpha: 0.2,
            mask_prob: 0.2,
            view_a: vec![Transform::Mixup],
            view_b: vec![Transform::ChannelMask],
        }
    }
}

impl AugmentConfig {
    /// Both views equal the raw batch.
    pub fn identity() -> Self {
        Self {
            view_a: vec![],
            view_b: vec![],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!("mixup_alpha {} must be > 0", self.mixup_alpha)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1)", self.mask_prob)));
        }
        Ok(())
    }
}

/// `λ·x_i + (1−λ)·x_j`.
pub fn mixup(x_i: &Array2<f64>, x_j: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if x_i.dim() != x_j.dim() {
        return Err(Error::Shape(format!("mixup {:?} vs {:?}", x_i.dim(), x_j.dim())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup λ = {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(x_i.clone());
    }
    if lambda == 0.0 {
        return Ok(x_j.clone());
    }
    Ok(x_i * lambda + x_j * (1.0 - lambda))
}

/// Multiplies row `c` by `mask[c]`.
pub fn mask_channels(x: &Array2<f64>, mask: &[bool]) -> Result<Array2<f64>> {
    if mask.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} channels",
            mask.len(),
            x.nrows()
        )));
    }
    let mut out = x.clone();
    for (mut row, &keep) in out.rows_mut().into_iter().zip(mask) {
        if !keep {
            row.fill(0.0);
        }
    }
    Ok(out)
}

/// Draws a keep-mask where each channel is dropped with probability `p`.
/// A mask that would drop every channel is redrawn.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    loop {
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
        if mask.iter().any(|&k| k) {
            return mask;
        }
    }
}

fn apply<R: Rng + ?Sized>(
    transforms: &[Transform],
    batch: &[Array2<f64>],
    labels: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    let mut view = batch.to_vec();
    for t in transforms {
        match t {
            Transform::Mixup => {
                let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
                    .map_err(|e| Error::Config(format!("beta: {e}")))?;
                let src = view.clone();
                for (i, out) in view.iter_mut().enumerate() {
                    let partners: Vec<usize> = (0..src.len())
                        .filter(|&j| j != i && labels[j] == labels[i])
                        .collect();
                    if partners.is_empty() {
                        continue;
                    }
                    let j = partners[rng.random_range(0..partners.len())];
                    let lambda: f64 = beta.sample(rng);
                    *out = mixup(&src[i], &src[j], lambda.clamp(0.0, 1.0))?;
                }
            }
            Transform::ChannelMask => {
                for out in view.iter_mut() {
                    let mask = sample_mask(out.nrows(), cfg.mask_prob, rng);
                    *out = mask_channels(out, &mask)?;
                }
            }
        }
    }
    Ok(view)
}

/// Builds the two index-aligned views of a batch. MixUp partners are drawn
/// from samples with the same label, so every view keeps the batch labels.
pub fn make_views<R: Rng + ?Sized>(
    batch: &[Array2<f64>],
    labels: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.len() != labels.len() {
        return Err(Error::Shape(format!("{} samples, {} labels", batch.len(), labels.len())));
    }
    cfg.validate()?;
    let a = apply(&cfg.view_a, batch, labels, cfg, rng)?;
    let b = apply(&cfg.view_b, batch, labels, cfg, rng)?;
    Ok((a, b))
}
