//! Optimisation loops: Adam with decoupled weight decay, contrastive
//! pretraining of encoder and projector, and few-shot calibration of encoder
//! and classifier with early stopping.

mod adam;

pub use adam::{adam_step, OptimizerState};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::dsp::FeatureSample;
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Mode, ParameterSet, Tensor};
use crate::loss::{contrastive_loss_graph, Pairing, TAU};
use crate::model::{
    classify, de_tensor, encode, infer, init_params, positions_tensor, project, reinit_classifier,
    ModelConfig, Output, CLASSIFIER_PREFIX, ENCODER_PREFIX, PROJECTOR_PREFIX,
};
use crate::montage::ChannelMontage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub pairing: Pairing,
    /// Diagonal attention mask during pretraining.
    pub masked: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 30,
            lr: 1e-4,
            weight_decay: 0.005,
            tau: TAU,
            pairing: Pairing::Full,
            masked: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// Share of each class held out for validation.
    pub val_fraction: f64,
    /// Tune only the classifier.
    pub freeze_encoder: bool,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            lr: 1e-5,
            weight_decay: 0.005,
            patience: 20,
            val_fraction: 0.2,
            freeze_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Labelled calibration samples per class.
    pub k_per_class: usize,
    pub pretrain: PretrainConfig,
    pub calibrate: CalibrateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            k_per_class: 20,
            pretrain: PretrainConfig::default(),
            calibrate: CalibrateConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pretrain;
        let c = &self.calibrate;
        let positive = [
            ("pretrain.batch_size", p.batch_size),
            ("pretrain.epochs", p.epochs),
            ("calibrate.batch_size", c.batch_size),
            ("calibrate.max_epochs", c.max_epochs),
            ("calibrate.patience", c.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if c.patience > c.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                c.patience, c.max_epochs
            )));
        }
        if !(p.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", p.tau)));
        }
        if !(c.val_fraction > 0.0 && c.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", c.val_fraction)));
        }
        OptimizerState::new(p.lr, p.weight_decay)?;
        OptimizerState::new(c.lr, c.weight_decay)?;
        Ok(())
    }
}

/// Mixes a base seed with a path of integers (SplitMix64 finaliser per step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = base;
    for &p in path {
        s = s.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}

fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

fn check_samples(samples: &[FeatureSample], montage: &ChannelMontage, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    if montage.len() != cfg.n_channels {
        return Err(Error::Shape(format!(
            "montage has {} channels, model expects {}",
            montage.len(),
            cfg.n_channels
        )));
    }
    for s in samples {
        if s.de.dim() != (cfg.n_channels, cfg.n_bands) {
            return Err(Error::Shape(format!(
                "sample {:?}, model expects ({}, {})",
                s.de.dim(),
                cfg.n_channels,
                cfg.n_bands
            )));
        }
        if s.label >= cfg.n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} with {} classes",
                s.label, cfg.n_classes
            )));
        }
    }
    Ok(())
}

/// Averages buffer updates that target the same name. Each update is
/// `(1 − m)·running + m·batch` from the same running value, so the mean is
/// the update for the averaged batch statistics.
fn merge_buffer_updates(updates: Vec<(String, Tensor)>) -> Result<Vec<(String, Tensor)>> {
    let mut grouped: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for (name, t) in updates {
        grouped.entry(name).or_default().push(t);
    }
    grouped
        .into_iter()
        .map(|(name, ts)| {
            let k = ts.len() as f64;
            let mut acc = ts[0].data().to_vec();
            for t in &ts[1..] {
                for (a, b) in acc.iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            acc.iter_mut().for_each(|a| *a /= k);
            Ok((name, Tensor::new(ts[0].shape().to_vec(), acc)?))
        })
        .collect()
}

fn keep_prefixes(grads: BTreeMap<String, Tensor>, prefixes: &[&str]) -> BTreeMap<String, Tensor> {
    grads
        .into_iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParameterSet,
    /// Mean contrastive loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Contrastive pretraining from a fresh initialisation seeded by
/// `tconf.seed`.
pub fn pretrain(
    samples: &[FeatureSample],
    montage: &ChannelMontage,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
    aconf: &AugmentConfig,
) -> Result<PretrainOutcome> {
    let init = init_params(mconf, tconf.seed)?;
    pretrain_from(init, samples, montage, mconf, tconf, aconf, &mut |_, _| {})
}

/// Contrastive pretraining of encoder and projector starting from `params`.
/// Each epoch shuffles the samples, cuts full batches (or one batch of
/// everything when fewer than a batch exist), builds two augmented views per
/// batch and minimises the contrastive loss. The classifier is never touched.
/// `on_epoch` receives the epoch index and its mean loss.
pub fn pretrain_from(
    mut params: ParameterSet,
    samples: &[FeatureSample],
    montage: &ChannelMontage,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
    aconf: &AugmentConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    tconf.validate()?;
    aconf.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("pretraining needs a non-empty bank".into()));
    }
    check_samples(samples, montage, mconf)?;
    let labels: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    if labels.len() < 2 {
        return Err(Error::Precondition(
            "pretraining needs at least two labels for negative pairs".into(),
        ));
    }
    let pc = &tconf.pretrain;
    let pos = positions_tensor(montage);
    let de: Vec<Array2<f64>> = samples.iter().map(FeatureSample::de_f64).collect();
    let batch = pc.batch_size.min(samples.len());
    let mut opt = OptimizerState::new(pc.lr, pc.weight_decay)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(pc.epochs);
    for epoch in 0..pc.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng(tconf.seed, &[1, epoch as u64]));
        let mut total = 0.0;
        let mut steps = 0;
        for (b, idx) in order.chunks_exact(batch).enumerate() {
            let path = [2, epoch as u64, b as u64];
            let xs: Vec<Array2<f64>> = idx.iter().map(|&i| de[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| samples[i].label).collect();
            let (va, vb) = make_views(&xs, &ys, aconf, &mut rng(tconf.seed, &path))?;
            let mut g = Graph::new(Mode::Train, derive_seed(tconf.seed, &[3, epoch as u64, b as u64]));
            let a = g.constant(de_tensor(&va)?)?;
            let ea = encode(&mut g, &params, mconf, a, &pos, pc.masked)?;
            let za = project(&mut g, &params, mconf, ea.q_final)?;
            let bv = g.constant(de_tensor(&vb)?)?;
            let eb = encode(&mut g, &params, mconf, bv, &pos, pc.masked)?;
            let zb = project(&mut g, &params, mconf, eb.q_final)?;
            let loss = contrastive_loss_graph(&mut g, za, zb, &ys, &ys, pc.tau, pc.pairing)?;
            total += g.value(loss).item();
            steps += 1;
            let grads = keep_prefixes(
                g.backward(loss)?.into_param_grads(),
                &[ENCODER_PREFIX, PROJECTOR_PREFIX],
            );
            adam_step(&mut params, &grads, &mut opt)?;
            params.apply_buffer_updates(merge_buffer_updates(g.take_buffer_updates())?)?;
        }
        let mean = total / steps as f64;
        on_epoch(epoch, mean);
        trace.push(mean);
    }
    Ok(PretrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// Tracks the best score and how long ago it was seen.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`; returns true when it strictly improves
    /// on every earlier score.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some(b) if score <= b => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some(score);
                self.best_epoch = epoch;
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationOutcome {
    /// Parameters at the best validation epoch.
    pub params: ParameterSet,
    pub epochs_run: usize,
    /// Zero-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub val_trace: Vec<f64>,
    pub loss_trace: Vec<f64>,
}

/// Stratified split of `labels` into fit and validation index lists, with at
/// least one sample of every class on each side.
pub fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!("label {l} with {n_classes} classes")));
        }
        by_class[l].push(i);
    }
    let mut r = rng(seed, &[4]);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Precondition(format!("class {c} has no labelled samples")));
        }
        if idx.len() < 2 {
            return Err(Error::Precondition(format!(
                "class {c} has one labelled sample; a validation split needs two"
            )));
        }
        idx.shuffle(&mut r);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        fit.extend_from_slice(&idx[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    Ok((fit, val))
}

/// Fine-tunes encoder and a freshly initialised classifier with
/// cross-entropy, the attention mask off. Stops when validation accuracy has
/// not improved for `patience` epochs and returns the best-validation
/// parameters. The projector is never touched.
pub fn calibrate(
    pretrained: &ParameterSet,
    labeled: &[FeatureSample],
    montage: &ChannelMontage,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
) -> Result<CalibrationOutcome> {
    calibrate_with(pretrained, labeled, montage, mconf, tconf, &mut |_, _, _| {})
}

/// [`calibrate`] with a callback receiving epoch, mean loss and validation
/// accuracy.
pub fn calibrate_with(
    pretrained: &ParameterSet,
    labeled: &[FeatureSample],
    montage: &ChannelMontage,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64, f64),
) -> Result<CalibrationOutcome> {
    tconf.validate()?;
    check_samples(labeled, montage, mconf)?;
    let cc = &tconf.calibrate;
    let labels: Vec<usize> = labeled.iter().map(|s| s.label).collect();
    let (fit, val) = stratified_split(&labels, mconf.n_classes, cc.val_fraction, tconf.seed)?;
    let mut params = pretrained.clone();
    reinit_classifier(&mut params, mconf, derive_seed(tconf.seed, &[5]))?;
    let pos = positions_tensor(montage);
    let de: Vec<Array2<f64>> = labeled.iter().map(FeatureSample::de_f64).collect();
    let val_x: Vec<Array2<f64>> = val.iter().map(|&i| de[i].clone()).collect();
    let val_y: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let tuned: &[&str] = if cc.freeze_encoder {
        &[CLASSIFIER_PREFIX]
    } else {
        &[ENCODER_PREFIX, CLASSIFIER_PREFIX]
    };

    let mut opt = OptimizerState::new(cc.lr, cc.weight_decay)?;
    let mut stopper = EarlyStopping::new(cc.patience);
    let mut best = params.clone();
    let mut order = fit.clone();
    let (mut val_trace, mut loss_trace) = (Vec::new(), Vec::new());
    for epoch in 0..cc.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng(tconf.seed, &[6, epoch as u64]));
        let mut total = 0.0;
        let mut steps = 0;
        for (b, idx) in order.chunks(cc.batch_size).enumerate() {
            let xs: Vec<Array2<f64>> = idx.iter().map(|&i| de[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(Mode::Train, derive_seed(tconf.seed, &[7, epoch as u64, b as u64]));
            let x = g.constant(de_tensor(&xs)?)?;
            let enc = encode(&mut g, &params, mconf, x, &pos, false)?;
            let logits = classify(&mut g, &params, mconf, enc.q_final)?;
            let loss = g.cross_entropy(logits, &ys)?;
            total += g.value(loss).item();
            steps += 1;
            let grads = keep_prefixes(g.backward(loss)?.into_param_grads(), tuned);
            adam_step(&mut params, &grads, &mut opt)?;
        }
        let acc = accuracy_of(&params, mconf, &pos, &val_x, &val_y)?;
        let mean = total / steps as f64;
        on_epoch(epoch, mean, acc);
        val_trace.push(acc);
        loss_trace.push(mean);
        if stopper.observe(epoch, acc) {
            best = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(CalibrationOutcome {
        params: best,
        epochs_run: val_trace.len(),
        best_epoch: stopper.best_epoch(),
        best_val_accuracy: stopper.best().unwrap_or(0.0),
        val_trace,
        loss_trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Test-mode class probabilities for each sample, the mask off.
pub fn predict_batch(
    params: &ParameterSet,
    mconf: &ModelConfig,
    montage: &ChannelMontage,
    samples: &[FeatureSample],
) -> Result<Vec<Prediction>> {
    check_samples(samples, montage, mconf)?;
    let de: Vec<Array2<f64>> = samples.iter().map(FeatureSample::de_f64).collect();
    let probs = infer(params, mconf, &positions_tensor(montage), &de, false, Output::Probabilities)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| {
            let p = r.to_vec();
            Prediction {
                label: argmax(&p),
                probabilities: p,
            }
        })
        .collect())
}

pub fn predict(
    params: &ParameterSet,
    mconf: &ModelConfig,
    montage: &ChannelMontage,
    sample: &FeatureSample,
) -> Result<Prediction> {
    Ok(predict_batch(params, mconf, montage, std::slice::from_ref(sample))?.remove(0))
}

/// Share of `de` whose test-mode prediction equals `labels`.
pub fn accuracy_of(
    params: &ParameterSet,
    mconf: &ModelConfig,
    pos: &Tensor,
    de: &[Array2<f64>],
    labels: &[usize],
) -> Result<f64> {
    if de.len() != labels.len() || de.is_empty() {
        return Err(Error::Shape(format!("{} samples, {} labels", de.len(), labels.len())));
    }
    let logits = infer(params, mconf, pos, de, false, Output::Logits)?;
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &l)| argmax(&r.to_vec()) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Test-mode accuracy on labelled samples.
pub fn accuracy(
    params: &ParameterSet,
    mconf: &ModelConfig,
    montage: &ChannelMontage,
    samples: &[FeatureSample],
) -> Result<f64> {
    check_samples(samples, montage, mconf)?;
    let de: Vec<Array2<f64>> = samples.iter().map(FeatureSample::de_f64).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy_of(params, mconf, &positions_tensor(montage), &de, &labels)
}
