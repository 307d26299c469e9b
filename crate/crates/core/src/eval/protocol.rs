use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{run_parallel, EvalReport};
use crate::augment::AugmentConfig;
use crate::data_io::{apply_split, SampleBank, SplitProtocol};
use crate::dsp::FeatureSample;
use crate::error::{Error, Result};
use crate::gradcore::ParameterSet;
use crate::model::{init_params, ModelConfig};
use crate::train::{accuracy, calibrate, derive_seed, pretrain_from, CalibrationOutcome, TrainConfig};

/// One leave-one-subject-out fold.
#[derive(Clone, Debug)]
pub struct Fold {
    pub subject: u32,
    /// Seed of everything trained in this fold.
    pub seed: u64,
    /// Samples of every other subject.
    pub source: Vec<FeatureSample>,
    /// Labelled samples used for calibration.
    pub calibration: Vec<FeatureSample>,
    /// Held-out samples of `subject`.
    pub test: Vec<FeatureSample>,
}

#[derive(Clone, Debug)]
pub struct LosoOptions {
    /// Which trials of the held-out subject may be drawn for calibration
    /// (train side); the test side is scored.
    pub protocol: SplitProtocol,
    /// Also calibrate the fold's untrained initialisation.
    pub baseline: bool,
    /// Folds run concurrently on this many threads. Results do not depend
    /// on it.
    pub jobs: usize,
}

/// The randomly initialised comparison model of a fold.
#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub calibration: CalibrationOutcome,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub subject: u32,
    pub seed: u64,
    pub pretrain_loss: Vec<f64>,
    /// Encoder and projector after pretraining.
    pub pretrained: ParameterSet,
    pub calibration: CalibrationOutcome,
    pub accuracy: f64,
    pub baseline: Option<BaselineRun>,
}

fn fold_seed(base: u64, subject: u32) -> u64 {
    derive_seed(base, &[16, u64::from(subject)])
}

/// `k` samples of every class, drawn without replacement.
pub fn draw_per_class(
    samples: &[FeatureSample],
    n_classes: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<FeatureSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * n_classes);
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == c).collect();
        if idx.is_empty() {
            return Err(Error::Precondition(format!("class {c} is absent from the calibration split")));
        }
        if idx.len() < k {
            return Err(Error::Precondition(format!(
                "class {c} has {} samples in the calibration split, {k} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| samples[i].clone()));
    }
    Ok(out)
}

/// Builds the folds. With `k_per_class > 0` calibration draws that many
/// samples per class from the held-out subject's train side and the test
/// side is scored. With `k_per_class == 0` no target labels are used:
/// calibration takes the source subjects' train sides and every sample of
/// the held-out subject is scored.
pub fn losocv_folds(
    bank: &SampleBank,
    protocol: &SplitProtocol,
    k_per_class: usize,
    seed: u64,
) -> Result<Vec<Fold>> {
    let subjects = bank.subjects();
    if subjects.len() < 2 {
        return Err(Error::Precondition(format!(
            "leave-one-subject-out needs at least 2 subjects, the bank has {}",
            subjects.len()
        )));
    }
    subjects
        .iter()
        .map(|&s| {
            let seed = fold_seed(seed, s);
            let (source, target): (Vec<FeatureSample>, Vec<FeatureSample>) =
                bank.samples.iter().cloned().partition(|x| x.subject_id != s);
            let (calibration, test) = if k_per_class == 0 {
                (apply_split(&source, protocol)?.0, target)
            } else {
                let (pool, test) = apply_split(&target, protocol)?;
                let calibration = draw_per_class(&pool, bank.n_classes(), k_per_class, derive_seed(seed, &[1]))
                    .map_err(|e| match e {
                        Error::Precondition(m) => Error::Precondition(format!("subject {s}: {m}")),
                        e => e,
                    })?;
                (calibration, test)
            };
            Ok(Fold {
                subject: s,
                seed,
                source,
                calibration,
                test,
            })
        })
        .collect()
}

/// Pretrains on the fold's source subjects from the fold's initialisation,
/// calibrates and scores. The baseline, when requested, calibrates that same
/// initialisation on the same samples with the same seeds.
pub fn run_fold(
    fold: &Fold,
    bank: &SampleBank,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
    aconf: &AugmentConfig,
    baseline: bool,
) -> Result<FoldRun> {
    let t = TrainConfig {
        seed: fold.seed,
        ..tconf.clone()
    };
    let init = init_params(mconf, t.seed)?;
    let pre = pretrain_from(init.clone(), &fold.source, &bank.montage, mconf, &t, aconf, &mut |_, _| {})?;
    let calibration = calibrate(&pre.params, &fold.calibration, &bank.montage, mconf, &t)?;
    let acc = accuracy(&calibration.params, mconf, &bank.montage, &fold.test)?;
    let baseline = if baseline {
        let calibration = calibrate(&init, &fold.calibration, &bank.montage, mconf, &t)?;
        let accuracy = accuracy(&calibration.params, mconf, &bank.montage, &fold.test)?;
        Some(BaselineRun { calibration, accuracy })
    } else {
        None
    };
    Ok(FoldRun {
        subject: fold.subject,
        seed: fold.seed,
        pretrain_loss: pre.loss_trace,
        pretrained: pre.params,
        calibration,
        accuracy: acc,
        baseline,
    })
}

/// Every fold of [`losocv_folds`] through [`run_fold`], in subject order.
pub fn losocv_runs(
    bank: &SampleBank,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
    aconf: &AugmentConfig,
    opts: &LosoOptions,
) -> Result<Vec<FoldRun>> {
    tconf.validate()?;
    let folds = losocv_folds(bank, &opts.protocol, tconf.k_per_class, tconf.seed)?;
    run_parallel(&folds, opts.jobs, |f| run_fold(f, bank, mconf, tconf, aconf, opts.baseline))
}

/// Leave-one-subject-out accuracy of the pretrained and calibrated model.
pub fn losocv(
    bank: &SampleBank,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
    aconf: &AugmentConfig,
    opts: &LosoOptions,
) -> Result<EvalReport> {
    let runs = losocv_runs(bank, mconf, tconf, aconf, opts)?;
    EvalReport::new(
        format!("losocv/{}/k={}", opts.protocol.name, tconf.k_per_class),
        tconf.seed,
        runs.iter().map(|r| (r.subject, r.accuracy)).collect(),
    )
}

/// Pretrains once on the train side of every subject, then per subject
/// calibrates on `k_per_class` samples per class of its train side and
/// scores its test side.
pub fn subject_dependent(
    bank: &SampleBank,
    mconf: &ModelConfig,
    tconf: &TrainConfig,
    aconf: &AugmentConfig,
    protocol: &SplitProtocol,
    jobs: usize,
) -> Result<EvalReport> {
    tconf.validate()?;
    if tconf.k_per_class == 0 {
        return Err(Error::Config("subject-dependent evaluation needs k_per_class > 0".into()));
    }
    let (train, _) = apply_split(&bank.samples, protocol)?;
    let init = init_params(mconf, tconf.seed)?;
    let pre = pretrain_from(init, &train, &bank.montage, mconf, tconf, aconf, &mut |_, _| {})?;
    let subjects = bank.subjects();
    let rows = run_parallel(&subjects, jobs, |&s| {
        let seed = fold_seed(tconf.seed, s);
        let (pool, test) = apply_split(&bank.subject_samples(s), protocol)?;
        let labeled = draw_per_class(&pool, bank.n_classes(), tconf.k_per_class, derive_seed(seed, &[1]))?;
        let t = TrainConfig {
            seed,
            ..tconf.clone()
        };
        let c = calibrate(&pre.params, &labeled, &bank.montage, mconf, &t)?;
        Ok((s, accuracy(&c.params, mconf, &bank.montage, &test)?))
    })?;
    EvalReport::new(
        format!("subject_dependent/{}/k={}", protocol.name, tconf.k_per_class),
        tconf.seed,
        rows,
    )
}
