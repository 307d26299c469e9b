use std::collections::BTreeSet;
use std::fs;

use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use tempfile::tempdir;

use super::*;
use crate::dsp::FeatureSample;
use crate::error::Error;
use crate::model::{infer, init_params, positions_tensor, ModelConfig, Output};
use crate::train::{adam_step, OptimizerState};

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_subjects: 2,
        n_channels: 6,
        trials_per_subject: 4,
        samples_per_trial: 5,
        ..SynthSpec::default()
    }
}

#[test]
fn reference_bank_has_1500_samples() {
    let bank = gen_synthetic(&SynthSpec::default()).unwrap();
    assert_eq!(bank.len(), 5 * 10 * 30);
    assert_eq!(bank.n_channels(), 62);
    assert_eq!(bank.n_bands(), 5);
    assert_eq!(bank.subjects(), vec![0, 1, 2, 3, 4]);
    let counts: Vec<usize> = (0..3).map(|c| bank.samples.iter().filter(|s| s.label == c).count()).collect();
    assert_eq!(counts, vec![600, 450, 450]);
}

#[test]
fn generation_is_seed_deterministic() {
    let a = gen_synthetic(&small_spec()).unwrap();
    let b = gen_synthetic(&small_spec()).unwrap();
    assert_eq!(a, b);
    let c = gen_synthetic(&SynthSpec {
        seed: 43,
        ..small_spec()
    })
    .unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn empirical_class_means_recover_the_generator() {
    let spec = SynthSpec {
        samples_per_trial: 200,
        n_channels: 10,
        ..SynthSpec::default()
    };
    let (bank, truth) = gen_synthetic_with_truth(&spec).unwrap();
    let (mut within, mut total, mut z2) = (0usize, 0usize, 0.0);
    for c in 0..spec.n_classes {
        let members: Vec<&FeatureSample> = bank.samples.iter().filter(|s| s.label == c).collect();
        let n = members.len() as f64;
        let tol = spec.sample_noise_std / n.sqrt();
        for ch in 0..spec.n_channels {
            for b in 0..spec.n_bands {
                let emp = members.iter().map(|s| f64::from(s.de[[ch, b]])).sum::<f64>() / n;
                let shift = (0..spec.n_subjects).map(|s| truth.subject_shifts[[s, ch, b]]).sum::<f64>()
                    / spec.n_subjects as f64;
                let z = (emp - truth.class_means[[c, ch, b]] - shift) / tol;
                within += usize::from(z.abs() <= 3.0);
                total += 1;
                z2 += z * z;
            }
        }
    }
    assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
    let mean_z2 = z2 / total as f64;
    assert!((0.8..1.2).contains(&mean_z2), "{mean_z2}");
    // Different classes have different generating means.
    let d: f64 = (0..spec.n_channels)
        .flat_map(|ch| (0..spec.n_bands).map(move |b| (ch, b)))
        .map(|(ch, b)| (truth.class_means[[0, ch, b]] - truth.class_means[[1, ch, b]]).powi(2))
        .sum();
    assert!(d > 0.0);
}

#[test]
fn timeseries_mode_tracks_band_levels() {
    let spec = SynthSpec {
        n_subjects: 1,
        n_channels: 4,
        trials_per_subject: 3,
        samples_per_trial: 10,
        sample_noise_std: 0.1,
        class_mean_scale: 1.5,
        mode: SynthMode::Timeseries,
        ..SynthSpec::default()
    };
    let (bank, truth) = gen_synthetic_with_truth(&spec).unwrap();
    assert_eq!(bank.raw.len(), 3);
    assert_eq!(bank.len(), 30);
    assert_eq!(bank.raw[0].fs, SYNTH_FS);
    // DE = level + ½ln(2πe) up to leakage; compare centred values.
    let half_log = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for s in &bank.samples {
        for ch in 0..4 {
            for b in 0..5 {
                xs.push(truth.class_means[[s.label, ch, b]] + truth.subject_shifts[[0, ch, b]]);
                ys.push(f64::from(s.de[[ch, b]]) - half_log);
            }
        }
    }
    let r = crate::dsp::pearson(ndarray::ArrayView1::from(&xs), ndarray::ArrayView1::from(&ys)).unwrap();
    assert!(r > 0.9, "correlation {r}");
}

#[test]
fn synth_spec_validation() {
    for bad in [
        SynthSpec { n_subjects: 0, ..small_spec() },
        SynthSpec { sample_noise_std: -1.0, ..small_spec() },
        SynthSpec { n_bands: 4, mode: SynthMode::Timeseries, ..small_spec() },
    ] {
        assert!(matches!(gen_synthetic(&bad), Err(Error::Config(_))));
    }
    assert!(serde_json::from_str::<SynthSpec>(r#"{"n_subject": 3}"#).is_err());
}

#[test]
fn bank_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let bank = gen_synthetic(&small_spec()).unwrap();
    write_bank(&bank, dir.path()).unwrap();
    assert_eq!(read_bank(dir.path()).unwrap(), bank);
    let raw_dir = tempdir().unwrap();
    let ts = gen_synthetic(&SynthSpec {
        n_subjects: 1,
        n_channels: 3,
        trials_per_subject: 2,
        samples_per_trial: 2,
        mode: SynthMode::Timeseries,
        ..SynthSpec::default()
    })
    .unwrap();
    write_bank(&ts, raw_dir.path()).unwrap();
    assert!(raw_dir.path().join("raw/t1.bin").exists());
    assert_eq!(read_bank(raw_dir.path()).unwrap(), ts);
}

#[test]
fn truncated_payload_is_reported() {
    let dir = tempdir().unwrap();
    write_bank(&gen_synthetic(&small_spec()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("features.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    match read_bank(dir.path()) {
        Err(Error::Truncated { expected, found, .. }) => assert_eq!(expected, found + 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_record_is_a_manifest_mismatch() {
    let dir = tempdir().unwrap();
    let spec = SynthSpec {
        n_subjects: 1,
        trials_per_subject: 4,
        samples_per_trial: 25,
        n_channels: 6,
        ..SynthSpec::default()
    };
    let bank = gen_synthetic(&spec).unwrap();
    assert_eq!(bank.len(), 100);
    write_bank(&bank, dir.path()).unwrap();
    let path = dir.path().join("features.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 6 * 5 * 4]).unwrap();
    assert!(matches!(read_bank(dir.path()), Err(Error::ManifestMismatch(_))));
}

#[test]
fn bad_magic_and_inconsistent_manifest() {
    let dir = tempdir().unwrap();
    write_bank(&gen_synthetic(&small_spec()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("features.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_bank(dir.path()), Err(Error::BadMagic { .. })));

    let dir = tempdir().unwrap();
    write_bank(&gen_synthetic(&small_spec()).unwrap(), dir.path()).unwrap();
    let mpath = dir.path().join("manifest.json");
    let text = fs::read_to_string(&mpath).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["counts"]["samples"] = serde_json::json!(1);
    fs::write(&mpath, v.to_string()).unwrap();
    assert!(matches!(read_bank(dir.path()), Err(Error::ManifestMismatch(_))));

    assert!(matches!(read_bank(&dir.path().join("nope")), Err(Error::Io { .. })));
}

#[test]
fn raw_payload_truncation() {
    let dir = tempdir().unwrap();
    let ts = gen_synthetic(&SynthSpec {
        n_subjects: 1,
        n_channels: 2,
        trials_per_subject: 1,
        samples_per_trial: 2,
        mode: SynthMode::Timeseries,
        ..SynthSpec::default()
    })
    .unwrap();
    write_bank(&ts, dir.path()).unwrap();
    let path = dir.path().join("raw/t0.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(read_bank(dir.path()), Err(Error::Truncated { .. })));
}

fn trained_state(cfg: &ModelConfig) -> (crate::gradcore::ParameterSet, OptimizerState) {
    let mut ps = init_params(cfg, 5).unwrap();
    let mut opt = OptimizerState::new(1e-3, 0.01).unwrap();
    let grads = ps
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, e)| (n.to_string(), e.value.map(|v| v.sin())))
        .collect();
    adam_step(&mut ps, &grads, &mut opt).unwrap();
    (ps, opt)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.ck");
    let cfg = ModelConfig::tiny(6, 3);
    let (ps, opt) = trained_state(&cfg);
    save_checkpoint(&path, &cfg, &ps, Some(&opt), Precision::F64).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model, cfg);
    assert_eq!(ck.params, ps);
    assert_eq!(ck.optimizer.as_ref(), Some(&opt));

    let bank = gen_synthetic(&small_spec()).unwrap();
    let de: Vec<_> = bank.samples[..4].iter().map(|s| s.de_f64()).collect();
    let pos = positions_tensor(&bank.montage);
    let a = infer(&ps, &cfg, &pos, &de, false, Output::Probabilities).unwrap();
    let b = infer(&ck.params, &cfg, &pos, &de, false, Output::Probabilities).unwrap();
    assert_eq!(a, b);

    save_checkpoint(&path, &cfg, &ps, None, Precision::F64).unwrap();
    assert!(load_checkpoint(&path).unwrap().optimizer.is_none());
}

#[test]
fn single_precision_checkpoint_casts_each_value() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m32.ck");
    let cfg = ModelConfig::tiny(6, 3);
    let (ps, opt) = trained_state(&cfg);
    save_checkpoint(&path, &cfg, &ps, Some(&opt), Precision::F32).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.precision, Precision::F32);
    for (name, e) in ps.iter() {
        let got = ck.params.get(name).unwrap().data();
        for (g, v) in got.iter().zip(e.value.data()) {
            assert_eq!(*g, f64::from(*v as f32));
        }
    }
    assert_eq!(ck.optimizer.as_ref(), Some(&opt));
}

#[test]
fn checkpoint_errors() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.ck");
    let cfg = ModelConfig::tiny(6, 3);
    let (ps, _) = trained_state(&cfg);
    save_checkpoint(&path, &cfg, &ps, None, Precision::F64).unwrap();
    let other = ModelConfig::tiny(8, 3);
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Checkpoint(_))));
    assert!(load_checkpoint_for(&path, &cfg).is_ok());
    assert!(matches!(
        save_checkpoint(&path, &other, &ps, None, Precision::F64),
        Err(Error::Checkpoint(_))
    ));

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    fs::write(&path, &extra).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[3] = b'?';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
    fs::write(&path, b"CLDTA").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
}

fn session_samples(subjects: u32, trials: u32, per_trial: u32) -> Vec<FeatureSample> {
    let mut out = Vec::new();
    for s in 0..subjects {
        for t in 0..trials {
            for w in 0..per_trial {
                out.push(FeatureSample {
                    subject_id: s,
                    session_id: 0,
                    trial_id: t,
                    window_index: w,
                    label: (t % 3) as usize,
                    de: ndarray::Array2::zeros((2, 5)),
                });
            }
        }
    }
    out
}

#[test]
fn seed_protocol_on_a_fifteen_trial_session() {
    let (train, test) = apply_split(&session_samples(1, 15, 30), &SplitProtocol::seed()).unwrap();
    assert_eq!((train.len(), test.len()), (270, 180));
    assert!(train.iter().all(|s| s.trial_id < 9));
    assert!(test.iter().all(|s| s.trial_id >= 9));
}

#[test]
fn ratio_protocol_on_forty_trials() {
    let (train, test) = apply_split(&session_samples(1, 40, 2), &SplitProtocol::deap()).unwrap();
    let tr: BTreeSet<u32> = train.iter().map(|s| s.trial_id).collect();
    let te: BTreeSet<u32> = test.iter().map(|s| s.trial_id).collect();
    assert_eq!((tr.len(), te.len()), (32, 8));
    assert_eq!(*tr.iter().max().unwrap(), 31);
}

#[test]
fn protocol_errors() {
    let overlap = SplitProtocol {
        name: "x".into(),
        rule: SplitRule::Trials {
            train: vec![0, 1, 2],
            test: vec![2, 3],
        },
    };
    assert!(apply_split(&session_samples(1, 4, 1), &overlap).is_err());
    // Trial 14 is listed but the bank has only 10 trials.
    assert!(apply_split(&session_samples(1, 10, 1), &SplitProtocol::seed()).is_err());
    // Trial 15 is on neither side.
    assert!(apply_split(&session_samples(1, 16, 1), &SplitProtocol::seed()).is_err());
    assert!(apply_split(&session_samples(1, 1, 3), &SplitProtocol::deap()).is_err());
    assert!(SplitProtocol::by_name("ratio:1.5").is_err());
    assert!(SplitProtocol::by_name("bogus").is_err());
    assert_eq!(SplitProtocol::by_name("seed").unwrap(), SplitProtocol::seed());
    assert_eq!(
        SplitProtocol::by_name("ratio:0.6").unwrap().rule,
        SplitRule::Ratio { train_fraction: 0.6 }
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn ratio_split_partitions(subjects in 1u32..4, trials in 2u32..20, per in 1u32..4, f in 0.05f64..0.95) {
        let samples = session_samples(subjects, trials, per);
        let p = SplitProtocol::ratio("r", f);
        if let Ok((train, test)) = apply_split(&samples, &p) {
            prop_assert_eq!(train.len() + test.len(), samples.len());
            let key = |s: &FeatureSample| (s.subject_id, s.trial_id, s.window_index);
            let a: BTreeSet<_> = train.iter().map(key).collect();
            let b: BTreeSet<_> = test.iter().map(key).collect();
            prop_assert!(a.is_disjoint(&b));
            let ta: BTreeSet<_> = train.iter().map(|s| (s.subject_id, s.trial_id)).collect();
            let tb: BTreeSet<_> = test.iter().map(|s| (s.subject_id, s.trial_id)).collect();
            prop_assert!(ta.is_disjoint(&tb));
        }
    }
}
