use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;

use super::robustness::fail_channels;
use super::*;
use crate::augment::AugmentConfig;
use crate::data_io::{gen_synthetic, SampleBank, SplitProtocol, SynthSpec};
use crate::model::{init_params, ModelConfig};
use crate::train::{accuracy, TrainConfig};

fn tiny_bank(subjects: usize) -> SampleBank {
    gen_synthetic(&SynthSpec {
        n_subjects: subjects,
        n_channels: 6,
        trials_per_subject: 6,
        samples_per_trial: 6,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn tiny_train() -> TrainConfig {
    let mut t = TrainConfig {
        seed: 5,
        k_per_class: 4,
        ..TrainConfig::default()
    };
    t.pretrain.epochs = 2;
    t.pretrain.batch_size = 32;
    t.calibrate.max_epochs = 3;
    t.calibrate.patience = 2;
    t
}

fn opts(jobs: usize) -> LosoOptions {
    LosoOptions {
        protocol: SplitProtocol::ratio("r", 0.6),
        baseline: true,
        jobs,
    }
}

#[test]
fn report_uses_population_std() {
    let r = EvalReport::new("p", 1, vec![(0, 0.5), (1, 1.0)]).unwrap();
    assert_abs_diff_eq!(r.mean, 0.75);
    assert_abs_diff_eq!(r.std, 0.25);
    assert!(EvalReport::new("p", 1, vec![(0, 1.5)]).is_err());
    assert!(EvalReport::new("p", 1, vec![]).is_err());
}

#[test]
fn icd_ics_two_point_clusters() {
    let d = 3.0_f64;
    let x = array![[0.0, 0.0], [0.0, 0.0], [d, 0.0], [d, 0.0]];
    let r = icd_ics(x.view(), &[0, 0, 1, 1], 2.0).unwrap();
    assert_abs_diff_eq!(r.inter_class, d * d);
    assert_abs_diff_eq!(r.intra_class, 0.0);
    let r = icd_ics(x.view(), &[0, 0, 1, 1], 1.0).unwrap();
    assert_abs_diff_eq!(r.inter_class, d);
}

#[test]
fn icd_ics_identical_points_and_preconditions() {
    let x = Array2::from_elem((4, 3), 1.5);
    let r = icd_ics(x.view(), &[0, 1, 0, 1], 2.0).unwrap();
    assert_eq!((r.inter_class, r.intra_class), (0.0, 0.0));
    assert_eq!(icd_ics(x.view(), &[1, 1, 1, 1], 2.0).unwrap_err().kind(), "precondition");
    assert_eq!(icd_ics(x.slice(ndarray::s![..1, ..]), &[0], 2.0).unwrap_err().kind(), "precondition");
    assert_eq!(icd_ics(x.view(), &[0, 1], 2.0).unwrap_err().kind(), "shape");
    assert!(icd_ics(x.view(), &[0, 1, 0, 1], 0.0).is_err());
}

/// Pairs are enumerated as ordered pairs here; every unordered pair appears
/// twice in both numerator and denominator.
fn brute_icd_ics(x: &Array2<f64>, labels: &[usize], alpha: f64) -> (f64, f64) {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..x.nrows() {
        for j in 0..x.nrows() {
            if i == j {
                continue;
            }
            let d = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt().powf(alpha);
            if labels[i] == labels[j] {
                b += d;
                nb += 1.0;
            } else {
                a += d;
                na += 1.0;
            }
        }
    }
    (a / na, if nb == 0.0 { 0.0 } else { b / nb })
}

fn cloud() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (3usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n * 3),
            prop::collection::vec(0usize..3, n),
        )
            .prop_filter("two classes", |(_, l)| l.iter().any(|&c| c != l[0]))
            .prop_map(move |(v, l)| (Array2::from_shape_vec((n, 3), v).unwrap(), l))
    })
}

proptest! {
    #[test]
    fn icd_ics_matches_ordered_pair_oracle((x, labels) in cloud(), alpha in 0.5f64..3.0) {
        let r = icd_ics(x.view(), &labels, alpha).unwrap();
        let (inter, intra) = brute_icd_ics(&x, &labels, alpha);
        prop_assert!((r.inter_class - inter).abs() <= 1e-9 * inter.max(1.0));
        prop_assert!((r.intra_class - intra).abs() <= 1e-9 * intra.max(1.0));
    }

    #[test]
    fn icd_ics_invariant_under_isometry(
        (x, labels) in cloud(),
        angles in prop::array::uniform3(-3.2f64..3.2),
        shift in prop::array::uniform3(-10.0f64..10.0),
    ) {
        let (a, b, c) = (angles[0], angles[1], angles[2]);
        let rz = array![[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
        let ry = array![[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rx = array![[1.0, 0.0, 0.0], [0.0, c.cos(), -c.sin()], [0.0, c.sin(), c.cos()]];
        let rot = rz.dot(&ry).dot(&rx);
        let moved = x.dot(&rot.t()) + &ndarray::Array1::from(shift.to_vec());
        let p = icd_ics(x.view(), &labels, 2.0).unwrap();
        let q = icd_ics(moved.view(), &labels, 2.0).unwrap();
        prop_assert!((p.inter_class - q.inter_class).abs() <= 1e-9 * p.inter_class.max(1.0));
        prop_assert!((p.intra_class - q.intra_class).abs() <= 1e-9 * p.intra_class.max(1.0));
    }

    #[test]
    fn connectivity_matches_threshold_oracle(v in prop::collection::vec(-1.0f64..1.0, 7 * 4)) {
        let r = Array2::from_shape_vec((7, 4), v).unwrap();
        prop_assume!(r.rows().into_iter().all(|row| row.dot(&row) > 1e-6));
        let c = connectivity_from(r.view()).unwrap();
        let n = 7;
        let cos = |i: usize, j: usize| {
            let (a, b) = (r.row(i), r.row(j));
            a.dot(&b) / (a.dot(&a) * b.dot(&b)).sqrt()
        };
        let upper: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| cos(i, j)).collect();
        let mean = upper.iter().sum::<f64>() / upper.len() as f64;
        let var = upper.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / upper.len() as f64;
        let thr = mean + 1.8 * var.sqrt();
        prop_assert!((c.threshold - thr).abs() < 1e-12);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(c.adjacency[[i, j]], c.adjacency[[j, i]]);
                prop_assert!(c.adjacency[[i, j]].abs() <= 1.0);
                if i != j && (cos(i, j) - thr).abs() > 1e-12 {
                    prop_assert_eq!(c.retained[[i, j]], cos(i, j) > thr);
                }
            }
            prop_assert!((0.0..=1.0).contains(&c.degree_centrality[i]));
        }
    }
}

#[test]
fn connectivity_two_groups_hand_computed() {
    // Channels 0,1 share direction e0 and channels 2,3 share e1; the other
    // six point along their own axes. Cosines are 1 within the two groups
    // and 0 elsewhere: 4 of the 90 ordered off-diagonal entries are 1.
    let n = 10;
    let mut r = Array2::<f64>::zeros((n, 8));
    r[[0, 0]] = 1.0;
    r[[1, 0]] = 2.0;
    r[[2, 1]] = 0.5;
    r[[3, 1]] = 1.0;
    for i in 4..n {
        r[[i, i - 2]] = 1.0;
    }
    let c = connectivity_from(r.view()).unwrap();
    let p: f64 = 4.0 / 90.0;
    assert_abs_diff_eq!(c.threshold, p + 1.8 * (p * (1.0 - p)).sqrt(), epsilon = 1e-12);
    assert_eq!(c.edges(), vec![(0, 1), (2, 3)]);
    let expect: Vec<f64> = (0..n).map(|i| if i < 4 { 1.0 / 9.0 } else { 0.0 }).collect();
    assert_eq!(c.degree_centrality, expect);
}

#[test]
fn connectivity_degenerate_cases() {
    let r = Array2::from_elem((5, 3), 0.7);
    let c = connectivity_from(r.view()).unwrap();
    assert!(c.edges().is_empty());
    assert!(c.degree_centrality.iter().all(|&d| d == 0.0));
    let mut z = Array2::from_elem((3, 2), 1.0);
    z.row_mut(1).fill(0.0);
    assert_eq!(connectivity_from(z.view()).unwrap_err().kind(), "precondition");
    assert!(connectivity_from(Array2::from_elem((1, 2), 1.0).view()).is_err());
}

#[test]
fn connectivity_of_model_uses_both_representations() {
    let bank = tiny_bank(1);
    let cfg = ModelConfig::tiny(6, 3);
    let ps = init_params(&cfg, 1).unwrap();
    for rep in [Representation::FinalLayer, Representation::LearnedEmbedding] {
        let c = connectivity(&ps, &cfg, &bank.montage, &bank.samples, rep).unwrap();
        assert_eq!(c.adjacency.dim(), (6, 6));
        assert_eq!(c.degree_centrality.len(), 6);
    }
    assert!(connectivity(&ps, &cfg, &bank.montage, &[], Representation::FinalLayer).is_err());
}

#[test]
fn failure_sweep_contract() {
    let bank = tiny_bank(1);
    let cfg = ModelConfig::tiny(6, 3);
    let ps = init_params(&cfg, 1).unwrap();
    let base = accuracy(&ps, &cfg, &bank.montage, &bank.samples).unwrap();
    let run = |mode| electrode_failure_sweep(&ps, &cfg, &bank.montage, &bank.samples, &[0, 2, 5], mode, 9, 1).unwrap();
    let a = run(FailureMode::Zero);
    assert_eq!(a[0].accuracy, base);
    assert_eq!(a.iter().map(|p| p.param).collect::<Vec<_>>(), vec![0.0, 2.0, 5.0]);
    assert_eq!(a, run(FailureMode::Zero));
    let parallel =
        electrode_failure_sweep(&ps, &cfg, &bank.montage, &bank.samples, &[0, 2, 5], FailureMode::Zero, 9, 3).unwrap();
    assert_eq!(a, parallel);
    assert_eq!(run(FailureMode::Neighbor)[0].accuracy, base);
    let e = electrode_failure_sweep(&ps, &cfg, &bank.montage, &bank.samples, &[6], FailureMode::Zero, 9, 1);
    assert_eq!(e.unwrap_err().kind(), "invalid_argument");
}

#[test]
fn failed_channels_zero_or_copy_neighbour() {
    let bank = tiny_bank(1);
    let x = bank.samples[0].de_f64();
    let order = failure_order(6, 4);
    let mut sorted = order.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..6).collect::<Vec<_>>());

    let c = order[0];
    let nb = bank.montage.nearest_neighbor(c).unwrap();
    let y = fail_channels(&x, &[c], FailureMode::Neighbor, &bank.montage).unwrap();
    assert_eq!(y.row(c), x.row(nb));
    for i in (0..6).filter(|&i| i != c) {
        assert_eq!(y.row(i), x.row(i));
    }
    let z = fail_channels(&x, &order[..3], FailureMode::Zero, &bank.montage).unwrap();
    for &i in &order[..3] {
        assert!(z.row(i).iter().all(|&v| v == 0.0));
    }
    // With several failures, copies come only from working channels.
    let w = fail_channels(&x, &order[..3], FailureMode::Neighbor, &bank.montage).unwrap();
    for &i in &order[..3] {
        let src = bank.montage.nearest_among(i, |j| !order[..3].contains(&j)).unwrap();
        assert_eq!(w.row(i), x.row(src));
    }
}

#[test]
fn noise_sweep_contract() {
    let bank = tiny_bank(1);
    let cfg = ModelConfig::tiny(6, 3);
    let ps = init_params(&cfg, 1).unwrap();
    let base = accuracy(&ps, &cfg, &bank.montage, &bank.samples).unwrap();
    let levels = [1e-12, 0.1, 3.0];
    let a = noise_sweep(&ps, &cfg, &bank.montage, &bank.samples, &levels, 2, 1).unwrap();
    assert!((a[0].accuracy - base).abs() <= 0.01);
    assert_eq!(a, noise_sweep(&ps, &cfg, &bank.montage, &bank.samples, &levels, 2, 2).unwrap());
    assert_ne!(
        a.iter().map(|p| p.accuracy).collect::<Vec<_>>(),
        vec![base; 3],
        "heavy noise should move at least one prediction"
    );
    for bad in [0.0, -1.0, f64::NAN] {
        assert!(noise_sweep(&ps, &cfg, &bank.montage, &bank.samples, &[bad], 2, 1).is_err());
    }
}

#[test]
fn export_rows_and_raw_values() {
    let bank = tiny_bank(1);
    let cfg = ModelConfig::tiny(6, 3);
    let ps = init_params(&cfg, 1).unwrap();
    let mut raw = Vec::new();
    write_features_csv(&mut raw, &bank.samples, &bank.montage, &cfg, Stage::Raw, None).unwrap();
    let text = String::from_utf8(raw).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), bank.len() + 1);
    assert!(lines[0].starts_with("subject,session,trial,window,label,stage,f0,"));
    assert!(lines[0].ends_with(",f29"));
    let first: Vec<f32> = lines[1].split(',').skip(6).map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, bank.samples[0].de.iter().copied().collect::<Vec<_>>());

    let export = |stage| {
        let mut out = Vec::new();
        write_features_csv(&mut out, &bank.samples, &bank.montage, &cfg, stage, Some(&ps)).unwrap();
        out
    };
    let enc = export(Stage::Encoded);
    assert_eq!(enc, export(Stage::Encoded));
    let enc = String::from_utf8(enc).unwrap();
    assert_eq!(enc.lines().count(), bank.len() + 1);
    assert!(enc.lines().next().unwrap().ends_with(&format!(",f{}", cfg.embedding_dim() - 1)));
    assert!(enc.lines().nth(1).unwrap().contains(",encoded,"));
    assert!(write_features_csv(&mut Vec::new(), &bank.samples, &bank.montage, &cfg, Stage::Calibrated, None).is_err());
}

#[test]
fn losocv_folds_partition_subjects() {
    let bank = tiny_bank(3);
    let p = SplitProtocol::ratio("r", 0.6);
    let folds = losocv_folds(&bank, &p, 2, 1).unwrap();
    assert_eq!(folds.iter().map(|f| f.subject).collect::<Vec<_>>(), vec![0, 1, 2]);
    for f in &folds {
        assert!(f.source.iter().all(|s| s.subject_id != f.subject));
        assert_eq!(f.source.len() + 36, bank.len());
        assert_eq!(f.calibration.len(), 6);
        for c in 0..3 {
            assert_eq!(f.calibration.iter().filter(|s| s.label == c).count(), 2);
        }
        assert!(f.calibration.iter().all(|s| s.subject_id == f.subject && s.trial_id < 4));
        assert!(f.test.iter().all(|s| s.subject_id == f.subject && s.trial_id >= 4));
    }
    let seeds: std::collections::BTreeSet<u64> = folds.iter().map(|f| f.seed).collect();
    assert_eq!(seeds.len(), 3);

    let zero = losocv_folds(&bank, &p, 0, 1).unwrap();
    for f in &zero {
        assert!(f.calibration.iter().all(|s| s.subject_id != f.subject));
        assert_eq!(f.test.len(), 36);
    }

    assert_eq!(losocv_folds(&tiny_bank(1), &p, 2, 1).unwrap_err().kind(), "precondition");
    assert_eq!(losocv_folds(&bank, &p, 20, 1).unwrap_err().kind(), "precondition");
    let one_class: Vec<_> = bank.samples.iter().filter(|s| s.label != 1).cloned().collect();
    let e = losocv_folds(&bank.with_samples(one_class), &p, 2, 1).unwrap_err();
    assert!(e.to_string().contains("class 1 is absent"), "{e}");
}

#[test]
fn losocv_reproducible_and_independent_of_jobs() {
    let bank = tiny_bank(3);
    let cfg = ModelConfig::tiny(6, 3);
    let t = tiny_train();
    let a = AugmentConfig::default();
    let r1 = losocv(&bank, &cfg, &t, &a, &opts(1)).unwrap();
    assert_eq!(r1.accuracies.len(), 3);
    assert_eq!(r1.subjects, vec![0, 1, 2]);
    assert!(r1.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    let r2 = losocv(&bank, &cfg, &t, &a, &opts(1)).unwrap();
    assert_eq!(r1, r2);
    let runs = losocv_runs(&bank, &cfg, &t, &a, &opts(3)).unwrap();
    assert_eq!(runs.iter().map(|r| r.accuracy).collect::<Vec<_>>(), r1.accuracies);
    for r in &runs {
        let b = r.baseline.as_ref().unwrap();
        assert!(b.calibration.epochs_run >= 1 && (0.0..=1.0).contains(&b.accuracy));
        assert_eq!(r.pretrain_loss.len(), 2);
    }
}

#[test]
fn subject_dependent_report() {
    let bank = tiny_bank(2);
    let cfg = ModelConfig::tiny(6, 3);
    let t = tiny_train();
    let p = SplitProtocol::ratio("r", 0.6);
    let r = subject_dependent(&bank, &cfg, &t, &AugmentConfig::default(), &p, 1).unwrap();
    assert_eq!(r.subjects, vec![0, 1]);
    assert!(r.protocol.starts_with("subject_dependent/r"));
    let zero = TrainConfig { k_per_class: 0, ..t };
    assert!(subject_dependent(&bank, &cfg, &zero, &AugmentConfig::default(), &p, 1).is_err());
}

#[test]
fn eval_config_validation() {
    assert!(EvalConfig::default().validate().is_ok());
    let bad = EvalConfig {
        noise_levels: vec![0.0],
        ..EvalConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = EvalConfig {
        alpha: -1.0,
        ..EvalConfig::default()
    };
    assert!(bad.validate().is_err());
}
