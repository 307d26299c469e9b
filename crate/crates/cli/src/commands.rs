use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cldta::config::RunConfig;
use cldta::data_io::{
    gen_synthetic, load_checkpoint, read_bank, save_checkpoint, synthetic_montage, write_bank, Checkpoint,
    Precision, SampleBank, SynthMode,
};
use cldta::dsp::process_trial;
use cldta::eval::{
    connectivity, draw_per_class, electrode_failure_sweep, losocv_runs, noise_sweep, subject_dependent,
    write_features_csv, EvalReport, LosoOptions, Stage, SweepPoint,
};
use cldta::model::{init_params, pipeline_grad_check, ModelConfig};
use cldta::train::{calibrate_with, derive_seed, predict_batch, pretrain_from};
use cldta::Error;
use serde::Serialize;

use crate::output::Output;
use crate::{Cli, Command, EvalMode, Failure, Global, RobustMode, StageArg, SynthModeArg};

type Run<T = ()> = std::result::Result<T, Failure>;

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Run<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Failure::Usage(format!("`{cmd}` requires --{flag}")))
}

/// The config file with command-line overrides applied, then resolved.
fn load_config(g: &Global) -> Run<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(k) = g.k_per_class {
        cfg.train.k_per_class = k;
    }
    for (slot, flag) in [(&mut cfg.paths.bank, &g.bank), (&mut cfg.paths.out, &g.out), (&mut cfg.paths.checkpoint, &g.checkpoint)] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if g.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    Ok(cfg.resolved()?)
}

/// Model configuration with its data dimensions taken from the bank.
fn model_for(cfg: &RunConfig, bank: &SampleBank) -> cldta::Result<ModelConfig> {
    let m = ModelConfig {
        n_channels: bank.n_channels(),
        n_bands: bank.n_bands(),
        n_classes: bank.n_classes(),
        ..cfg.model.clone()
    };
    m.validate()?;
    Ok(m)
}

fn load_model(path: &Path, bank: &SampleBank) -> cldta::Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let dims = (ck.model.n_channels, ck.model.n_bands, ck.model.n_classes);
    if dims != (bank.n_channels(), bank.n_bands(), bank.n_classes()) {
        return Err(Error::Checkpoint(format!(
            "model expects {dims:?} (channels, bands, classes), bank has {:?}",
            (bank.n_channels(), bank.n_bands(), bank.n_classes())
        )));
    }
    Ok(ck)
}

pub fn run(cli: &Cli) -> Run {
    let g = &cli.global;
    let cfg = load_config(g)?;
    let out = |cmd: &str| -> Run<Output> { Ok(Output::new(required(&cfg.paths.out, "out", cmd)?, &cfg)?) };
    let bank = |cmd: &str| -> Run<SampleBank> { Ok(read_bank(required(&cfg.paths.bank, "bank", cmd)?)?) };
    let checkpoint = |cmd: &str| required(&cfg.paths.checkpoint, "checkpoint", cmd);
    match &cli.command {
        Command::GenSynth { mode } => {
            let dir = required(&cfg.paths.out, "out", "gen-synth")?;
            let mut spec = cfg.synth.clone();
            if let Some(m) = mode {
                spec.mode = match m {
                    SynthModeArg::Features => SynthMode::Features,
                    SynthModeArg::Timeseries => SynthMode::Timeseries,
                };
            }
            let b = gen_synthetic(&spec)?;
            write_bank(&b, dir)?;
            eprintln!("wrote {} samples from {} subjects to {}", b.len(), b.subjects().len(), dir.display());
        }
        Command::ExtractFeatures => {
            let dir = required(&cfg.paths.out, "out", "extract-features")?;
            let b = bank("extract-features")?;
            if b.raw.is_empty() {
                return Err(Error::Precondition("the bank holds no raw trials".into()).into());
            }
            let mut samples = Vec::new();
            for (i, t) in b.raw.iter().enumerate() {
                let s = process_trial(t, &b.montage, &b.bands, &cfg.preprocess)?;
                eprintln!("trial {}/{}: {} windows", i + 1, b.raw.len(), s.len());
                samples.extend(s);
            }
            let fb = SampleBank::new(b.dataset.clone(), b.classes.clone(), b.bands.clone(), b.montage.clone(), samples)?;
            write_bank(&fb, dir)?;
        }
        Command::Pretrain => {
            let b = bank("pretrain")?;
            let o = out("pretrain")?;
            let m = model_for(&cfg, &b)?;
            let init = init_params(&m, cfg.train.seed)?;
            let r = pretrain_from(init, &b.samples, &b.montage, &m, &cfg.train, &cfg.augment, &mut |e, l| {
                eprintln!("pretrain epoch {e}: loss {l:.6}")
            })?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in r.loss_trace.iter().enumerate() {
                writeln!(csv, "{e},{l}").unwrap();
            }
            o.csv("pretrain.csv", &csv)?;
            save_checkpoint(&o.path("pretrained.ckpt"), &m, &r.params, None, Precision::F64)?;
            eprintln!("wrote {}", o.path("pretrained.ckpt").display());
        }
        Command::Calibrate => {
            let b = bank("calibrate")?;
            let ck = load_model(checkpoint("calibrate")?, &b)?;
            let o = out("calibrate")?;
            let k = cfg.train.k_per_class;
            let labeled = if k == 0 {
                b.samples.clone()
            } else {
                draw_per_class(&b.samples, b.n_classes(), k, derive_seed(cfg.seed, &[30]))?
            };
            let r = calibrate_with(&ck.params, &labeled, &b.montage, &ck.model, &cfg.train, &mut |e, l, a| {
                eprintln!("calibrate epoch {e}: loss {l:.6} val {a:.4}")
            })?;
            let mut csv = String::from("epoch,loss,val_accuracy\n");
            for (e, (l, a)) in r.loss_trace.iter().zip(&r.val_trace).enumerate() {
                writeln!(csv, "{e},{l},{a}").unwrap();
            }
            o.csv("calibrate.csv", &csv)?;
            save_checkpoint(&o.path("calibrated.ckpt"), &ck.model, &r.params, None, Precision::F64)?;
            eprintln!(
                "best epoch {} of {}: val accuracy {:.4}",
                r.best_epoch, r.epochs_run, r.best_val_accuracy
            );
        }
        Command::Predict => {
            let b = bank("predict")?;
            let ck = load_model(checkpoint("predict")?, &b)?;
            let mut text = String::new();
            for p in predict_batch(&ck.params, &ck.model, &b.montage, &b.samples)? {
                write!(text, "{}", p.label).unwrap();
                for q in &p.probabilities {
                    write!(text, ",{q}").unwrap();
                }
                text.push('\n');
            }
            print!("{text}");
        }
        Command::Evaluate { mode } => {
            let b = bank("evaluate")?;
            let o = out("evaluate")?;
            let m = model_for(&cfg, &b)?;
            let protocol = cfg.split_protocol()?;
            let (report, baseline) = match mode {
                EvalMode::Losocv => {
                    let opts = LosoOptions {
                        protocol: protocol.clone(),
                        baseline: cfg.eval.baseline,
                        jobs: g.jobs,
                    };
                    let runs = losocv_runs(&b, &m, &cfg.train, &cfg.augment, &opts)?;
                    let name = format!("losocv/{}/k={}", protocol.name, cfg.train.k_per_class);
                    let rows = runs.iter().map(|r| (r.subject, r.accuracy)).collect();
                    let base: Option<Vec<(u32, f64)>> =
                        runs.iter().map(|r| r.baseline.as_ref().map(|x| (r.subject, x.accuracy))).collect();
                    let base = base.map(|rows| EvalReport::new(format!("{name}/baseline"), cfg.seed, rows)).transpose()?;
                    (EvalReport::new(name, cfg.seed, rows)?, base)
                }
                EvalMode::SubjectDependent => {
                    (subject_dependent(&b, &m, &cfg.train, &cfg.augment, &protocol, g.jobs)?, None)
                }
            };
            o.csv("evaluate.csv", &accuracy_csv(&report))?;
            o.json("evaluate.json", &report)?;
            if let Some(base) = &baseline {
                o.csv("evaluate_baseline.csv", &accuracy_csv(base))?;
                o.json("evaluate_baseline.json", base)?;
            }
            eprintln!("{}: mean {:.4} std {:.4}", report.protocol, report.mean, report.std);
        }
        Command::Robustness { mode } => {
            let b = bank("robustness")?;
            let ck = load_model(checkpoint("robustness")?, &b)?;
            let o = out("robustness")?;
            let (points, name) = match mode {
                RobustMode::Failure => (
                    electrode_failure_sweep(
                        &ck.params,
                        &ck.model,
                        &b.montage,
                        &b.samples,
                        &cfg.eval.failure_counts,
                        cfg.eval.failure_mode,
                        cfg.seed,
                        g.jobs,
                    )?,
                    "failure",
                ),
                RobustMode::Noise => (
                    noise_sweep(&ck.params, &ck.model, &b.montage, &b.samples, &cfg.eval.noise_levels, cfg.seed, g.jobs)?,
                    "noise",
                ),
            };
            o.csv(&format!("robustness_{name}.csv"), &sweep_csv(&points))?;
        }
        Command::Connectivity => {
            let b = bank("connectivity")?;
            let ck = load_model(checkpoint("connectivity")?, &b)?;
            let o = out("connectivity")?;
            let c = connectivity(&ck.params, &ck.model, &b.montage, &b.samples, cfg.eval.representation)?;
            let n = c.adjacency.nrows();
            let mut edges = String::from("i,j,cosine,retained\n");
            for i in 0..n {
                for j in i + 1..n {
                    writeln!(edges, "{i},{j},{},{}", c.adjacency[[i, j]], u8::from(c.retained[[i, j]])).unwrap();
                }
            }
            let mut degree = String::from("node,degree_centrality\n");
            for (i, d) in c.degree_centrality.iter().enumerate() {
                writeln!(degree, "{i},{d}").unwrap();
            }
            o.csv("connectivity_edges.csv", &edges)?;
            o.csv("connectivity_degree.csv", &degree)?;
            eprintln!("threshold {:.6}: {} edges retained", c.threshold, c.edges().len());
        }
        Command::ExportFeatures { mode } => {
            let b = bank("export-features")?;
            let o = out("export-features")?;
            let stage = match mode {
                StageArg::Raw => Stage::Raw,
                StageArg::Encoded => Stage::Encoded,
                StageArg::Calibrated => Stage::Calibrated,
            };
            let ck = match stage {
                Stage::Raw => None,
                _ => Some(load_model(checkpoint("export-features")?, &b)?),
            };
            let m = match &ck {
                Some(c) => c.model.clone(),
                None => model_for(&cfg, &b)?,
            };
            let mut body = Vec::new();
            write_features_csv(&mut body, &b.samples, &b.montage, &m, stage, ck.as_ref().map(|c| &c.params))?;
            o.csv(&format!("features_{}.csv", stage.as_str()), &String::from_utf8(body).expect("CSV is UTF-8"))?;
        }
        Command::GradCheck => {
            let montage = synthetic_montage(cfg.model.n_channels)?;
            let r = pipeline_grad_check(&cfg.model, &montage, cfg.seed)?;
            let summary = GradSummary {
                max_rel_error: r.max_rel_error(),
                contrastive_eval: r.contrastive_eval.max_rel_error_nonvanishing,
                contrastive_train: r.contrastive_train.max_rel_error_nonvanishing,
                contrastive_train_vanishing: r.contrastive_train.vanishing,
                cross_entropy: r.cross_entropy.max_rel_error_nonvanishing,
                coordinates: r.contrastive_eval.coordinates + r.cross_entropy.coordinates,
            };
            eprintln!(
                "max rel. error {:.3e} (contrastive eval {:.3e}, contrastive train {:.3e} with {} vanishing, cross-entropy {:.3e})",
                summary.max_rel_error,
                summary.contrastive_eval,
                summary.contrastive_train,
                summary.contrastive_train_vanishing,
                summary.cross_entropy
            );
            if cfg.paths.out.is_some() {
                out("grad-check")?.json("grad_check.json", &summary)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GradSummary {
    max_rel_error: f64,
    contrastive_eval: f64,
    contrastive_train: f64,
    contrastive_train_vanishing: usize,
    cross_entropy: f64,
    coordinates: usize,
}

fn accuracy_csv(r: &EvalReport) -> String {
    let mut s = String::from("subject,accuracy\n");
    for (sub, a) in r.subjects.iter().zip(&r.accuracies) {
        writeln!(s, "{sub},{a}").unwrap();
    }
    s
}

fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("param,accuracy\n");
    for p in points {
        writeln!(s, "{},{}", p.param, p.accuracy).unwrap();
    }
    s
}
