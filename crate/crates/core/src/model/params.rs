use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::Result;
use crate::gradcore::{ParameterSet, Tensor};

pub const ENCODER_PREFIX: &str = "enc.";
pub const PROJECTOR_PREFIX: &str = "proj.";
pub const CLASSIFIER_PREFIX: &str = "clf.";

/// Standard deviation of the learnable position embedding at init.
pub const L_EMB_STD: f64 = 0.02;

pub(crate) fn layer_key(l: usize, part: &str) -> String {
    format!("enc.layer{l}.{part}")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// `w: [fan_in, fan_out]` and optional bias, both `U(±1/√fan_in)`.
fn linear(
    ps: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ps.insert(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound))?;
    if bias {
        ps.insert(format!("{name}.b"), uniform(rng, &[fan_out], bound))?;
    }
    Ok(())
}

fn norm(ps: &mut ParameterSet, name: &str, width: usize) -> Result<()> {
    ps.insert(format!("{name}.g"), Tensor::full(&[width], 1.0))?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[width]))
}

fn batch_norm(ps: &mut ParameterSet, name: &str, width: usize) -> Result<()> {
    norm(ps, name, width)?;
    ps.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[width]))?;
    ps.insert_buffer(format!("{name}.running_var"), Tensor::full(&[width], 1.0))
}

fn init_encoder(ps: &mut ParameterSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.d_model;
    linear(ps, rng, "enc.pos.f1", 3, d, true)?;
    linear(ps, rng, "enc.pos.f2", d, d, true)?;
    linear(ps, rng, "enc.src.f3", cfg.n_bands, d, true)?;
    linear(ps, rng, "enc.src.f4", d, d, true)?;
    let normal = Normal::new(0.0, L_EMB_STD).expect("valid std");
    let l_emb = (0..cfg.n_channels * d).map(|_| normal.sample(rng)).collect();
    ps.insert("enc.l_emb", Tensor::new(vec![cfg.n_channels, d], l_emb)?)?;
    // A key bias adds the same amount to every logit of a query row, which
    // the softmax ignores.
    linear(ps, rng, "enc.kv.k", d, d, false)?;
    linear(ps, rng, "enc.kv.v", d, d, true)?;
    for l in 0..cfg.n_layers {
        linear(ps, rng, &layer_key(l, "q"), d, d, true)?;
        linear(ps, rng, &layer_key(l, "o"), d, d, true)?;
        norm(ps, &layer_key(l, "ln1"), d)?;
        linear(ps, rng, &layer_key(l, "ffn1"), d, cfg.ffn_hidden, true)?;
        linear(ps, rng, &layer_key(l, "ffn2"), cfg.ffn_hidden, d, true)?;
        norm(ps, &layer_key(l, "ln2"), d)?;
    }
    Ok(())
}

fn init_projector(ps: &mut ParameterSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let flat = cfg.n_channels * cfg.d_model;
    let [p1, p2, p3] = [cfg.proj_dims[0], cfg.proj_dims[1], cfg.proj_dims[2]];
    // The first two layers feed batch normalisation, whose shift makes a
    // bias redundant.
    linear(ps, rng, "proj.l1", flat, p1, false)?;
    batch_norm(ps, "proj.bn1", p1)?;
    linear(ps, rng, "proj.l2", p1, p2, false)?;
    batch_norm(ps, "proj.bn2", p2)?;
    linear(ps, rng, "proj.l3", p2, p3, true)
}

fn init_classifier_into(ps: &mut ParameterSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut fan_in = cfg.n_channels * cfg.d_model;
    for (i, &h) in cfg.clf_hidden.iter().enumerate() {
        linear(ps, rng, &format!("clf.l{}", i + 1), fan_in, h, true)?;
        fan_in = h;
    }
    linear(
        ps,
        rng,
        &format!("clf.l{}", cfg.clf_hidden.len() + 1),
        fan_in,
        cfg.n_classes,
        true,
    )
}

/// Fresh parameters for the whole network. Encoder, projector and classifier
/// draw from independent streams derived from `seed`, so re-initialising one
/// part never shifts the others.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    init_encoder(&mut ps, cfg, &mut stream(seed, 0))?;
    init_projector(&mut ps, cfg, &mut stream(seed, 1))?;
    init_classifier_into(&mut ps, cfg, &mut stream(seed, 2))?;
    Ok(ps)
}

/// Replaces the classifier with a freshly initialised one.
pub fn reinit_classifier(ps: &mut ParameterSet, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let mut fresh = ParameterSet::new();
    init_classifier_into(&mut fresh, cfg, &mut stream(seed, 2))?;
    ps.overwrite_from(&fresh)
}

fn stream(seed: u64, part: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(part);
    rng
}

/// Checks that `ps` has exactly the names and shapes `cfg` implies.
pub fn check_shapes(ps: &ParameterSet, cfg: &ModelConfig) -> Result<()> {
    let reference = init_params(cfg, 0)?;
    let mismatch = |msg: String| crate::error::Error::Checkpoint(msg);
    if reference.len() != ps.len() {
        return Err(mismatch(format!(
            "expected {} tensors, found {}",
            reference.len(),
            ps.len()
        )));
    }
    for (name, e) in reference.iter() {
        let got = ps
            .entry(name)
            .ok_or_else(|| mismatch(format!("missing tensor {name}")))?;
        if got.value.shape() != e.value.shape() || got.trainable != e.trainable {
            return Err(mismatch(format!(
                "{name}: expected {:?}, found {:?}",
                e.value.shape(),
                got.value.shape()
            )));
        }
    }
    Ok(())
}
