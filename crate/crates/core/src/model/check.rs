use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    classify, de_tensor, encode, init_params, positions_tensor, project, ModelConfig, CLASSIFIER_PREFIX,
    ENCODER_PREFIX, PROJECTOR_PREFIX,
};
use crate::error::{Error, Result};
use crate::gradcore::{grad_check, GradCheckReport, Graph, Mode, ParameterSet, Tensor, Var};
use crate::loss::{contrastive_loss_graph, Pairing, TAU};
use crate::montage::ChannelMontage;

/// Finite-difference step of the contrastive checks. The temperature-scaled
/// cosines curve sharply, so larger steps add truncation error.
pub const PIPELINE_STEP: f64 = 1e-5;

/// Finite-difference step of the cross-entropy check. Its query-projection
/// gradients reach 1e-8 at initialisation, where the rounding of a 1e-5
/// quotient (`ε·|f|/h` ≈ 3e-11) is already a 1e-3 relative error; the loss is
/// smooth enough that the larger step costs no measurable truncation.
pub const CROSS_ENTROPY_STEP: f64 = 1e-4;

/// Train-mode passes over fresh batches that settle the batch-norm running
/// statistics before the running-statistics check.
const SETTLE_PASSES: usize = 300;

/// Gradient checks of the whole network: the contrastive path (encoder and
/// projector, two masked views) and the classification path (encoder and
/// classifier, mask off).
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineGradCheck {
    /// Contrastive loss with batch norm on running statistics.
    pub contrastive_eval: GradCheckReport,
    /// Contrastive loss with batch norm on batch statistics.
    pub contrastive_train: GradCheckReport,
    pub cross_entropy: GradCheckReport,
}

impl PipelineGradCheck {
    /// Largest relative error, skipping coordinates whose gradient vanishes
    /// identically.
    pub fn max_rel_error(&self) -> f64 {
        self.contrastive_eval
            .max_rel_error_nonvanishing
            .max(self.contrastive_train.max_rel_error_nonvanishing)
            .max(self.cross_entropy.max_rel_error_nonvanishing)
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, cfg: &ModelConfig) -> Result<Tensor> {
    let xs: Vec<Array2<f64>> = (0..b)
        .map(|_| Array2::from_shape_fn((cfg.n_channels, cfg.n_bands), |_| rng.random_range(-2.0..2.0)))
        .collect();
    de_tensor(&xs)
}

/// Runs the checks on seeded random inputs with dropout disabled. Before
/// the running-statistics check the batch-norm buffers are settled on
/// random batches from the same distribution as the checked one, since at
/// their initial values every projection points the same way and the loss
/// saturates.
pub fn pipeline_grad_check(cfg: &ModelConfig, montage: &ChannelMontage, seed: u64) -> Result<PipelineGradCheck> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..cfg.clone()
    };
    cfg.validate()?;
    if montage.len() != cfg.n_channels {
        return Err(Error::Shape(format!(
            "montage has {} channels, model expects {}",
            montage.len(),
            cfg.n_channels
        )));
    }
    let pos = positions_tensor(montage);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..2 * cfg.n_classes.max(3)).map(|i| i % cfg.n_classes).collect();
    let (va, vb) = (random_batch(&mut rng, labels.len(), &cfg)?, random_batch(&mut rng, labels.len(), &cfg)?);
    let contrastive_on = |g: &mut Graph, ps: &ParameterSet, va: &Tensor, vb: &Tensor| -> Result<Var> {
        let a = g.constant(va.clone())?;
        let b = g.constant(vb.clone())?;
        let ea = encode(g, ps, &cfg, a, &pos, true)?;
        let za = project(g, ps, &cfg, ea.q_final)?;
        let eb = encode(g, ps, &cfg, b, &pos, true)?;
        let zb = project(g, ps, &cfg, eb.q_final)?;
        contrastive_loss_graph(g, za, zb, &labels, &labels, TAU, Pairing::Full)
    };
    let contrastive = |g: &mut Graph, ps: &ParameterSet| contrastive_on(g, ps, &va, &vb);
    let init = init_params(&cfg, seed)?;
    let mut ps = init.filtered(&[ENCODER_PREFIX, PROJECTOR_PREFIX]);
    for _ in 0..SETTLE_PASSES {
        let (a, b) = (random_batch(&mut rng, labels.len(), &cfg)?, random_batch(&mut rng, labels.len(), &cfg)?);
        let mut g = Graph::new(Mode::Train, 0);
        contrastive_on(&mut g, &ps, &a, &b)?;
        ps.apply_buffer_updates(g.take_buffer_updates())?;
    }
    let contrastive_eval = grad_check(&ps, PIPELINE_STEP, Mode::Eval, contrastive)?;
    let contrastive_train = grad_check(&ps, PIPELINE_STEP, Mode::Train, contrastive)?;

    let ce_labels: Vec<usize> = (0..cfg.n_classes + 2).map(|i| (i * 7 + 1) % cfg.n_classes).collect();
    let x = random_batch(&mut rng, ce_labels.len(), &cfg)?;
    let ps = init.filtered(&[ENCODER_PREFIX, CLASSIFIER_PREFIX]);
    let cross_entropy = grad_check(&ps, CROSS_ENTROPY_STEP, Mode::Train, |g, ps| {
        let x = g.constant(x.clone())?;
        let e = encode(g, ps, &cfg, x, &pos, false)?;
        let logits = classify(g, ps, &cfg, e.q_final)?;
        g.cross_entropy(logits, &ce_labels)
    })?;
    Ok(PipelineGradCheck {
        contrastive_eval,
        contrastive_train,
        cross_entropy,
    })
}
