//! The encoder network: position and source embeddings, self-unknown
//! attention layers with layer-frozen keys and values, the projector used for
//! contrastive pretraining, and the classifier used after calibration.
//!
//! Parameters live in a [`ParameterSet`] under the prefixes `enc.`, `proj.`
//! and `clf.`.

mod check;
mod config;
mod network;
mod params;

pub use check::{pipeline_grad_check, PipelineGradCheck, CROSS_ENTROPY_STEP, PIPELINE_STEP};
pub use config::{MaskStyle, ModelConfig};
pub use network::{
    classify, embed_positions, embed_source, encode, encoder_layer, init_inputs, masked_attention,
    project, EncoderVars,
};
pub use params::{
    check_shapes, init_params, reinit_classifier, CLASSIFIER_PREFIX, ENCODER_PREFIX, L_EMB_STD,
    PROJECTOR_PREFIX,
};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Mode, ParameterSet, Tensor};
use crate::montage::ChannelMontage;

/// Samples per graph during batched inference.
pub const INFERENCE_CHUNK: usize = 256;

/// Stacks `n × bands` matrices into a `[B, n, bands]` tensor.
pub fn de_tensor(batch: &[Array2<f64>]) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let dim = first.dim();
    let mut data = Vec::with_capacity(batch.len() * dim.0 * dim.1);
    for m in batch {
        if m.dim() != dim {
            return Err(Error::Shape(format!("sample {:?} in batch of {dim:?}", m.dim())));
        }
        data.extend(m.iter().copied());
    }
    Tensor::new(vec![batch.len(), dim.0, dim.1], data)
}

pub fn positions_tensor(montage: &ChannelMontage) -> Tensor {
    Tensor::from_array2(montage.positions().view())
}

/// What an inference pass returns per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    /// Flattened final query stream, `n·d` values.
    Encoded,
    /// Projector output.
    Projected,
    /// Classifier logits.
    Logits,
    /// Softmax of the classifier logits.
    Probabilities,
}

/// Eval-mode forward pass (running batch-norm statistics, no dropout) over
/// `batch`, one output row per sample.
pub fn infer(
    ps: &ParameterSet,
    cfg: &ModelConfig,
    pos: &Tensor,
    batch: &[Array2<f64>],
    masked: bool,
    output: Output,
) -> Result<Array2<f64>> {
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0;
    for chunk in batch.chunks(INFERENCE_CHUNK) {
        let mut g = Graph::new(Mode::Eval, 0);
        let de = g.constant(de_tensor(chunk)?)?;
        let enc = encode(&mut g, ps, cfg, de, pos, masked)?;
        let out = match output {
            Output::Encoded => {
                let s = g.shape(enc.q_final).to_vec();
                g.reshape(enc.q_final, &[s[0], s[1] * s[2]])?
            }
            Output::Projected => project(&mut g, ps, cfg, enc.q_final)?,
            Output::Logits | Output::Probabilities => classify(&mut g, ps, cfg, enc.q_final)?,
        };
        let t = g.value(out);
        width = t.last_dim();
        if output == Output::Probabilities {
            for row in t.data().chunks_exact(width) {
                let mut p = row.to_vec();
                crate::gradcore::softmax_in_place(&mut p);
                rows.extend(p);
            }
        } else {
            rows.extend_from_slice(t.data());
        }
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(Array2::from_shape_vec((batch.len(), width), rows).expect("rows of equal width"))
}
