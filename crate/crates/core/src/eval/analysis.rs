use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};

use super::Representation;
use crate::dsp::FeatureSample;
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Mode, ParameterSet};
use crate::model::{de_tensor, encode, positions_tensor, ModelConfig, INFERENCE_CHUNK};
use crate::montage::ChannelMontage;

/// Mean `‖f(x) − f(y)‖₂^α` over unordered pairs of distinct samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassDistances {
    /// Over pairs with different labels.
    pub inter_class: f64,
    /// Over pairs with the same label.
    pub intra_class: f64,
}

pub fn icd_ics(features: ArrayView2<f64>, labels: &[usize], alpha: f64) -> Result<ClassDistances> {
    let n = features.nrows();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} feature rows, {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::Precondition("class distances need at least 2 samples".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} must be positive")));
    }
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::Precondition("inter-class distance needs two classes".into()));
    }
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let a = features.row(i);
        for j in i + 1..n {
            let sq: f64 = a.iter().zip(features.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            let d = if alpha == 2.0 { sq } else { sq.sqrt().powf(alpha) };
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    Ok(ClassDistances {
        inter_class: inter / n_inter as f64,
        intra_class: if n_intra == 0 { 0.0 } else { intra / n_intra as f64 },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityResult {
    /// Cosine similarity between channel representations; the diagonal is 1.
    pub adjacency: Array2<f64>,
    pub retained: Array2<bool>,
    /// Mean plus 1.8 standard deviations of the off-diagonal entries.
    pub threshold: f64,
    pub degree_centrality: Vec<f64>,
}

impl ConnectivityResult {
    /// Retained edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.retained.nrows();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.retained[[i, j]])
            .collect()
    }
}

/// Connectivity of per-channel representation rows `r` (channels × width).
pub fn connectivity_from(r: ArrayView2<f64>) -> Result<ConnectivityResult> {
    let n = r.nrows();
    if n < 2 {
        return Err(Error::Precondition("connectivity needs at least 2 channels".into()));
    }
    let norms: Vec<f64> = r.rows().into_iter().map(|row| row.dot(&row).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::Precondition(format!("channel {i} has a zero-norm representation")));
    }
    let mut adjacency = Array2::from_elem((n, n), 1.0);
    for i in 0..n {
        for j in i + 1..n {
            let c = (r.row(i).dot(&r.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            adjacency[[i, j]] = c;
            adjacency[[j, i]] = c;
        }
    }
    let off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| adjacency[[i, j]])
        .collect();
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    let std = (off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / off.len() as f64).sqrt();
    let threshold = mean + 1.8 * std;
    let retained = Array2::from_shape_fn((n, n), |(i, j)| i != j && adjacency[[i, j]] > threshold);
    let degree_centrality = retained
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&b| b).count() as f64 / (n - 1) as f64)
        .collect();
    Ok(ConnectivityResult {
        adjacency,
        retained,
        threshold,
        degree_centrality,
    })
}

/// Test-mode final-layer rows averaged over `samples`, channels × d_model.
pub fn mean_channel_representation(
    params: &ParameterSet,
    mconf: &ModelConfig,
    montage: &ChannelMontage,
    samples: &[FeatureSample],
) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(Error::Precondition("connectivity needs a non-empty evaluation set".into()));
    }
    let pos = positions_tensor(montage);
    let mut sum = Array2::<f64>::zeros((mconf.n_channels, mconf.d_model));
    for chunk in samples.chunks(INFERENCE_CHUNK) {
        let de: Vec<Array2<f64>> = chunk.iter().map(FeatureSample::de_f64).collect();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(de_tensor(&de)?)?;
        let enc = encode(&mut g, params, mconf, x, &pos, false)?;
        let q = g.value(enc.q_final);
        let view = ArrayView2::from_shape((chunk.len() * mconf.n_channels, mconf.d_model), q.data())
            .map_err(|e| Error::Shape(e.to_string()))?;
        for block in view.axis_chunks_iter(Axis(0), mconf.n_channels) {
            sum += &block;
        }
    }
    Ok(sum / samples.len() as f64)
}

/// Channel connectivity of a trained model.
pub fn connectivity(
    params: &ParameterSet,
    mconf: &ModelConfig,
    montage: &ChannelMontage,
    samples: &[FeatureSample],
    representation: Representation,
) -> Result<ConnectivityResult> {
    if montage.len() < 2 {
        return Err(Error::Precondition("connectivity needs at least 2 channels".into()));
    }
    let r = match representation {
        Representation::FinalLayer => mean_channel_representation(params, mconf, montage, samples)?,
        Representation::LearnedEmbedding => {
            let t = params.get("enc.l_emb")?;
            Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?
        }
    };
    connectivity_from(r.view())
}
