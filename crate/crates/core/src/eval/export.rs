use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureSample;
use crate::error::{Error, Result};
use crate::gradcore::ParameterSet;
use crate::model::{infer, positions_tensor, ModelConfig, Output};
use crate::montage::ChannelMontage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// The DE inputs, channels × bands flattened row-major.
    Raw,
    /// Projector output of the pretrained model.
    Encoded,
    /// Projector output of the calibrated model.
    Calibrated,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Encoded => "encoded",
            Stage::Calibrated => "calibrated",
        }
    }
}

/// Feature rows of one stage as used by [`write_features_csv`].
pub fn stage_features(
    samples: &[FeatureSample],
    montage: &ChannelMontage,
    mconf: &ModelConfig,
    stage: Stage,
    params: Option<&ParameterSet>,
) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to export".into()));
    }
    match (stage, params) {
        (Stage::Raw, _) => {
            let width = samples[0].de.len();
            let mut data = Vec::with_capacity(samples.len() * width);
            for s in samples {
                if s.de.len() != width {
                    return Err(Error::Shape(format!("sample of {} values, expected {width}", s.de.len())));
                }
                data.extend(s.de.iter().map(|&v| f64::from(v)));
            }
            Ok(Array2::from_shape_vec((samples.len(), width), data).expect("rows of equal width"))
        }
        (_, Some(p)) => {
            let de: Vec<Array2<f64>> = samples.iter().map(FeatureSample::de_f64).collect();
            infer(p, mconf, &positions_tensor(montage), &de, false, Output::Projected)
        }
        (s, None) => Err(Error::InvalidArgument(format!("stage {} needs a model", s.as_str()))),
    }
}

/// Writes `subject,session,trial,window,label,stage,f0..` with one row per
/// sample. Raw values are printed at their stored `f32` precision.
pub fn write_features_csv(
    out: &mut dyn Write,
    samples: &[FeatureSample],
    montage: &ChannelMontage,
    mconf: &ModelConfig,
    stage: Stage,
    params: Option<&ParameterSet>,
) -> Result<()> {
    let features = stage_features(samples, montage, mconf, stage, params)?;
    let mut text = String::from("subject,session,trial,window,label,stage");
    for i in 0..features.ncols() {
        text.push_str(&format!(",f{i}"));
    }
    text.push('\n');
    for (s, row) in samples.iter().zip(features.rows()) {
        text.push_str(&format!(
            "{},{},{},{},{},{}",
            s.subject_id,
            s.session_id,
            s.trial_id,
            s.window_index,
            s.label,
            stage.as_str()
        ));
        for &v in row {
            if stage == Stage::Raw {
                text.push_str(&format!(",{}", v as f32));
            } else {
                text.push_str(&format!(",{v}"));
            }
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<features csv>", e))
}
