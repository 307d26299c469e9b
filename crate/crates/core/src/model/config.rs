use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the diagonal of the attention logits is suppressed while masking is
/// active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    /// Diagonal logits become a large negative number before the softmax, so
    /// each channel gives itself exactly zero weight.
    #[default]
    NegInf,
    /// Diagonal logits are multiplied by zero before the softmax. The
    /// diagonal then keeps weight `exp(0)` relative to the other entries.
    ZeroLogit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub n_channels: usize,
    pub n_bands: usize,
    /// Widths of the three projector layers after flattening.
    pub proj_dims: Vec<usize>,
    /// Hidden widths of the classifier.
    pub clf_hidden: Vec<usize>,
    pub n_classes: usize,
    pub mask_style: MaskStyle,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            ffn_hidden: 64,
            dropout: 0.1,
            n_channels: 62,
            n_bands: 5,
            proj_dims: vec![128, 256, 128],
            clf_hidden: vec![32, 32],
            n_classes: 3,
            mask_style: MaskStyle::NegInf,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("n_channels", self.n_channels),
            ("n_bands", self.n_bands),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.proj_dims.len() != 3 || self.proj_dims.contains(&0) {
            return Err(Error::Config(format!("proj_dims {:?} must be three positive widths", self.proj_dims)));
        }
        if self.clf_hidden.contains(&0) {
            return Err(Error::Config(format!("clf_hidden {:?} has a zero width", self.clf_hidden)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the projector output.
    pub fn embedding_dim(&self) -> usize {
        self.proj_dims[2]
    }

    /// The small configuration used for finite-difference checks.
    pub fn tiny(n_channels: usize, n_classes: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_hidden: 16,
            dropout: 0.0,
            n_channels,
            n_bands: 5,
            proj_dims: vec![16, 16, 8],
            clf_hidden: vec![8, 8],
            n_classes,
            mask_style: MaskStyle::NegInf,
        }
    }
}
