//! Input-preprocessing defenses applied before victim training.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Defense {
    /// Luma of RGB inputs, replicated across channels.
    Grayscale,
    /// Bit-depth reduction to `2^depth` uniform levels.
    Bdr { depth: u32 },
}

impl Defense {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Defense::Bdr { depth } if !(1..=16).contains(&depth) => Err(Error::validation("defenses.depth", format!("bit depth must lie in 1..=16, got {depth}"))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Defense::Grayscale => "grayscale".into(),
            Defense::Bdr { depth } => format!("bdr{depth}"),
        }
    }
}

/// Applies `defense` to a batch `[N,C,H,W]` of images in [0,1].
pub fn defense_transform(images: &Tensor<f32>, defense: Defense) -> Result<Tensor<f32>> {
    defense.validate()?;
    if images.ndim() != 4 {
        return Err(Error::shape("defense", format!("images must be [N,C,H,W], got {:?}", images.shape())));
    }
    match defense {
        Defense::Grayscale => {
            let s = images.shape();
            let (c, plane) = (s[1], s[2] * s[3]);
            if c != 3 && c != 1 {
                return Err(Error::shape("grayscale", format!("expected 1 or 3 channels, got {c}")));
            }
            let mut out = images.clone();
            if c == 3 {
                for row in out.data_mut().chunks_mut(3 * plane) {
                    for p in 0..plane {
                        let y = (LUMA[0] * row[p] + LUMA[1] * row[plane + p] + LUMA[2] * row[2 * plane + p]).clamp(0.0, 1.0);
                        for ch in 0..3 {
                            row[ch * plane + p] = y;
                        }
                    }
                }
            }
            Ok(out)
        }
        Defense::Bdr { depth } => {
            let levels = ((1u32 << depth) - 1) as f32;
            Ok(images.map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels))
        }
    }
}
