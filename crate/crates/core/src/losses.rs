//! The three loss terms of the attack objective and their weighted sum:
//! non-printability score, total variation and detection loss.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::imaging::Patch;

/// Built-in printable palette shipped with the crate.
const DEFAULT_PALETTE: &str = include_str!("../assets/printable_colors.txt");

/// Set of printable RGB colors the patch is pulled toward.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintableSet {
    colors: Array2<f64>,
}

impl PrintableSet {
    pub fn new(colors: Array2<f64>) -> Result<Self> {
        if colors.nrows() == 0 {
            return Err(Error::Validation("printable set must be non-empty".into()));
        }
        if colors.ncols() != 3 {
            return Err(Error::Dimension("printable colors must be RGB triples".into()));
        }
        if colors.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(
                "printable color components must be in [0,1]".into(),
            ));
        }
        Ok(Self { colors })
    }

    /// Parses the "r g b" per-line text format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!(
                    "palette line {}: expected 3 components, got {}",
                    ln + 1,
                    parts.len()
                )));
            }
            for p in &parts {
                rows.push(p.parse::<f64>().map_err(|e| {
                    Error::Parse(format!("palette line {}: {e}", ln + 1))
                })?);
            }
        }
        let n = rows.len() / 3;
        let colors = Array2::from_shape_vec((n, 3), rows)
            .map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(colors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text)
    }

    pub fn colors(&self) -> &Array2<f64> {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.nrows() == 0
    }
}

impl Default for PrintableSet {
    fn default() -> Self {
        Self::parse(DEFAULT_PALETTE).expect("embedded palette parses")
    }
}

/// Weights of the combined objective `α·det + β·tv + γ·nps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Validation("loss weights must be non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::Validation("loss weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// Sum over patch pixels of the squared distance to the nearest printable
/// color; zero iff every pixel is exactly printable.
pub fn nps_loss(patch: &Patch, printable: &PrintableSet) -> Result<f64> {
    if printable.is_empty() {
        return Err(Error::Validation("printable set must be non-empty".into()));
    }
    let mut tape = Tape::new();
    let node = tape.constant(patch.pixels().clone().into_dyn());
    let loss = tape.nps(node, printable.colors());
    Ok(tape.scalar(loss))
}

/// Traced NPS for the optimizer.
pub fn nps_node(
    tape: &mut Tape,
    patch_node: NodeId,
    printable: &PrintableSet,
) -> Result<NodeId> {
    if printable.is_empty() {
        return Err(Error::Validation("printable set must be non-empty".into()));
    }
    Ok(tape.nps(patch_node, printable.colors()))
}

/// Total variation with interior index bounds: squared horizontal and
/// vertical neighbor differences for `i,j <= side-2`, summed over channels.
pub fn tv_loss(patch: &Patch) -> Result<f64> {
    if patch.side() < 2 {
        return Err(Error::Validation("tv loss needs patch side >= 2".into()));
    }
    let mut tape = Tape::new();
    let node = tape.constant(patch.pixels().clone().into_dyn());
    let loss = tape.tv(node);
    Ok(tape.scalar(loss))
}

/// Traced TV for the optimizer.
pub fn tv_node(tape: &mut Tape, patch_node: NodeId) -> Result<NodeId> {
    let shape = tape.value(patch_node).shape().to_vec();
    if shape[0] < 2 {
        return Err(Error::Validation("tv loss needs patch side >= 2".into()));
    }
    Ok(tape.tv(patch_node))
}

/// Maximum confidence over all detections; zero when none remain.
pub fn det_loss(detections: &[Detection]) -> f64 {
    detections
        .iter()
        .map(|d| d.confidence)
        .fold(0.0, f64::max)
}

/// Weighted objective `α·det + β·tv + γ·nps`.
pub fn total_loss(det: f64, tv: f64, nps: f64, w: &LossWeights) -> f64 {
    w.alpha * det + w.beta * tv + w.gamma * nps
}
