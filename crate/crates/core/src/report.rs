//! Evaluation reports: JSON-serializable results with the per-image
//! predictions they were computed from, so every accuracy can be recomputed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruct::LossParts;
use crate::svdd::DetectionMetrics;

/// One logged prediction: (true label, predicted label).
pub type PredictionRecord = (usize, usize);

pub fn accuracy_of(predictions: &[PredictionRecord]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().filter(|(t, p)| t == p).count() as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub proportion: f64,
    pub accuracy: f64,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub random: Vec<SweepPoint>,
    pub grad: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub reconstruction: bool,
    pub cnn_features: bool,
    /// "none" | "full" | "extracted"
    pub latents: String,
    pub accuracy: f64,
    pub predictions: Vec<PredictionRecord>,
}

/// PSNR is None when the images were identical (the +infinity sentinel has
/// no JSON encoding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub loss_means: Option<LossParts>,
    pub mask_proportion: f64,
}

impl QualityReport {
    pub fn from_metrics(psnr: f64, ssim: f64, mask_proportion: f64) -> Self {
        Self {
            psnr: psnr.is_finite().then_some(psnr),
            ssim,
            loss_means: None,
            mask_proportion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvaluationReport {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<QualityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every stored accuracy must equal the confusion recomputation from its
    /// logged predictions.
    pub fn verify_accuracies(&self) -> Result<()> {
        let check = |acc: f64, preds: &[PredictionRecord], what: &str| -> Result<()> {
            let recomputed = accuracy_of(preds);
            if (acc - recomputed).abs() > 1e-12 {
                return Err(Error::ShapeMismatch(format!(
                    "{what}: stored accuracy {acc} != recomputed {recomputed}"
                )));
            }
            Ok(())
        };
        if let Some(sweep) = &self.sweep {
            for p in sweep.random.iter().chain(sweep.grad.iter()) {
                check(p.accuracy, &p.predictions, "sweep point")?;
            }
        }
        if let Some(rows) = &self.ablation {
            for r in rows {
                check(r.accuracy, &r.predictions, "ablation row")?;
            }
        }
        Ok(())
    }
}
