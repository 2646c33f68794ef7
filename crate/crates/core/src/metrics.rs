//! Anytime-inference metrics: area under the accuracy curve, final accuracy,
//! and per-class forgetting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy sampled along the training-progress axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    /// `(samples_seen, accuracy)`, strictly increasing in `samples_seen`.
    pub points: Vec<(usize, f64)>,
}

impl AccuracyCurve {
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("accuracy curve needs at least one point".into()));
        }
        for pair in points.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Contract(format!(
                    "curve x values must strictly increase, got {} then {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        if let Some(&(x, y)) = points.iter().find(|&&(_, y)| !(0.0..=1.0).contains(&y)) {
            return Err(Error::Contract(format!(
                "accuracy {y} at {x} lies outside [0, 1]"
            )));
        }
        Ok(AccuracyCurve { points })
    }
}

/// Trapezoidal area under the curve, normalized by the x range. A single
/// point degenerates to its accuracy.
pub fn a_auc(curve: &AccuracyCurve) -> f64 {
    let pts = &curve.points;
    if pts.len() == 1 {
        return pts[0].1;
    }
    let mut area = 0.0;
    for pair in pts.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (y0 + y1) / 2.0 * (x1 - x0) as f64;
    }
    area / (pts.last().unwrap().0 - pts[0].0) as f64
}

/// Mean over classes of `max(0, best - final)`. Classes never evaluated
/// (`None` in either vector) are excluded with a warning.
pub fn forgetting(per_class_best: &[Option<f64>], per_class_final: &[Option<f64>]) -> Result<f64> {
    if per_class_best.len() != per_class_final.len() {
        return Err(Error::Contract(
            "best/final vectors must cover the same classes".into(),
        ));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (class, (best, fin)) in per_class_best.iter().zip(per_class_final).enumerate() {
        match (best, fin) {
            (Some(b), Some(f)) => {
                total += (b - f).max(0.0);
                counted += 1;
            }
            _ => log::warn!("class {class} never evaluated; excluded from forgetting"),
        }
    }
    if counted == 0 {
        return Err(Error::Contract("no class was ever evaluated".into()));
    }
    Ok(total / counted as f64)
}

/// Mean and sample standard deviation across seeds (a single seed reports 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}
