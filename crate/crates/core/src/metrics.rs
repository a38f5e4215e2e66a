//! Normalised mean error, cumulative error distribution, AUC and failure
//! rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::LandmarkSet;

pub const DEFAULT_THRESHOLD: f64 = 0.08;
pub const DEFAULT_BINS: usize = 81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} landmarks, ground truth {gt}")]
    LandmarkCount { pred: usize, gt: usize },
    #[error("normalisation distance is zero")]
    Degenerate,
    #[error("landmark index {index} out of range for {count} landmarks")]
    Index { index: usize, count: usize },
    #[error("{predictions} predictions for {ground_truth} ground-truth shapes")]
    CountMismatch { predictions: usize, ground_truth: usize },
    #[error("no errors to summarise")]
    Empty,
    #[error("threshold must be positive and bins at least 2")]
    BadCurve,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Normalization {
    /// Distance between the centroids of two eye landmark groups.
    InterPupil { left: Vec<usize>, right: Vec<usize> },
    /// Distance between two outer eye-corner landmarks.
    InterOcular { left: usize, right: usize },
}

impl Normalization {
    /// 68-point markup, eye centres as the mean of each eye's six points.
    pub fn inter_pupil_68() -> Self {
        Self::InterPupil {
            left: (36..42).collect(),
            right: (42..48).collect(),
        }
    }

    /// 68-point markup, outer eye corners.
    pub fn inter_ocular_68() -> Self {
        Self::InterOcular { left: 36, right: 45 }
    }

    /// Markups whose first two points are the eye centres.
    pub fn eye_points(left: usize, right: usize) -> Self {
        Self::InterPupil {
            left: vec![left],
            right: vec![right],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::InterPupil { .. } => "inter-pupil",
            Self::InterOcular { .. } => "inter-ocular",
        }
    }

    pub fn distance(&self, gt: &LandmarkSet) -> Result<f64> {
        let pts = gt.points();
        let get = |i: usize| {
            pts.get(i).copied().ok_or(MetricsError::Index {
                index: i,
                count: pts.len(),
            })
        };
        let mean_of = |idx: &[usize]| -> Result<[f64; 2]> {
            if idx.is_empty() {
                return Err(MetricsError::Degenerate);
            }
            let mut s = [0.0, 0.0];
            for &i in idx {
                let p = get(i)?;
                s[0] += p[0];
                s[1] += p[1];
            }
            Ok([s[0] / idx.len() as f64, s[1] / idx.len() as f64])
        };
        let (a, b) = match self {
            Self::InterPupil { left, right } => (mean_of(left)?, mean_of(right)?),
            Self::InterOcular { left, right } => (get(*left)?, get(*right)?),
        };
        let d = (a[0] - b[0]).hypot(a[1] - b[1]);
        if d > 0.0 && d.is_finite() {
            Ok(d)
        } else {
            Err(MetricsError::Degenerate)
        }
    }
}

/// Interior 51 points of the 68-point markup (the jawline removed).
pub fn subset_51_of_68() -> Vec<usize> {
    (17..68).collect()
}

fn point_errors(pred: &LandmarkSet, gt: &LandmarkSet, subset: Option<&[usize]>) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LandmarkCount {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..gt.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    for &i in idx {
        let (p, g) = match (pred.points().get(i), gt.points().get(i)) {
            (Some(p), Some(g)) => (p, g),
            _ => return Err(MetricsError::Index { index: i, count: gt.len() }),
        };
        sum += (p[0] - g[0]).hypot(p[1] - g[1]);
    }
    Ok(sum / idx.len() as f64)
}

/// Mean point error divided by the normalisation distance of `gt`.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, normalization: &Normalization) -> Result<f64> {
    nme_subset(pred, gt, normalization, None)
}

/// As [`nme`], averaging only over `subset` (the normalisation distance
/// still uses the full ground truth).
pub fn nme_subset(pred: &LandmarkSet, gt: &LandmarkSet, normalization: &Normalization, subset: Option<&[usize]>) -> Result<f64> {
    let mean = point_errors(pred, gt, subset)?;
    Ok(mean / normalization.distance(gt)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedSummary {
    /// `(threshold, fraction of errors ≤ threshold)`.
    pub samples: Vec<(f64, f64)>,
    pub auc: f64,
    pub failure_rate: f64,
}

/// Samples the empirical CDF at `bins` evenly spaced points of
/// `[0, threshold]`, as one minus the fraction above each point so the last
/// sample is exactly `1 − failure_rate`.
///
/// The AUC is the exact integral of the step CDF over `[0, threshold]`
/// divided by `threshold`, i.e. `mean(max(0, threshold − e)) / threshold`.
/// Failures are errors strictly above the threshold.
pub fn ced_auc_fr(errors: &[f64], threshold: f64, bins: usize) -> Result<CedSummary> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(threshold > 0.0) || bins < 2 {
        return Err(MetricsError::BadCurve);
    }
    let n = errors.len() as f64;
    let samples = (0..bins)
        .map(|j| {
            let x = if j == bins - 1 { threshold } else { threshold * j as f64 / (bins - 1) as f64 };
            (x, 1.0 - errors.iter().filter(|&&e| e > x).count() as f64 / n)
        })
        .collect();
    let auc = errors.iter().map(|&e| (threshold - e).max(0.0)).sum::<f64>() / n / threshold;
    let failure_rate = errors.iter().filter(|&&e| e > threshold).count() as f64 / n;
    Ok(CedSummary {
        samples,
        auc,
        failure_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub normalization: Normalization,
    pub threshold: f64,
    pub bins: usize,
    pub subset: Option<Vec<usize>>,
}

impl EvalConfig {
    pub fn new(normalization: Normalization) -> Self {
        Self {
            normalization,
            threshold: DEFAULT_THRESHOLD,
            bins: DEFAULT_BINS,
            subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image_nme: Vec<f64>,
    pub mean_nme: f64,
    pub normalization: String,
    pub ced_samples: Vec<(f64, f64)>,
    pub auc: f64,
    pub failure_rate: f64,
    pub threshold: f64,
    pub subset: Vec<usize>,
}

pub fn evaluate(predictions: &[LandmarkSet], ground_truth: &[LandmarkSet], cfg: &EvalConfig) -> Result<EvalReport> {
    if predictions.len() != ground_truth.len() {
        return Err(MetricsError::CountMismatch {
            predictions: predictions.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let per_image_nme = predictions
        .iter()
        .zip(ground_truth)
        .map(|(p, g)| nme_subset(p, g, &cfg.normalization, cfg.subset.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let ced = ced_auc_fr(&per_image_nme, cfg.threshold, cfg.bins)?;
    let m = ground_truth.first().map_or(0, LandmarkSet::len);
    Ok(EvalReport {
        mean_nme: per_image_nme.iter().sum::<f64>() / per_image_nme.len() as f64,
        per_image_nme,
        normalization: cfg.normalization.name().to_string(),
        ced_samples: ced.samples,
        auc: ced.auc,
        failure_rate: ced.failure_rate,
        threshold: cfg.threshold,
        subset: cfg.subset.clone().unwrap_or_else(|| (0..m).collect()),
    })
}
