//! Rejection defense for the fusion classifier.
//!
//! Each class is summarized by the centroid of its training features R(x).
//! A query is scored by the distance E between its feature and the centroid
//! of its *predicted* class; large distances mark inputs the network is
//! confident about for the wrong reasons. The threshold beta comes from a
//! grid scan that stops at the first candidate keeping the calibration
//! false-positive rate within budget. At inference the score becomes an
//! extra rejection entry appended to the softmax output, either as a hard
//! 0/1 switch or as a sigmoid blend that stays differentiable for
//! defense-aware attacks.

use std::fs;
use std::path::Path;

use crate::dataset::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax, FusionNet};
use crate::tensor::Tensor;

/// Per-class feature centroids, one vector of dimension `a` per class.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Centroids {
    vecs: Vec<Vec<f32>>,
}

impl Centroids {
    pub fn new(vecs: Vec<Vec<f32>>) -> Result<Centroids> {
        if vecs.is_empty() {
            return Err(Error::Detector("centroid store needs at least one class".into()));
        }
        let dim = vecs[0].len();
        if dim == 0 || vecs.iter().any(|v| v.len() != dim) {
            return Err(Error::Detector(
                "centroids must share one nonzero feature dimension".into(),
            ));
        }
        if vecs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "centroid store".into(),
            });
        }
        Ok(Centroids { vecs })
    }

    pub fn num_classes(&self) -> usize {
        self.vecs.len()
    }

    pub fn dim(&self) -> usize {
        self.vecs[0].len()
    }

    pub fn class(&self, label: usize) -> &[f32] {
        &self.vecs[label]
    }
}

/// Mean training feature per class, grouped by true labels. One forward
/// pass per sample; sums are accumulated in 64-bit.
pub fn compute_centroids(
    net: &FusionNet,
    train: &Dataset,
    stats: &ChannelStats,
) -> Result<Centroids> {
    if train.is_empty() {
        return Err(Error::Detector(
            "cannot compute centroids on an empty split".into(),
        ));
    }
    let classes = train.num_classes;
    let dim = net.arch.a;
    let mut sums = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];

    let tape = net.bind(false);
    for sample in &train.samples {
        if sample.label >= classes {
            return Err(Error::Detector(format!(
                "sample {} has label {} outside the {} classes",
                sample.id, sample.label, classes
            )));
        }
        let (x_rgb, x_depth) = sample.preprocess(stats)?;
        let record = tape.forward(&x_rgb, &x_depth)?;
        for (acc, v) in sums[sample.label].iter_mut().zip(record.feature.data()) {
            *acc += *v as f64;
        }
        counts[sample.label] += 1;
    }

    for (label, &count) in counts.iter().enumerate() {
        if count == 0 {
            let name = train
                .class_names
                .get(label)
                .map(String::as_str)
                .unwrap_or("unnamed");
            return Err(Error::Detector(format!(
                "class {label} ({name}) has no training samples to average"
            )));
        }
    }

    Centroids::new(
        sums.iter()
            .zip(&counts)
            .map(|(sum, &count)| sum.iter().map(|v| (v / count as f64) as f32).collect())
            .collect(),
    )
}

/// Everything the detector derives from one forward pass.
#[derive(Clone, Debug)]
pub struct Diagnosis {
    pub scores: Vec<f32>,
    pub feature: Vec<f32>,
    pub predicted: usize,
    /// Distance E between the feature and the predicted class's centroid.
    pub anomaly: f32,
}

/// Score one input: a single forward pass yields the class scores, the
/// fused feature, and the anomaly distance to the predicted centroid.
pub fn diagnose(
    net: &FusionNet,
    centroids: &Centroids,
    x_rgb: &Tensor,
    x_depth: &Tensor,
) -> Result<Diagnosis> {
    if centroids.num_classes() != net.arch.c || centroids.dim() != net.arch.a {
        return Err(Error::Detector(format!(
            "centroid store holds {} classes of dim {}, network expects {} of dim {}",
            centroids.num_classes(),
            centroids.dim(),
            net.arch.c,
            net.arch.a
        )));
    }
    let record = net.forward(x_rgb, x_depth)?;
    let predicted = argmax(record.scores.data());
    let anomaly = l2_distance(record.feature.data(), centroids.class(predicted));
    Ok(Diagnosis {
        scores: record.scores.data().to_vec(),
        feature: record.feature.data().to_vec(),
        predicted,
        anomaly,
    })
}

/// Anomaly score E for one input. Zero exactly when the feature sits on
/// the predicted class's centroid.
pub fn anomaly_score(
    net: &FusionNet,
    centroids: &Centroids,
    x_rgb: &Tensor,
    x_depth: &Tensor,
) -> Result<f32> {
    Ok(diagnose(net, centroids, x_rgb, x_depth)?.anomaly)
}

fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut total = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        total += d * d;
    }
    total.sqrt() as f32
}

/// Settings for the threshold scan and the soft score.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CalibrationConfig {
    /// False-positive budget r: the largest acceptable fraction of
    /// calibration samples scored above the threshold.
    pub fpr_target: f64,
    /// Grid pitch rho; candidate thresholds are rho, 2 rho, 3 rho, ...
    pub rho: f64,
    /// How many grid steps to try before giving up.
    pub max_grid: u64,
    /// Sharpness of the soft rejection score.
    pub lambda: f32,
}

impl Default for CalibrationConfig {
    fn default() -> CalibrationConfig {
        CalibrationConfig {
            fpr_target: 0.1,
            rho: 1e-5,
            max_grid: 10_000_000_000,
            lambda: 30.0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fpr_target > 0.0 && self.fpr_target <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fpr target must lie in (0,1], got {}",
                self.fpr_target
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid pitch must be positive, got {}",
                self.rho
            )));
        }
        if self.max_grid == 0 {
            return Err(Error::InvalidArgument("grid must have at least one step".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Smallest grid threshold `rho * i` whose exceedance rate over the scores
/// stays within the false-positive budget.
///
/// The scan walks the grid from below exactly as specified; the only
/// shortcut is breaking out of the counting loop once a candidate has
/// already blown the budget, which cannot change the result. The
/// exceedance count is non-increasing in the threshold, so the first hit
/// is also the best one on the grid; a test pins that monotonicity down.
pub fn calibrate_threshold(
    scores: &[f32],
    fpr_target: f64,
    rho: f64,
    max_grid: u64,
) -> Result<f64> {
    let probe = CalibrationConfig {
        fpr_target,
        rho,
        max_grid,
        ..CalibrationConfig::default()
    };
    probe.validate()?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "threshold calibration needs at least one score".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "calibration scores".into(),
        });
    }

    let n = scores.len();
    // Largest exceedance count whose rate still meets the budget.
    let mut max_exceed = 0usize;
    while max_exceed + 1 <= n && (max_exceed + 1) as f64 / n as f64 <= fpr_target {
        max_exceed += 1;
    }

    for i in 1..=max_grid {
        let beta = rho * i as f64;
        let mut exceed = 0usize;
        for &s in scores {
            if s as f64 > beta {
                exceed += 1;
                if exceed > max_exceed {
                    break;
                }
            }
        }
        if exceed <= max_exceed {
            return Ok(beta);
        }
    }

    let top = rho * max_grid as f64;
    let residual = scores.iter().filter(|&&s| s as f64 > top).count() as f64 / n as f64;
    Err(Error::Detector(format!(
        "no threshold up to {top} meets a false-positive rate of {fpr_target}; \
         the grid's last candidate still rejects {residual} of the calibration scores"
    )))
}

/// A calibrated detector: centroids, threshold, and the scan's metadata.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DetectorState {
    pub centroids: Centroids,
    pub beta: f64,
    pub lambda: f32,
    pub fpr_target: f64,
    pub rho: f64,
    /// Fraction of calibration scores above beta, measured after the scan.
    pub achieved_fpr: f64,
}

impl DetectorState {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Detector(format!(
                "detector is uncalibrated: threshold {} must be positive",
                self.beta
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Detector(format!(
                "soft score needs a positive lambda, got {}",
                self.lambda
            )));
        }
        if self.achieved_fpr > self.fpr_target {
            return Err(Error::Detector(format!(
                "recorded false-positive rate {} exceeds the target {}",
                self.achieved_fpr, self.fpr_target
            )));
        }
        Ok(())
    }
}

/// Compute centroids on one split, scores on another, and scan for the
/// threshold. Passing the training split twice mirrors the reference
/// procedure; a held-out score split avoids its optimistic bias.
pub fn calibrate(
    net: &FusionNet,
    centroid_split: &Dataset,
    score_split: &Dataset,
    stats: &ChannelStats,
    cfg: &CalibrationConfig,
) -> Result<DetectorState> {
    cfg.validate()?;
    let centroids = compute_centroids(net, centroid_split, stats)?;
    if score_split.is_empty() {
        return Err(Error::Detector(
            "cannot calibrate a threshold without scores".into(),
        ));
    }
    let mut scores = Vec::with_capacity(score_split.len());
    for sample in &score_split.samples {
        let (x_rgb, x_depth) = sample.preprocess(stats)?;
        scores.push(diagnose(net, &centroids, &x_rgb, &x_depth)?.anomaly);
    }
    let beta = calibrate_threshold(&scores, cfg.fpr_target, cfg.rho, cfg.max_grid)?;
    let achieved_fpr =
        scores.iter().filter(|&&s| s as f64 > beta).count() as f64 / scores.len() as f64;
    Ok(DetectorState {
        centroids,
        beta,
        lambda: cfg.lambda,
        fpr_target: cfg.fpr_target,
        rho: cfg.rho,
        achieved_fpr,
    })
}

/// Soft rejection score: sigmoid(lambda (E - beta)). One half exactly at
/// E = beta, toward one far outside the threshold, toward zero far inside.
pub fn soft_reject_score(anomaly: f32, beta: f64, lambda: f32) -> f32 {
    let z = lambda as f64 * (anomaly as f64 - beta);
    (1.0 / (1.0 + (-z).exp())) as f32
}

/// Append the rejection entry: S' = [(1-s)s_1, ..., (1-s)s_c, s].
pub fn defended_scores(class_scores: &[f32], s_reject: f32) -> Vec<f32> {
    let keep = 1.0 - s_reject;
    let mut out: Vec<f32> = class_scores.iter().map(|v| keep * v).collect();
    out.push(s_reject);
    out
}

/// How the rejection entry is formed from the anomaly score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectMode {
    /// 1 when E exceeds the threshold, else 0.
    Hard,
    /// The sigmoid blend; differentiable in E.
    Soft,
}

/// Defended prediction over c classes plus the rejection entry.
#[derive(Clone, Debug)]
pub struct DefendedVerdict {
    /// S'(x): c class entries rescaled by (1 - s_reject), then s_reject.
    pub s_prime: Vec<f32>,
    /// Argmax over all c+1 entries; equal to `num_classes` on rejection.
    pub label: usize,
    pub anomaly: f32,
    pub rejected: bool,
}

pub fn defended_predict(
    net: &FusionNet,
    detector: &DetectorState,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    mode: RejectMode,
) -> Result<DefendedVerdict> {
    detector.validate()?;
    let diag = diagnose(net, &detector.centroids, x_rgb, x_depth)?;
    let s_reject = match mode {
        RejectMode::Hard => {
            if diag.anomaly as f64 > detector.beta {
                1.0
            } else {
                0.0
            }
        }
        RejectMode::Soft => soft_reject_score(diag.anomaly, detector.beta, detector.lambda),
    };
    let s_prime = defended_scores(&diag.scores, s_reject);
    let label = argmax(&s_prime);
    Ok(DefendedVerdict {
        label,
        anomaly: diag.anomaly,
        rejected: label == diag.scores.len(),
        s_prime,
    })
}

pub fn save_detector(path: &Path, detector: &DetectorState) -> Result<()> {
    detector.validate()?;
    let body = serde_json::to_string_pretty(detector)
        .map_err(|e| Error::Detector(format!("cannot encode detector state: {e}")))?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_detector(path: &Path) -> Result<DetectorState> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let detector: DetectorState = serde_json::from_str(&body)
        .map_err(|e| Error::format(path, format!("invalid detector state: {e}")))?;
    detector.validate()?;
    Ok(detector)
}
