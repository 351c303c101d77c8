//! Gradient-based evasion attacks on the fusion classifier.
//!
//! Full-image attacks add a perturbation to every pixel of the targeted
//! streams inside an l-infinity ball; patch attacks replace a square region
//! of the RGB image with optimized content. Both run the same projected
//! gradient loop: descend a margin loss, then clamp each perturbation
//! coordinate back into the intersection of the norm ball and the valid
//! preprocessed pixel range. The defense-aware variants swap in a loss
//! computed on the defended score vector, so the optimizer has to shrink
//! the anomaly score while it flips the class.

mod pgd;

pub use pgd::{adaptive_patch_attack, adaptive_pgd_attack, patch_attack, pgd_attack};

pub use crate::detector::soft_reject_score;

use std::str::FromStr;

use crate::detector::DetectorState;
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardRecord, FusionNet};
use crate::tensor::Tensor;

/// Which input streams the perturbation may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetParts {
    Rgb,
    Depth,
    Both,
}

impl TargetParts {
    pub fn rgb(&self) -> bool {
        matches!(self, TargetParts::Rgb | TargetParts::Both)
    }

    pub fn depth(&self) -> bool {
        matches!(self, TargetParts::Depth | TargetParts::Both)
    }
}

impl FromStr for TargetParts {
    type Err = Error;

    fn from_str(s: &str) -> Result<TargetParts> {
        match s {
            "rgb" => Ok(TargetParts::Rgb),
            "depth" => Ok(TargetParts::Depth),
            "both" => Ok(TargetParts::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown target parts '{other}', expected rgb, depth, or both"
            ))),
        }
    }
}

impl std::fmt::Display for TargetParts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetParts::Rgb => "rgb",
            TargetParts::Depth => "depth",
            TargetParts::Both => "both",
        })
    }
}

/// Unit convention for the perturbation budget. Inputs are preprocessed
/// images on a unit pixel scale, so a budget quoted against 0-255 pixel
/// values is divided by 255 before use. The scale applies to the step size
/// as well, keeping the step-to-radius ratio independent of convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsScale {
    Unit,
    Pixel255,
}

impl EpsScale {
    fn factor(&self) -> f32 {
        match self {
            EpsScale::Unit => 1.0,
            EpsScale::Pixel255 => 1.0 / 255.0,
        }
    }
}

impl FromStr for EpsScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<EpsScale> {
        match s {
            "unit" => Ok(EpsScale::Unit),
            "pixel255" => Ok(EpsScale::Pixel255),
            other => Err(Error::InvalidArgument(format!(
                "unknown epsilon scale '{other}', expected unit or pixel255"
            ))),
        }
    }
}

/// Size and schedule of one attack run.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AttackBudget {
    /// Radius of the l-infinity ball, in `eps_scale` units.
    pub epsilon: f32,
    /// Gradient step size, in `eps_scale` units.
    pub step_size: f32,
    pub iterations: usize,
    pub target_parts: TargetParts,
    pub eps_scale: EpsScale,
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack radius must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size must be finite and positive, got {}",
                self.step_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "an attack needs at least one iteration".into(),
            ));
        }
        Ok(())
    }

    /// Radius on the preprocessed unit scale.
    pub fn effective_epsilon(&self) -> f32 {
        self.epsilon * self.eps_scale.factor()
    }

    /// Step size on the preprocessed unit scale.
    pub fn effective_step(&self) -> f32 {
        self.step_size * self.eps_scale.factor()
    }
}

/// The four attack pipelines the toolkit ships.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    Pgd,
    Patch,
    AdaptivePgd,
    AdaptivePatch,
}

impl AttackMode {
    pub fn is_adaptive(&self) -> bool {
        matches!(self, AttackMode::AdaptivePgd | AttackMode::AdaptivePatch)
    }

    pub fn is_patch(&self) -> bool {
        matches!(self, AttackMode::Patch | AttackMode::AdaptivePatch)
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttackMode> {
        match s {
            "pgd" => Ok(AttackMode::Pgd),
            "patch" => Ok(AttackMode::Patch),
            "adaptive-pgd" => Ok(AttackMode::AdaptivePgd),
            "adaptive-patch" => Ok(AttackMode::AdaptivePatch),
            other => Err(Error::InvalidArgument(format!(
                "unknown attack mode '{other}', expected pgd, patch, adaptive-pgd, or adaptive-patch"
            ))),
        }
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackMode::Pgd => "pgd",
            AttackMode::Patch => "patch",
            AttackMode::AdaptivePgd => "adaptive-pgd",
            AttackMode::AdaptivePatch => "adaptive-patch",
        })
    }
}

/// Where the patch lands on the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Placement {
    FixedCenter,
    /// A fresh uniformly random in-bounds corner is drawn each iteration,
    /// standing in for the affine-transform expectation of the patch
    /// objective.
    RandomTranslation { seed: u64 },
}

/// Geometry of a square patch.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub side: usize,
    pub placement: Placement,
}

impl PatchSpec {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.side > image_size {
            return Err(Error::Attack(format!(
                "a patch of side {} cannot fit a {image_size} by {image_size} image",
                self.side
            )));
        }
        Ok(())
    }
}

/// Everything one attack run produces.
#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Adversarial inputs in preprocessed form, exactly what the model saw
    /// at the final evaluation.
    pub adv_rgb: Tensor,
    pub adv_depth: Tensor,
    /// Final perturbation per stream, `None` where the stream was not
    /// targeted. Full-image attacks store the additive delta; patch attacks
    /// store the patch content of shape `[3, side, side]`.
    pub delta_rgb: Option<Tensor>,
    pub delta_depth: Option<Tensor>,
    /// Top-left corner the patch occupied at the final evaluation.
    pub patch_origin: Option<(usize, usize)>,
    /// Loss at iterate t. Entry 0 is the starting point, the last entry is
    /// the returned perturbation; length `iterations + 1`.
    pub loss_trace: Vec<f32>,
    /// Largest absolute perturbation coordinate at iterate t, same indexing.
    pub linf_trace: Vec<f32>,
    /// Largest absolute deviation on coordinates the attack must not touch
    /// (untargeted streams, pixels outside the mask), same indexing.
    pub leak_trace: Vec<f32>,
    /// Model prediction on the clean input.
    pub clean_label: usize,
    /// Undefended model prediction on the adversarial input.
    pub adv_label: usize,
    /// Hard defended verdict on the final input when a detector was in the
    /// loop; `None` for defense-unaware runs.
    pub rejected: Option<bool>,
    /// Prediction differs from the true label, and additionally escaped
    /// rejection when a detector was in the loop.
    pub success: bool,
}

impl AttackResult {
    /// Largest absolute perturbation coordinate of the returned iterate.
    pub fn linf_norm(&self) -> f32 {
        self.linf_trace.last().copied().unwrap_or(0.0)
    }
}

/// Argmax over indices not in `excluded`, ties toward the lowest index.
fn competing_argmax(scores: &[f32], excluded: &[usize]) -> usize {
    let mut best: Option<usize> = None;
    for (j, v) in scores.iter().enumerate() {
        if excluded.contains(&j) {
            continue;
        }
        match best {
            Some(b) if scores[b] >= *v => {}
            _ => best = Some(j),
        }
    }
    best.expect("an excluded set smaller than the score vector")
}

/// Margin between the true class and its strongest competitor:
/// `s_y - max_{j != y} s_j`. Negative exactly when the input is
/// misclassified. The competitor index is chosen from the current values
/// and the result stays connected to `scores`, so the loss is
/// differentiable within one gradient step.
pub fn margin_loss(scores: &Tensor, y: usize) -> Result<Tensor> {
    if scores.rank() != 1 || scores.numel() < 2 {
        return Err(Error::BadShape {
            op: "margin_loss",
            detail: format!(
                "need a vector of at least two class scores, got shape {:?}",
                scores.shape()
            ),
        });
    }
    if y >= scores.numel() {
        return Err(Error::InvalidArgument(format!(
            "label {y} is outside the {} classes",
            scores.numel()
        )));
    }
    let runner_up = competing_argmax(scores.data(), &[y]);
    scores.at(y)?.sub(&scores.at(runner_up)?)
}

/// Componentwise projection onto the l-infinity ball of radius `eps`.
pub fn project_linf(delta: &[f32], eps: f32) -> Result<Vec<f32>> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "projection radius must be finite and nonnegative, got {eps}"
        )));
    }
    Ok(delta.iter().map(|v| v.clamp(-eps, eps)).collect())
}

/// Blend a placed patch into an image: `(1 - mask) * x + mask * delta`.
///
/// Where the mask is zero the result is bit-identical to `x` for every
/// value the preprocessing pipeline can produce (mean subtraction never
/// yields a negative zero, the one input this arithmetic would rewrite).
/// The gradient with respect to `delta` is the mask itself.
pub fn apply_patch(x: &Tensor, delta: &Tensor, mask: &Tensor) -> Result<Tensor> {
    for other in [delta, mask] {
        if x.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "apply_patch",
                left: x.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument(
            "patch mask elements must be exactly zero or one".into(),
        ));
    }
    let keep = Tensor::ones(x.shape().to_vec()).sub(mask)?;
    x.mul(&keep)?.add(&delta.mul(mask)?)
}

/// Scatter a `[3, side, side]` patch into a zero image of `image_size`,
/// with the patch's top-left corner at `origin` (row, column). Gradients
/// gather back out of the occupied square.
pub fn place_patch(patch: &Tensor, image_size: usize, origin: (usize, usize)) -> Result<Tensor> {
    let shape = patch.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::BadShape {
            op: "place_patch",
            detail: format!("patch must be [3, side, side], got {shape:?}"),
        });
    }
    let side = shape[1];
    let (r0, c0) = origin;
    if r0 + side > image_size || c0 + side > image_size {
        return Err(Error::Attack(format!(
            "a patch of side {side} at ({r0}, {c0}) leaves the {image_size} by {image_size} image"
        )));
    }

    let s = image_size;
    let mut data = vec![0.0f32; 3 * s * s];
    for ch in 0..3 {
        for r in 0..side {
            let src = ch * side * side + r * side;
            let dst = ch * s * s + (r0 + r) * s + c0;
            data[dst..dst + side].copy_from_slice(&patch.data()[src..src + side]);
        }
    }
    Ok(Tensor::from_node(
        vec![3, s, s],
        data,
        vec![patch.clone()],
        Box::new(move |g| {
            let mut grad = vec![0.0f32; 3 * side * side];
            for ch in 0..3 {
                for r in 0..side {
                    let src = ch * s * s + (r0 + r) * s + c0;
                    let dst = ch * side * side + r * side;
                    grad[dst..dst + side].copy_from_slice(&g[src..src + side]);
                }
            }
            vec![grad]
        }),
    ))
}

/// Binary mask that is one inside the square of `side` at `origin` on
/// every channel and zero elsewhere.
pub fn patch_mask(image_size: usize, side: usize, origin: (usize, usize)) -> Tensor {
    let s = image_size;
    let (r0, c0) = origin;
    let mut data = vec![0.0f32; 3 * s * s];
    for ch in 0..3 {
        for r in 0..side {
            let row = ch * s * s + (r0 + r) * s + c0;
            data[row..row + side].fill(1.0);
        }
    }
    Tensor::from_vec(vec![3, s, s], data).expect("mask shape matches its buffer")
}

/// Margin loss on the defended score vector S'. The rejection entry is the
/// soft score of Eq-style sigmoid form, built in-graph from the fused
/// feature, so gradients reach the input through the anomaly distance as
/// well as through the class scores. The centroid index is taken from the
/// current prediction and treated as a constant within the step.
pub(crate) fn defended_margin(
    record: &ForwardRecord,
    detector: &DetectorState,
    y: usize,
) -> Result<Tensor> {
    let scores = &record.scores;
    if scores.numel() < 2 {
        return Err(Error::BadShape {
            op: "defended_margin",
            detail: format!("need at least two class scores, got {:?}", scores.shape()),
        });
    }
    if y >= scores.numel() {
        return Err(Error::InvalidArgument(format!(
            "label {y} is outside the {} classes",
            scores.numel()
        )));
    }
    if detector.centroids.num_classes() != scores.numel()
        || detector.centroids.dim() != record.feature.numel()
    {
        return Err(Error::Detector(format!(
            "centroid store holds {} classes of dim {}, the record has {} scores and feature dim {}",
            detector.centroids.num_classes(),
            detector.centroids.dim(),
            scores.numel(),
            record.feature.numel()
        )));
    }

    let gamma = argmax(scores.data());
    let centroid = Tensor::from_vec(
        vec![detector.centroids.dim()],
        detector.centroids.class(gamma).to_vec(),
    )?;
    let diff = record.feature.sub(&centroid)?;
    // Floor the squared distance so the square root stays differentiable
    // when the feature sits exactly on the centroid.
    let anomaly = diff.mul(&diff)?.sum().max_scalar(1e-24).sqrt();
    let s_reject = anomaly
        .add_scalar(-(detector.beta as f32))
        .mul_scalar(detector.lambda)
        .sigmoid();
    let keep = s_reject.neg().add_scalar(1.0);
    let scaled = scores.mul(&keep)?;
    // The rejection entry itself is excluded from the competitor search, so
    // the competitor comes from the c rescaled class entries.
    let runner_up = competing_argmax(scaled.data(), &[y]);
    scaled.at(y)?.sub(&scaled.at(runner_up)?)
}

/// Defense-aware attack loss on one input: the margin computed on the
/// defended score vector, differentiable down to the image.
pub fn adaptive_loss(
    net: &FusionNet,
    detector: &DetectorState,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    y: usize,
) -> Result<Tensor> {
    detector.validate()?;
    let record = net.bind(false).forward(x_rgb, x_depth)?;
    defended_margin(&record, detector, y)
}
