//! Security-evaluation curves and the adversarial-training baseline.
//!
//! A security curve sweeps an attack budget from zero upward and records,
//! at each level, how the classifier behaves with and without the rejection
//! defense. The counting rules differ between the clean level and the
//! attacked levels, and getting them right matters more than it looks:
//!
//! * Undefended accuracy is always the fraction of samples whose plain
//!   argmax matches the true label.
//! * At level 0 the defense can only hurt: a clean sample counts for
//!   defended accuracy when it is classified correctly AND not rejected.
//! * At levels above 0 the defense can only help: an attacked sample counts
//!   when it is rejected OR still classified correctly.
//! * The rejection rate is the rejected fraction at every level.
//!
//! A consequence worth keeping in mind when reading curves: at attacked
//! levels, defended accuracy minus rejection rate equals the fraction of
//! samples that were not rejected yet still classified correctly.
//!
//! Attacks are generated per sample with a seed derived from the global
//! seed and the sample id, so evaluation order cannot change a curve.
//!
//! The same module holds adversarial training, the standard robustness
//! baseline the defense is compared against: each batch is augmented with
//! correctly labeled adversarial examples crafted against the current
//! weights, at an epsilon drawn per batch from a configured set.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attack::{
    adaptive_patch_attack, adaptive_pgd_attack, patch_attack, pgd_attack, AttackBudget,
    AttackMode, EpsScale, PatchSpec, Placement, TargetParts,
};
use crate::dataset::{ChannelStats, Dataset};
use crate::detector::{defended_predict, diagnose, DetectorState, RejectMode};
use crate::error::{Error, Result};
use crate::model::{
    apply_update, argmax, mean_loss, FusionNet, OptState, TrainConfig, TrainReport,
};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::{cross_entropy, Tensor};

/// What one evaluated sample contributed to a curve point.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub id: String,
    pub true_label: usize,
    /// Plain argmax of the network on the (possibly attacked) input.
    pub undefended_label: usize,
    /// Hard-rejection verdict of the detector; false when no detector ran.
    pub rejected: bool,
}

/// Which budget a curve sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveAxis {
    Epsilon,
    PatchSide,
}

impl std::fmt::Display for CurveAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveAxis::Epsilon => write!(f, "epsilon"),
            CurveAxis::PatchSide => write!(f, "patch_side"),
        }
    }
}

/// Patch placement policy for a whole curve. The per-sample translation
/// seed is derived from the curve seed and the sample id, so the concrete
/// [`Placement`] is built per sample rather than stored here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvePlacement {
    FixedCenter,
    RandomTranslation,
}

impl std::fmt::Display for CurvePlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurvePlacement::FixedCenter => write!(f, "fixed-center"),
            CurvePlacement::RandomTranslation => write!(f, "random-translation"),
        }
    }
}

impl FromStr for CurvePlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<CurvePlacement> {
        match s {
            "fixed-center" => Ok(CurvePlacement::FixedCenter),
            "random-translation" => Ok(CurvePlacement::RandomTranslation),
            other => Err(Error::InvalidArgument(format!(
                "unknown placement {other:?}; expected fixed-center or random-translation"
            ))),
        }
    }
}

/// Everything evaluate_curve needs besides the model, data and seed.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CurveSpec {
    pub mode: AttackMode,
    /// Budget levels: epsilons for full-image modes, patch sides in pixels
    /// for patch modes. The first level must be 0 (the clean baseline) and
    /// the rest strictly increasing.
    pub levels: Vec<f32>,
    pub steps: usize,
    /// PGD step size as a fraction of the active epsilon.
    pub step_fraction: f32,
    /// Patch content bound; used only on the patch axis, where the swept
    /// level is the side and the content epsilon stays fixed.
    pub patch_epsilon: f32,
    pub target_parts: TargetParts,
    pub eps_scale: EpsScale,
    pub placement: CurvePlacement,
}

impl CurveSpec {
    /// Full-image sweep defaults. The step budget is sized so that the
    /// largest standard epsilon saturates; fewer steps understate the
    /// attack and make every defense look better than it is.
    pub fn epsilon_sweep(mode: AttackMode, levels: Vec<f32>) -> CurveSpec {
        CurveSpec {
            mode,
            levels,
            steps: 100,
            step_fraction: 0.25,
            patch_epsilon: 1.0,
            target_parts: TargetParts::Both,
            eps_scale: EpsScale::Unit,
            placement: CurvePlacement::FixedCenter,
        }
    }

    /// Patch sweep defaults: sides in pixels, content free inside the valid
    /// pixel range.
    pub fn patch_sweep(mode: AttackMode, levels: Vec<f32>) -> CurveSpec {
        CurveSpec {
            mode,
            levels,
            steps: 100,
            step_fraction: 0.25,
            patch_epsilon: 1.0,
            target_parts: TargetParts::Rgb,
            eps_scale: EpsScale::Unit,
            placement: CurvePlacement::FixedCenter,
        }
    }

    pub fn axis(&self) -> CurveAxis {
        if self.mode.is_patch() {
            CurveAxis::PatchSide
        } else {
            CurveAxis::Epsilon
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("a curve needs at least one level".into()));
        }
        if self.levels[0] != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "the first curve level must be 0 (the clean baseline), got {}",
                self.levels[0]
            )));
        }
        if !self.levels.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFinite {
                context: "curve levels".into(),
            });
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "curve levels must be strictly increasing, got {:?}",
                self.levels
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("a curve needs at least one attack step".into()));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step fraction must be positive and finite, got {}",
                self.step_fraction
            )));
        }
        if self.axis() == CurveAxis::PatchSide {
            if self.target_parts != TargetParts::Rgb {
                return Err(Error::Attack(format!(
                    "patch attacks target the rgb stream only, got target parts {}",
                    self.target_parts
                )));
            }
            if !(self.patch_epsilon > 0.0 && self.patch_epsilon.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "patch content epsilon must be positive and finite, got {}",
                    self.patch_epsilon
                )));
            }
            for &level in &self.levels {
                if level.fract() != 0.0 || level < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "patch sides must be whole pixel counts, got {level}"
                    )));
                }
                if level as usize > image_size {
                    return Err(Error::InvalidArgument(format!(
                        "patch side {level} exceeds the {image_size}x{image_size} image"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One aggregated level of a security curve.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurvePoint {
    pub level: f32,
    pub accuracy_undefended: f32,
    pub accuracy_defended: f32,
    pub rejection_rate: f32,
    pub n_samples: usize,
}

/// A full evaluated curve, with the configuration that produced it.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SecurityCurve {
    pub axis: CurveAxis,
    pub spec: CurveSpec,
    pub seed: u64,
    /// Whether a detector supplied the defended columns. Without one no
    /// sample is rejected and the defended columns equal the undefended
    /// ones.
    pub defended: bool,
    pub points: Vec<CurvePoint>,
}

/// Collapse per-sample outcomes into one curve point using the counting
/// rules described in the module docs. `clean` selects the level-0 rule.
pub fn aggregate_outcomes(level: f32, outcomes: &[SampleOutcome], clean: bool) -> Result<CurvePoint> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty set of outcomes".into(),
        ));
    }
    let n = outcomes.len();
    let mut correct = 0usize;
    let mut rejected = 0usize;
    let mut defended = 0usize;
    for o in outcomes {
        let is_correct = o.undefended_label == o.true_label;
        if is_correct {
            correct += 1;
        }
        if o.rejected {
            rejected += 1;
        }
        let counts = if clean {
            is_correct && !o.rejected
        } else {
            o.rejected || is_correct
        };
        if counts {
            defended += 1;
        }
    }
    Ok(CurvePoint {
        level,
        accuracy_undefended: correct as f32 / n as f32,
        accuracy_defended: defended as f32 / n as f32,
        rejection_rate: rejected as f32 / n as f32,
        n_samples: n,
    })
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// The seed governing one sample's attack, derived from the run seed and
/// the sample id. Evaluation order and worker count cannot change it.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, fnv1a64(id))
}

/// Evaluate a security curve over a test split.
///
/// Every sample at every nonzero level gets a fresh attack starting from
/// its clean input. Rejection verdicts use hard thresholding; for adaptive
/// modes the attack itself already measured the verdict against the same
/// detector, and that verdict is reused rather than recomputed.
pub fn evaluate_curve(
    net: &FusionNet,
    detector: Option<&DetectorState>,
    data: &Dataset,
    stats: &ChannelStats,
    spec: &CurveSpec,
    seed: u64,
) -> Result<SecurityCurve> {
    spec.validate(data.image_size)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate a curve on an empty split".into()));
    }
    if spec.mode.is_adaptive() && detector.is_none() {
        return Err(Error::Attack(format!(
            "attack mode {} optimizes against the detector and needs one",
            spec.mode
        )));
    }

    let mut points = Vec::with_capacity(spec.levels.len());
    for &level in &spec.levels {
        let mut outcomes = Vec::with_capacity(data.len());
        for sample in &data.samples {
            let (x_rgb, x_depth) = sample.preprocess(stats)?;
            let outcome = if level == 0.0 {
                clean_outcome(net, detector, sample.id.clone(), sample.label, &x_rgb, &x_depth)?
            } else {
                attacked_outcome(
                    net, detector, stats, spec, seed, level, sample.id.clone(), sample.label,
                    &x_rgb, &x_depth,
                )?
            };
            outcomes.push(outcome);
        }
        points.push(aggregate_outcomes(level, &outcomes, level == 0.0)?);
    }

    Ok(SecurityCurve {
        axis: spec.axis(),
        spec: spec.clone(),
        seed,
        defended: detector.is_some(),
        points,
    })
}

fn clean_outcome(
    net: &FusionNet,
    detector: Option<&DetectorState>,
    id: String,
    true_label: usize,
    x_rgb: &Tensor,
    x_depth: &Tensor,
) -> Result<SampleOutcome> {
    match detector {
        // One forward pass serves both columns; the threshold comparison is
        // the same rule RejectMode::Hard applies.
        Some(det) => {
            let diag = diagnose(net, &det.centroids, x_rgb, x_depth)?;
            Ok(SampleOutcome {
                id,
                true_label,
                undefended_label: diag.predicted,
                rejected: f64::from(diag.anomaly) > det.beta,
            })
        }
        None => {
            let (label, _) = net.predict(x_rgb, x_depth)?;
            Ok(SampleOutcome {
                id,
                true_label,
                undefended_label: label,
                rejected: false,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attacked_outcome(
    net: &FusionNet,
    detector: Option<&DetectorState>,
    stats: &ChannelStats,
    spec: &CurveSpec,
    seed: u64,
    level: f32,
    id: String,
    true_label: usize,
    x_rgb: &Tensor,
    x_depth: &Tensor,
) -> Result<SampleOutcome> {
    let epsilon = match spec.axis() {
        CurveAxis::Epsilon => level,
        CurveAxis::PatchSide => spec.patch_epsilon,
    };
    let budget = AttackBudget {
        epsilon,
        step_size: spec.step_fraction * epsilon,
        iterations: spec.steps,
        target_parts: spec.target_parts,
        eps_scale: spec.eps_scale,
    };
    let result = match spec.mode {
        AttackMode::Pgd => pgd_attack(net, stats, x_rgb, x_depth, true_label, &budget)?,
        AttackMode::AdaptivePgd => {
            let det = detector.expect("validated above");
            adaptive_pgd_attack(net, det, stats, x_rgb, x_depth, true_label, &budget)?
        }
        AttackMode::Patch | AttackMode::AdaptivePatch => {
            let placement = match spec.placement {
                CurvePlacement::FixedCenter => Placement::FixedCenter,
                CurvePlacement::RandomTranslation => Placement::RandomTranslation {
                    seed: sample_seed(seed, &id),
                },
            };
            let patch = PatchSpec {
                side: level as usize,
                placement,
            };
            match spec.mode {
                AttackMode::Patch => {
                    patch_attack(net, stats, x_rgb, x_depth, true_label, &patch, &budget)?
                }
                _ => {
                    let det = detector.expect("validated above");
                    adaptive_patch_attack(
                        net, det, stats, x_rgb, x_depth, true_label, &patch, &budget,
                    )?
                }
            }
        }
    };
    let rejected = match detector {
        None => false,
        Some(det) => match result.rejected {
            // Adaptive attacks already measured the verdict with this
            // detector during their closing evaluation.
            Some(r) => r,
            None => {
                defended_predict(net, det, &result.adv_rgb, &result.adv_depth, RejectMode::Hard)?
                    .rejected
            }
        },
    };
    Ok(SampleOutcome {
        id,
        true_label,
        undefended_label: result.adv_label,
        rejected,
    })
}

/// Configuration of the adversarial-training baseline.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdvTrainConfig {
    /// Candidate epsilons; one is drawn uniformly per batch. A drawn zero
    /// trains that batch clean.
    pub epsilons: Vec<f32>,
    /// PGD steps per crafted example.
    pub steps: usize,
    /// PGD step size as a fraction of the drawn epsilon.
    pub step_fraction: f32,
    /// Weight of the adversarial loss term in [0, 1]; 0.5 weighs each clean
    /// sample and its adversarial copy equally, the augmented-dataset
    /// reading.
    pub adversarial_fraction: f32,
    /// Craft adversarial examples from the current weights every epoch
    /// (true) or once from the initial weights (false).
    pub regenerate: bool,
    pub target_parts: TargetParts,
    pub eps_scale: EpsScale,
}

impl AdvTrainConfig {
    /// Desk-scale defaults: single-epsilon augmentation, equal mixing.
    pub fn toy(epsilon: f32) -> AdvTrainConfig {
        AdvTrainConfig {
            epsilons: vec![epsilon],
            steps: 10,
            step_fraction: 0.25,
            adversarial_fraction: 0.5,
            regenerate: true,
            target_parts: TargetParts::Both,
            eps_scale: EpsScale::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::InvalidArgument(
                "adversarial training needs a nonempty epsilon set".into(),
            ));
        }
        if !self.epsilons.iter().all(|e| e.is_finite() && *e >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "augmentation epsilons must be finite and nonnegative, got {:?}",
                self.epsilons
            )));
        }
        if self.epsilons.iter().any(|&e| e > 0.0) && self.steps == 0 {
            return Err(Error::InvalidArgument(
                "augmentation with a positive epsilon needs at least one attack step".into(),
            ));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step fraction must be positive and finite, got {}",
                self.step_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.adversarial_fraction) {
            return Err(Error::InvalidArgument(format!(
                "adversarial fraction must lie in [0, 1], got {}",
                self.adversarial_fraction
            )));
        }
        Ok(())
    }
}

fn augmentation_budget(adv: &AdvTrainConfig, epsilon: f32) -> AttackBudget {
    AttackBudget {
        epsilon,
        step_size: adv.step_fraction * epsilon,
        iterations: adv.steps,
        target_parts: adv.target_parts,
        eps_scale: adv.eps_scale,
    }
}

/// Adversarial training: the ordinary loop with each batch's loss mixed
/// between clean samples and correctly labeled adversarial copies.
///
/// The batch schedule (shuffle stream, optimizer, divergence checks) is
/// identical to [`crate::model::train`]; when no batch is ever augmented,
/// because every epsilon is zero or the adversarial fraction is zero, the
/// arithmetic reduces to ordinary training exactly, not just approximately.
pub fn adversarial_train(
    net: &mut FusionNet,
    data: &Dataset,
    stats: &ChannelStats,
    adv: &AdvTrainConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    adv.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Model("cannot train on an empty split".into()));
    }

    let prepared: Vec<(Tensor, Tensor, usize)> = data
        .samples
        .iter()
        .map(|s| {
            let (x_rgb, x_depth) = s.preprocess(stats)?;
            Ok((x_rgb, x_depth, s.label))
        })
        .collect::<Result<_>>()?;

    let initial_loss = mean_loss(net, &prepared)?;
    if !initial_loss.is_finite() {
        return Err(Error::Model(format!(
            "initial loss is {initial_loss}; the weights are unusable"
        )));
    }

    let augmenting =
        adv.adversarial_fraction > 0.0 && adv.epsilons.iter().any(|&e| e > 0.0);

    // Fixed-set mode: craft one adversarial copy per sample from the
    // initial weights, drawing each sample's epsilon from the set. A drawn
    // zero keeps the clean tensors, bitwise.
    let fixed_adv: Option<Vec<(Tensor, Tensor, usize)>> = if augmenting && !adv.regenerate {
        let mut rng = seeded_rng(derive_seed(cfg.seed, 0xADE0));
        let mut out = Vec::with_capacity(prepared.len());
        for (x_rgb, x_depth, label) in &prepared {
            let epsilon = adv.epsilons[rng.random_range(0..adv.epsilons.len())];
            if epsilon == 0.0 {
                out.push((x_rgb.clone(), x_depth.clone(), *label));
            } else {
                let crafted = pgd_attack(
                    net, stats, x_rgb, x_depth, *label, &augmentation_budget(adv, epsilon),
                )?;
                out.push((crafted.adv_rgb, crafted.adv_depth, *label));
            }
        }
        Some(out)
    } else {
        None
    };

    let mut states = OptState::for_net(net);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut seeded_rng(derive_seed(cfg.seed, 0xE90C + epoch as u64)));
        // The epsilon draws live on their own stream so that augmentation
        // cannot perturb the batch schedule.
        let mut eps_rng = seeded_rng(derive_seed(cfg.seed, 0xADE0 + epoch as u64));

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            // Craft before binding the tracked tape; attacks bind their own.
            let adv_batch: Option<Vec<(Tensor, Tensor, usize)>> = if !augmenting {
                None
            } else if let Some(fixed) = &fixed_adv {
                Some(chunk.iter().map(|&i| fixed[i].clone()).collect())
            } else {
                let epsilon = adv.epsilons[eps_rng.random_range(0..adv.epsilons.len())];
                if epsilon == 0.0 {
                    None
                } else {
                    let budget = augmentation_budget(adv, epsilon);
                    let mut crafted = Vec::with_capacity(chunk.len());
                    for &idx in chunk {
                        let (x_rgb, x_depth, label) = &prepared[idx];
                        let result =
                            pgd_attack(net, stats, x_rgb, x_depth, *label, &budget)?;
                        crafted.push((result.adv_rgb, result.adv_depth, *label));
                    }
                    Some(crafted)
                }
            };

            let tape = net.bind(true);
            let mut clean_total: Option<Tensor> = None;
            for &idx in chunk {
                let (x_rgb, x_depth, label) = &prepared[idx];
                let record = tape.forward(x_rgb, x_depth)?;
                let loss = cross_entropy(&record.scores, *label)?;
                clean_total = Some(match clean_total {
                    Some(t) => t.add(&loss)?,
                    None => loss,
                });
            }
            let clean_total = clean_total.expect("chunks are nonempty");
            let batch_loss = match &adv_batch {
                None => clean_total.mul_scalar(1.0 / chunk.len() as f32),
                Some(copies) => {
                    let mut adv_total: Option<Tensor> = None;
                    for (x_rgb, x_depth, label) in copies {
                        let record = tape.forward(x_rgb, x_depth)?;
                        let loss = cross_entropy(&record.scores, *label)?;
                        adv_total = Some(match adv_total {
                            Some(t) => t.add(&loss)?,
                            None => loss,
                        });
                    }
                    let f = adv.adversarial_fraction;
                    clean_total.mul_scalar((1.0 - f) / chunk.len() as f32).add(
                        &adv_total
                            .expect("adversarial copies are nonempty")
                            .mul_scalar(f / chunk.len() as f32),
                    )?
                }
            };
            let loss_value = batch_loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::Model(format!(
                    "adversarial training diverged at epoch {epoch}: batch loss \
                     {loss_value}; lower the learning rate"
                )));
            }
            loss_sum += f64::from(loss_value) * chunk.len() as f64;
            batch_loss.backward()?;
            let grads = tape.grads();
            apply_update(net, &mut states, &grads, cfg);
        }
        epoch_losses.push((loss_sum / prepared.len() as f64) as f32);
    }

    let mut correct = 0usize;
    for (x_rgb, x_depth, label) in &prepared {
        let record = net.forward(x_rgb, x_depth)?;
        if argmax(record.scores.data()) == *label {
            correct += 1;
        }
    }

    Ok(TrainReport {
        initial_loss,
        epoch_losses,
        final_loss: mean_loss(net, &prepared)?,
        final_train_accuracy: correct as f32 / prepared.len() as f32,
    })
}

/// Serialization format for curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveFormat {
    Csv,
    Json,
}

impl std::fmt::Display for CurveFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveFormat::Csv => write!(f, "csv"),
            CurveFormat::Json => write!(f, "json"),
        }
    }
}

impl FromStr for CurveFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<CurveFormat> {
        match s {
            "csv" => Ok(CurveFormat::Csv),
            "json" => Ok(CurveFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown curve format {other:?}; expected csv or json"
            ))),
        }
    }
}

/// Fixed CSV header; downstream tooling matches it byte for byte.
pub const CURVE_CSV_HEADER: &str = "level,acc_undef,acc_def,rej_rate,n";

/// Render curve points as CSV. Floats use the shortest decimal form that
/// round-trips, so emit, parse and emit again is byte-stable.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.level, p.accuracy_undefended, p.accuracy_defended, p.rejection_rate, p.n_samples
        ));
    }
    out
}

/// Parse the output of [`curve_csv`] back into points.
pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CURVE_CSV_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "curve csv must start with {CURVE_CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "curve csv row {} has {} fields, expected 5",
                i + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f32> {
            s.parse::<f32>().map_err(|_| {
                Error::InvalidArgument(format!("curve csv row {}: bad number {s:?}", i + 1))
            })
        };
        points.push(CurvePoint {
            level: num(fields[0])?,
            accuracy_undefended: num(fields[1])?,
            accuracy_defended: num(fields[2])?,
            rejection_rate: num(fields[3])?,
            n_samples: fields[4].parse::<usize>().map_err(|_| {
                Error::InvalidArgument(format!(
                    "curve csv row {}: bad sample count {:?}",
                    i + 1,
                    fields[4]
                ))
            })?,
        });
    }
    Ok(points)
}

/// Write a curve to disk. CSV keeps only the points; JSON keeps the whole
/// curve including its configuration echo.
pub fn write_curve(path: &Path, curve: &SecurityCurve, format: CurveFormat) -> Result<()> {
    let body = match format {
        CurveFormat::Csv => curve_csv(&curve.points),
        CurveFormat::Json => {
            let mut s = serde_json::to_string_pretty(curve)
                .map_err(|e| Error::Numerical(format!("cannot encode curve: {e}")))?;
            s.push('\n');
            s
        }
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Read back a JSON curve written by [`write_curve`].
pub fn read_curve_json(path: &Path) -> Result<SecurityCurve> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::format(path, format!("invalid curve: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DatasetSpec, TexturePolicy};
    use crate::detector::{calibrate, CalibrationConfig};
    use crate::model::{train, Arch, Variant};

    fn tiny_data() -> (Dataset, Dataset, ChannelStats) {
        let spec = DatasetSpec {
            num_classes: 3,
            train_per_class: 8,
            test_per_class: 2,
            image_size: 16,
            texture_policy: TexturePolicy::Distinct,
            depth_noise_std: 0.0,
            seed: 5,
        };
        let (train_split, test_split) = generate(&spec).unwrap();
        let stats = ChannelStats::fit(&train_split).unwrap();
        (train_split, test_split, stats)
    }

    fn tiny_arch() -> Arch {
        Arch {
            stage_channels: vec![4, 8],
            q: 4,
            p: 8,
            a: 6,
            c: 3,
            image_size: 16,
        }
    }

    fn tiny_net(seed: u64) -> FusionNet {
        FusionNet::new(Variant::Rgbd, tiny_arch(), seed).unwrap()
    }

    fn outcome(true_label: usize, undefended: usize, rejected: bool) -> SampleOutcome {
        SampleOutcome {
            id: format!("s{true_label}_{undefended}_{rejected}"),
            true_label,
            undefended_label: undefended,
            rejected,
        }
    }

    #[test]
    fn counting_rules_match_hand_counts_for_every_combination() {
        // Each (correct, rejected) combination appears twice, n = 8, so
        // every rate is an exact eighth.
        let outcomes = vec![
            outcome(0, 0, false),
            outcome(0, 0, false),
            outcome(0, 0, true),
            outcome(0, 0, true),
            outcome(0, 1, false),
            outcome(0, 1, false),
            outcome(0, 1, true),
            outcome(0, 1, true),
        ];
        let clean = aggregate_outcomes(0.0, &outcomes, true).unwrap();
        assert_eq!(clean.accuracy_undefended, 4.0 / 8.0);
        assert_eq!(clean.accuracy_defended, 2.0 / 8.0, "correct and accepted only");
        assert_eq!(clean.rejection_rate, 4.0 / 8.0);
        assert_eq!(clean.n_samples, 8);

        let attacked = aggregate_outcomes(0.1, &outcomes, false).unwrap();
        assert_eq!(attacked.accuracy_undefended, 4.0 / 8.0);
        assert_eq!(attacked.accuracy_defended, 6.0 / 8.0, "rejected or correct");
        assert_eq!(attacked.rejection_rate, 4.0 / 8.0);
    }

    #[test]
    fn defended_accuracy_decomposes_into_rejections_plus_survivors() {
        let mut rng = seeded_rng(17);
        let outcomes: Vec<SampleOutcome> = (0..37)
            .map(|i| {
                SampleOutcome {
                    id: format!("s{i}"),
                    true_label: rng.random_range(0..3),
                    undefended_label: rng.random_range(0..3),
                    rejected: rng.random_range(0..2) == 1,
                }
            })
            .collect();
        let p = aggregate_outcomes(0.2, &outcomes, false).unwrap();
        let survivors = outcomes
            .iter()
            .filter(|o| !o.rejected && o.undefended_label == o.true_label)
            .count() as f32
            / outcomes.len() as f32;
        assert!(
            (p.accuracy_defended - p.rejection_rate - survivors).abs() < 1e-6,
            "{} - {} vs {survivors}",
            p.accuracy_defended,
            p.rejection_rate
        );

        let clean = aggregate_outcomes(0.0, &outcomes, true).unwrap();
        assert!((clean.accuracy_defended - survivors).abs() < 1e-6);
    }

    #[test]
    fn aggregation_rejects_an_empty_outcome_set() {
        assert!(aggregate_outcomes(0.0, &[], true).is_err());
    }

    #[test]
    fn curve_specs_validate_their_levels() {
        let base = CurveSpec::epsilon_sweep(AttackMode::Pgd, vec![0.0, 0.1]);
        assert!(base.validate(16).is_ok());

        let mut s = base.clone();
        s.levels = vec![0.1, 0.2];
        assert!(s.validate(16).is_err(), "first level must be zero");
        s.levels = vec![0.0, 0.2, 0.1];
        assert!(s.validate(16).is_err(), "levels must increase");
        s.levels = vec![0.0, 0.1, 0.1];
        assert!(s.validate(16).is_err(), "levels must increase strictly");
        s.levels = vec![0.0, f32::NAN];
        assert!(s.validate(16).is_err());
        s.levels = vec![];
        assert!(s.validate(16).is_err());

        let mut p = CurveSpec::patch_sweep(AttackMode::Patch, vec![0.0, 4.0]);
        assert!(p.validate(16).is_ok());
        p.levels = vec![0.0, 2.5];
        assert!(p.validate(16).is_err(), "patch sides are whole pixels");
        p.levels = vec![0.0, 20.0];
        assert!(p.validate(16).is_err(), "patch cannot exceed the image");
        p.levels = vec![0.0, 4.0];
        p.target_parts = TargetParts::Both;
        assert!(p.validate(16).is_err(), "patches are rgb-only");
    }

    #[test]
    fn adaptive_curves_need_a_detector() {
        let net = tiny_net(7);
        let (_, test_split, stats) = tiny_data();
        let spec = CurveSpec::epsilon_sweep(AttackMode::AdaptivePgd, vec![0.0, 0.1]);
        let err = evaluate_curve(&net, None, &test_split, &stats, &spec, 0).unwrap_err();
        assert!(err.to_string().contains("detector"), "{err}");
    }

    #[test]
    fn empty_split_is_rejected() {
        let net = tiny_net(7);
        let (_, test_split, stats) = tiny_data();
        let empty = Dataset {
            samples: Vec::new(),
            ..test_split
        };
        let spec = CurveSpec::epsilon_sweep(AttackMode::Pgd, vec![0.0]);
        assert!(evaluate_curve(&net, None, &empty, &stats, &spec, 0).is_err());
    }

    #[test]
    fn clean_level_without_detector_matches_plain_accuracy() {
        let net = tiny_net(7);
        let (_, test_split, stats) = tiny_data();
        let spec = CurveSpec::epsilon_sweep(AttackMode::Pgd, vec![0.0]);
        let curve = evaluate_curve(&net, None, &test_split, &stats, &spec, 0).unwrap();
        let p = curve.points[0];

        let mut correct = 0usize;
        for s in &test_split.samples {
            let (x_rgb, x_depth) = s.preprocess(&stats).unwrap();
            if net.predict(&x_rgb, &x_depth).unwrap().0 == s.label {
                correct += 1;
            }
        }
        let plain = correct as f32 / test_split.len() as f32;
        assert_eq!(p.accuracy_undefended, plain);
        assert_eq!(p.accuracy_defended, plain);
        assert_eq!(p.rejection_rate, 0.0);
        assert!(!curve.defended);
    }

    #[test]
    fn clean_level_with_detector_obeys_the_rejection_budget() {
        let net = tiny_net(7);
        let (train_split, _, stats) = tiny_data();
        let cfg = CalibrationConfig::default();
        let detector = calibrate(&net, &train_split, &train_split, &stats, &cfg).unwrap();

        // Evaluated on the calibration scores themselves, the hard-rejection
        // rate is bounded by the target by construction.
        let spec = CurveSpec::epsilon_sweep(AttackMode::Pgd, vec![0.0]);
        let curve =
            evaluate_curve(&net, Some(&detector), &train_split, &stats, &spec, 0).unwrap();
        let p = curve.points[0];
        assert!(
            f64::from(p.rejection_rate) <= cfg.fpr_target + 1e-9,
            "rejection rate {} exceeds the calibrated budget {}",
            p.rejection_rate,
            cfg.fpr_target
        );
        assert!(
            p.accuracy_undefended - p.accuracy_defended <= p.rejection_rate + 1e-6,
            "clean accuracy loss {} cannot exceed the rejection rate {}",
            p.accuracy_undefended - p.accuracy_defended,
            p.rejection_rate
        );
        assert!(curve.defended);
    }

    #[test]
    fn a_strong_attack_collapses_undefended_accuracy() {
        let (train_split, test_split, stats) = tiny_data();
        let mut net = tiny_net(0);
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 4,
            ..TrainConfig::toy(0)
        };
        train(&mut net, &train_split, &stats, &cfg).unwrap();

        let mut spec = CurveSpec::epsilon_sweep(AttackMode::Pgd, vec![0.0, 0.5]);
        spec.steps = 100;
        spec.step_fraction = 0.25;
        let curve = evaluate_curve(&net, None, &test_split, &stats, &spec, 0).unwrap();
        let clean = curve.points[0];
        let hit = curve.points[1];
        assert!(
            clean.accuracy_undefended >= 0.5,
            "the tiny model failed to learn: clean accuracy {}",
            clean.accuracy_undefended
        );
        assert!(
            hit.accuracy_undefended <= 0.34,
            "epsilon 0.5 left accuracy at {}",
            hit.accuracy_undefended
        );
    }

    #[test]
    fn curves_are_deterministic_and_order_independent() {
        let net = tiny_net(7);
        let (_, test_split, stats) = tiny_data();
        let mut spec = CurveSpec::patch_sweep(AttackMode::Patch, vec![0.0, 3.0]);
        spec.steps = 2;
        spec.placement = CurvePlacement::RandomTranslation;

        let a = evaluate_curve(&net, None, &test_split, &stats, &spec, 9).unwrap();
        let b = evaluate_curve(&net, None, &test_split, &stats, &spec, 9).unwrap();
        assert_eq!(a.points, b.points);

        let mut reversed = test_split.clone();
        reversed.samples.reverse();
        let c = evaluate_curve(&net, None, &reversed, &stats, &spec, 9).unwrap();
        assert_eq!(a.points, c.points, "per-sample seeds make order irrelevant");
        assert_eq!(a.axis, CurveAxis::PatchSide);
    }

    #[test]
    fn adversarial_training_with_zero_epsilon_is_plain_training() {
        let (train_split, _, stats) = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::toy(0)
        };

        let mut plain = tiny_net(3);
        train(&mut plain, &train_split, &stats, &cfg).unwrap();

        let mut adv_cfg = AdvTrainConfig::toy(0.0);
        adv_cfg.steps = 2;
        let mut robust = tiny_net(3);
        adversarial_train(&mut robust, &train_split, &stats, &adv_cfg, &cfg).unwrap();

        let mut plain_bits = Vec::new();
        plain.for_each_param(|_, p| plain_bits.extend(p.data.iter().map(|v| v.to_bits())));
        let mut robust_bits = Vec::new();
        robust.for_each_param(|_, p| robust_bits.extend(p.data.iter().map(|v| v.to_bits())));
        assert_eq!(plain_bits, robust_bits);
    }

    #[test]
    fn adversarial_training_is_deterministic() {
        let (train_split, _, stats) = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::toy(0)
        };
        let mut adv_cfg = AdvTrainConfig::toy(0.05);
        adv_cfg.steps = 2;

        let run = || {
            let mut net = tiny_net(3);
            adversarial_train(&mut net, &train_split, &stats, &adv_cfg, &cfg).unwrap();
            let mut bits = Vec::new();
            net.for_each_param(|_, p| bits.extend(p.data.iter().map(|v| v.to_bits())));
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adversarial_training_accepts_a_fixed_augmentation_set() {
        let (train_split, _, stats) = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::toy(0)
        };
        let mut adv_cfg = AdvTrainConfig::toy(0.05);
        adv_cfg.steps = 2;
        adv_cfg.regenerate = false;
        let mut net = tiny_net(3);
        let report = adversarial_train(&mut net, &train_split, &stats, &adv_cfg, &cfg).unwrap();
        assert!(report.final_loss.is_finite());
        assert_eq!(report.epoch_losses.len(), 1);
    }

    #[test]
    fn adversarial_training_validates_its_config() {
        let ok = AdvTrainConfig::toy(0.1);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.epsilons = vec![];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.epsilons = vec![-0.1];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.epsilons = vec![f32::NAN];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.steps = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.adversarial_fraction = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.step_fraction = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_emission_is_idempotent_under_a_fixed_header() {
        let points = vec![
            CurvePoint {
                level: 0.0,
                accuracy_undefended: 11.0 / 12.0,
                accuracy_defended: 10.0 / 12.0,
                rejection_rate: 1.0 / 12.0,
                n_samples: 12,
            },
            CurvePoint {
                level: 0.1,
                accuracy_undefended: 1.0 / 3.0,
                accuracy_defended: 2.0 / 3.0,
                rejection_rate: 0.5,
                n_samples: 12,
            },
        ];
        let first = curve_csv(&points);
        assert!(first.starts_with("level,acc_undef,acc_def,rej_rate,n\n"));
        let reparsed = parse_curve_csv(&first).unwrap();
        assert_eq!(reparsed, points);
        let second = curve_csv(&reparsed);
        assert_eq!(first, second);
    }

    #[test]
    fn csv_parsing_rejects_malformed_input() {
        assert!(parse_curve_csv("").is_err());
        assert!(parse_curve_csv("level,acc,n\n").is_err());
        assert!(parse_curve_csv("level,acc_undef,acc_def,rej_rate,n\n1,2,3\n").is_err());
        assert!(parse_curve_csv("level,acc_undef,acc_def,rej_rate,n\n0,x,0,0,4\n").is_err());
        assert!(parse_curve_csv("level,acc_undef,acc_def,rej_rate,n\n0,0,0,0,4.5\n").is_err());
    }

    #[test]
    fn json_round_trip_preserves_every_field() {
        let net = tiny_net(7);
        let (_, test_split, stats) = tiny_data();
        let mut spec = CurveSpec::epsilon_sweep(AttackMode::Pgd, vec![0.0, 0.1]);
        spec.steps = 2;
        let curve = evaluate_curve(&net, None, &test_split, &stats, &spec, 4).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.json");
        write_curve(&path, &curve, CurveFormat::Json).unwrap();
        let back = read_curve_json(&path).unwrap();
        assert_eq!(back.points, curve.points);
        assert_eq!(back.axis, curve.axis);
        assert_eq!(back.seed, curve.seed);
        assert_eq!(back.defended, curve.defended);

        // Writing the parsed curve again reproduces the file byte for byte.
        let again = dir.path().join("curve2.json");
        write_curve(&again, &back, CurveFormat::Json).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            fs::read_to_string(&again).unwrap()
        );
    }

    #[test]
    fn formats_parse_their_display_forms() {
        for f in [CurveFormat::Csv, CurveFormat::Json] {
            assert_eq!(f.to_string().parse::<CurveFormat>().unwrap(), f);
        }
        assert!("yaml".parse::<CurveFormat>().is_err());
        for p in [CurvePlacement::FixedCenter, CurvePlacement::RandomTranslation] {
            assert_eq!(p.to_string().parse::<CurvePlacement>().unwrap(), p);
        }
        assert!("corner".parse::<CurvePlacement>().is_err());
    }
}
