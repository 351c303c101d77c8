//! The projected gradient loop and the four attack pipelines built on it.
//!
//! One engine drives every attack: a set of perturbation buffers descends a
//! caller-supplied loss, and after each step every coordinate is clamped
//! into its own feasible interval. For full-image attacks that interval is
//! the l-infinity ball shifted to stay inside the valid pixel range; for
//! patches it is the norm ball intersected with the range directly, since
//! the patch content replaces pixels rather than offsetting them. Merging
//! the norm projection and the range clamp into one interval per coordinate
//! is exact: both constraints are boxes, and the projection onto an
//! intersection of boxes clamps componentwise.

use std::cell::RefCell;

use rand::Rng;

use super::{
    apply_patch, defended_margin, margin_loss, patch_mask, place_patch, AttackBudget,
    AttackResult, PatchSpec, Placement, TargetParts,
};
use crate::dataset::ChannelStats;
use crate::detector::{defended_predict, DetectorState, RejectMode};
use crate::error::{Error, Result};
use crate::model::{argmax, FusionNet};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

/// One perturbation buffer: its shape, starting point, and the feasible
/// interval of every coordinate.
pub(crate) struct PartSpec {
    pub shape: Vec<usize>,
    pub init: Vec<f32>,
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

/// What one evaluation of the attack objective reports back.
pub(crate) struct StepEval {
    pub loss: Tensor,
    /// Largest absolute deviation on coordinates the attack must not touch.
    pub leak: f32,
}

#[derive(Debug)]
pub(crate) struct DescentReport {
    pub deltas: Vec<Vec<f32>>,
    /// Index of the evaluation the returned `deltas` come from.
    pub best_step: usize,
    pub loss_trace: Vec<f32>,
    pub linf_trace: Vec<f32>,
    pub leak_trace: Vec<f32>,
}

/// Projected gradient descent over the given parts.
///
/// `eval` receives fresh tracked leaves holding the current buffers and the
/// iteration index; it rebuilds the adversarial input and the loss from
/// scratch each call, so every iteration differentiates through its own
/// graph. The loop runs `steps` updates and then evaluates once more, so
/// all traces have `steps + 1` entries. The returned buffers are the
/// iterate with the lowest observed loss, not the last one: with step
/// sizes large enough to move a saturated network the trajectory bounces
/// around the ball, and keeping the best visited point costs one buffer
/// copy while discarding none of the trace. Ties keep the earliest step.
pub(crate) fn descend(
    parts: &[PartSpec],
    eta: f32,
    steps: usize,
    mut eval: impl FnMut(&[Tensor], usize) -> Result<StepEval>,
) -> Result<DescentReport> {
    if parts.is_empty() {
        return Err(Error::Attack("no perturbation buffers to optimize".into()));
    }
    for part in parts {
        let n: usize = part.shape.iter().product();
        debug_assert_eq!(part.init.len(), n);
        debug_assert_eq!(part.lo.len(), n);
        debug_assert_eq!(part.hi.len(), n);
        debug_assert!(part.lo.iter().zip(&part.hi).all(|(l, h)| l <= h));
    }

    let mut bufs: Vec<Vec<f32>> = parts.iter().map(|p| p.init.clone()).collect();
    let mut best: Option<(f32, usize, Vec<Vec<f32>>)> = None;
    let mut loss_trace = Vec::with_capacity(steps + 1);
    let mut linf_trace = Vec::with_capacity(steps + 1);
    let mut leak_trace = Vec::with_capacity(steps + 1);

    for t in 0..=steps {
        let leaves: Vec<Tensor> = parts
            .iter()
            .zip(&bufs)
            .map(|(p, b)| Ok(Tensor::from_vec(p.shape.clone(), b.clone())?.tracked()))
            .collect::<Result<_>>()?;
        let StepEval { loss, leak } = eval(&leaves, t)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "attack loss".into(),
            });
        }
        loss_trace.push(value);
        linf_trace.push(
            bufs.iter()
                .flatten()
                .fold(0.0f32, |acc, v| acc.max(v.abs())),
        );
        leak_trace.push(leak);
        if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
            best = Some((value, t, bufs.clone()));
        }
        if t == steps {
            break;
        }

        loss.backward()?;
        for ((part, buf), leaf) in parts.iter().zip(&mut bufs).zip(&leaves) {
            let grad = leaf.grad().ok_or_else(|| {
                Error::Attack("the loss does not depend on the perturbation".into())
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: "attack gradient".into(),
                });
            }
            for ((v, g), (lo, hi)) in buf
                .iter_mut()
                .zip(&grad)
                .zip(part.lo.iter().zip(&part.hi))
            {
                *v = (*v - eta * g).clamp(*lo, *hi);
            }
        }
    }

    let (_, best_step, deltas) = best.expect("at least one evaluation");
    Ok(DescentReport {
        deltas,
        best_step,
        loss_trace,
        linf_trace,
        leak_trace,
    })
}

/// Feasible interval per coordinate for an additive full-image delta:
/// the l-infinity ball intersected with the shift that keeps `x + delta`
/// inside the valid preprocessed range of its channel.
fn additive_part(x: &Tensor, ranges: &[(f32, f32); 3], eps: f32) -> PartSpec {
    let n = x.numel();
    let plane = n / 3;
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for (i, v) in x.data().iter().enumerate() {
        let (range_lo, range_hi) = ranges[i / plane];
        lo.push((-eps).max(range_lo - v));
        hi.push(eps.min(range_hi - v));
    }
    PartSpec {
        shape: x.shape().to_vec(),
        init: vec![0.0; n],
        lo,
        hi,
    }
}

/// Feasible interval per coordinate for patch content, which replaces
/// pixels outright: the norm ball intersected with the valid range itself.
fn replacement_part(side: usize, ranges: &[(f32, f32); 3], eps: f32) -> PartSpec {
    let plane = side * side;
    let mut lo = Vec::with_capacity(3 * plane);
    let mut hi = Vec::with_capacity(3 * plane);
    for (range_lo, range_hi) in ranges {
        lo.extend(std::iter::repeat((-eps).max(*range_lo)).take(plane));
        hi.extend(std::iter::repeat(eps.min(*range_hi)).take(plane));
    }
    PartSpec {
        shape: vec![3, side, side],
        init: vec![0.0; 3 * plane],
        lo,
        hi,
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .fold(0.0f32, |acc, (x, y)| acc.max((x - y).abs()))
}

fn check_parts_reach_net(net: &FusionNet, parts: TargetParts) -> Result<()> {
    if parts.rgb() && !net.variant.uses_rgb() {
        return Err(Error::Attack(format!(
            "target parts {parts} include rgb, but a {} network never reads it",
            net.variant
        )));
    }
    if parts.depth() && !net.variant.uses_depth() {
        return Err(Error::Attack(format!(
            "target parts {parts} include depth, but a {} network never reads it",
            net.variant
        )));
    }
    Ok(())
}

fn finish(
    net: &FusionNet,
    detector: Option<&DetectorState>,
    adv_rgb: &Tensor,
    adv_depth: &Tensor,
    y: usize,
) -> Result<(usize, Option<bool>, bool)> {
    let record = net.forward(adv_rgb, adv_depth)?;
    let adv_label = argmax(record.scores.data());
    match detector {
        Some(det) => {
            let verdict = defended_predict(net, det, adv_rgb, adv_depth, RejectMode::Hard)?;
            let success = !verdict.rejected && verdict.label != y;
            Ok((adv_label, Some(verdict.rejected), success))
        }
        None => Ok((adv_label, None, adv_label != y)),
    }
}

fn run_pgd(
    net: &FusionNet,
    detector: Option<&DetectorState>,
    stats: &ChannelStats,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    y: usize,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    budget.validate()?;
    if let Some(det) = detector {
        det.validate()?;
    }
    check_parts_reach_net(net, budget.target_parts)?;
    if y >= net.arch.c {
        return Err(Error::InvalidArgument(format!(
            "label {y} is outside the {} classes",
            net.arch.c
        )));
    }

    let target = budget.target_parts;
    let eps = budget.effective_epsilon();
    let mut parts = Vec::new();
    if target.rgb() {
        parts.push(additive_part(
            x_rgb,
            &ChannelStats::valid_range(&stats.rgb_mean),
            eps,
        ));
    }
    if target.depth() {
        parts.push(additive_part(
            x_depth,
            &ChannelStats::valid_range(&stats.depth_mean),
            eps,
        ));
    }

    let (clean_label, _) = net.predict(x_rgb, x_depth)?;
    let tape = net.bind(false);

    let report = descend(
        &parts,
        budget.effective_step(),
        budget.iterations,
        |leaves, _| {
            let mut next = leaves.iter();
            let adv_rgb = if target.rgb() {
                x_rgb.add(next.next().expect("an rgb leaf"))?
            } else {
                x_rgb.clone()
            };
            let adv_depth = if target.depth() {
                x_depth.add(next.next().expect("a depth leaf"))?
            } else {
                x_depth.clone()
            };
            let record = tape.forward(&adv_rgb, &adv_depth)?;
            let loss = match detector {
                Some(det) => defended_margin(&record, det, y)?,
                None => margin_loss(&record.scores, y)?,
            };
            let mut leak = 0.0f32;
            if !target.rgb() {
                leak = leak.max(max_abs_diff(adv_rgb.data(), x_rgb.data()));
            }
            if !target.depth() {
                leak = leak.max(max_abs_diff(adv_depth.data(), x_depth.data()));
            }
            Ok(StepEval { loss, leak })
        },
    )?;

    let mut deltas = report.deltas.into_iter();
    let delta_rgb = if target.rgb() {
        Some(Tensor::from_vec(
            x_rgb.shape().to_vec(),
            deltas.next().expect("an rgb delta"),
        )?)
    } else {
        None
    };
    let delta_depth = if target.depth() {
        Some(Tensor::from_vec(
            x_depth.shape().to_vec(),
            deltas.next().expect("a depth delta"),
        )?)
    } else {
        None
    };

    let adv_rgb = match &delta_rgb {
        Some(d) => x_rgb.add(d)?,
        None => x_rgb.clone(),
    };
    let adv_depth = match &delta_depth {
        Some(d) => x_depth.add(d)?,
        None => x_depth.clone(),
    };
    let (adv_label, rejected, success) = finish(net, detector, &adv_rgb, &adv_depth, y)?;

    Ok(AttackResult {
        adv_rgb,
        adv_depth,
        delta_rgb,
        delta_depth,
        patch_origin: None,
        loss_trace: report.loss_trace,
        linf_trace: report.linf_trace,
        leak_trace: report.leak_trace,
        clean_label,
        adv_label,
        rejected,
        success,
    })
}

fn run_patch(
    net: &FusionNet,
    detector: Option<&DetectorState>,
    stats: &ChannelStats,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    y: usize,
    spec: &PatchSpec,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    budget.validate()?;
    if let Some(det) = detector {
        det.validate()?;
    }
    if budget.target_parts != TargetParts::Rgb {
        return Err(Error::Attack(
            "patch attacks target the rgb stream only".into(),
        ));
    }
    check_parts_reach_net(net, budget.target_parts)?;
    spec.validate(net.arch.image_size)?;
    if y >= net.arch.c {
        return Err(Error::InvalidArgument(format!(
            "label {y} is outside the {} classes",
            net.arch.c
        )));
    }

    let image_size = net.arch.image_size;
    let side = spec.side;
    let part = replacement_part(
        side,
        &ChannelStats::valid_range(&stats.rgb_mean),
        budget.effective_epsilon(),
    );

    let mut placement_rng = match spec.placement {
        Placement::FixedCenter => None,
        Placement::RandomTranslation { seed } => Some(seeded_rng(seed)),
    };
    let centered = ((image_size - side) / 2, (image_size - side) / 2);

    let (clean_label, _) = net.predict(x_rgb, x_depth)?;
    let tape = net.bind(false);
    let origins: RefCell<Vec<(usize, usize)>> = RefCell::new(Vec::new());

    let report = descend(
        std::slice::from_ref(&part),
        budget.effective_step(),
        budget.iterations,
        |leaves, _| {
            // A random placement redraws the corner every iteration, so
            // each iterate is judged at its own position and the winning
            // patch keeps the position it was scored at.
            let origin = match placement_rng.as_mut() {
                None => centered,
                Some(rng) => (
                    rng.random_range(0..=image_size - side),
                    rng.random_range(0..=image_size - side),
                ),
            };
            origins.borrow_mut().push(origin);
            let mask = patch_mask(image_size, side, origin);
            let placed = place_patch(&leaves[0], image_size, origin)?;
            let adv_rgb = apply_patch(x_rgb, &placed, &mask)?;
            let record = tape.forward(&adv_rgb, x_depth)?;
            let loss = match detector {
                Some(det) => defended_margin(&record, det, y)?,
                None => margin_loss(&record.scores, y)?,
            };
            let leak = adv_rgb
                .data()
                .iter()
                .zip(x_rgb.data())
                .zip(mask.data())
                .filter(|(_, m)| **m == 0.0)
                .fold(0.0f32, |acc, ((a, c), _)| acc.max((a - c).abs()));
            Ok(StepEval { loss, leak })
        },
    )?;

    let delta_rgb = Tensor::from_vec(
        vec![3, side, side],
        report.deltas.into_iter().next().expect("the patch buffer"),
    )?;
    let origin = origins.into_inner()[report.best_step];
    let mask = patch_mask(image_size, side, origin);
    let placed = place_patch(&delta_rgb, image_size, origin)?;
    let adv_rgb = apply_patch(x_rgb, &placed, &mask)?;
    let (adv_label, rejected, success) = finish(net, detector, &adv_rgb, x_depth, y)?;
    let delta_rgb = Some(delta_rgb);

    Ok(AttackResult {
        adv_rgb,
        adv_depth: x_depth.clone(),
        delta_rgb,
        delta_depth: None,
        patch_origin: Some(origin),
        loss_trace: report.loss_trace,
        linf_trace: report.linf_trace,
        leak_trace: report.leak_trace,
        clean_label,
        adv_label,
        rejected,
        success,
    })
}

/// Full-image projected gradient attack on the margin loss.
pub fn pgd_attack(
    net: &FusionNet,
    stats: &ChannelStats,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    y: usize,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    run_pgd(net, None, stats, x_rgb, x_depth, y, budget)
}

/// Square-patch attack on the RGB stream.
pub fn patch_attack(
    net: &FusionNet,
    stats: &ChannelStats,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    y: usize,
    spec: &PatchSpec,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    run_patch(net, None, stats, x_rgb, x_depth, y, spec, budget)
}

/// Full-image attack on the defended margin: the optimizer sees the
/// rejection score and must defeat classifier and detector together.
pub fn adaptive_pgd_attack(
    net: &FusionNet,
    detector: &DetectorState,
    stats: &ChannelStats,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    y: usize,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    run_pgd(net, Some(detector), stats, x_rgb, x_depth, y, budget)
}

/// Patch attack on the defended margin.
pub fn adaptive_patch_attack(
    net: &FusionNet,
    detector: &DetectorState,
    stats: &ChannelStats,
    x_rgb: &Tensor,
    x_depth: &Tensor,
    y: usize,
    spec: &PatchSpec,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    run_patch(net, Some(detector), stats, x_rgb, x_depth, y, spec, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::EpsScale;
    use crate::detector::Centroids;
    use crate::model::{Arch, Variant};

    fn quadratic_target() -> (Vec<PartSpec>, Tensor) {
        let target = Tensor::from_vec(vec![3], vec![0.3, -0.2, 0.1]).unwrap();
        let part = PartSpec {
            shape: vec![3],
            init: vec![2.0, -1.0, 0.5],
            lo: vec![-10.0; 3],
            hi: vec![10.0; 3],
        };
        (vec![part], target)
    }

    #[test]
    fn descent_on_a_quadratic_is_non_increasing_and_converges() {
        let (parts, target) = quadratic_target();
        let report = descend(&parts, 0.1, 50, |leaves, _| {
            let diff = leaves[0].sub(&target).unwrap();
            Ok(StepEval {
                loss: diff.mul(&diff).unwrap().sum(),
                leak: 0.0,
            })
        })
        .unwrap();
        assert_eq!(report.loss_trace.len(), 51);
        for pair in report.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-7, "trace rose: {pair:?}");
        }
        for (d, t) in report.deltas[0].iter().zip(target.data()) {
            assert!((d - t).abs() < 1e-3);
        }
    }

    #[test]
    fn descent_respects_coordinate_bounds_at_every_step() {
        let (mut parts, target) = quadratic_target();
        parts[0].lo = vec![-0.1; 3];
        parts[0].hi = vec![0.1; 3];
        parts[0].init = vec![0.0; 3];
        let report = descend(&parts, 0.3, 25, |leaves, _| {
            let diff = leaves[0].sub(&target).unwrap();
            Ok(StepEval {
                loss: diff.mul(&diff).unwrap().sum(),
                leak: 0.0,
            })
        })
        .unwrap();
        assert!(report.linf_trace.iter().all(|&l| l <= 0.1));
        // The unconstrained optimum 0.3 sits outside the box, so the first
        // coordinate pins to its bound.
        assert_eq!(report.deltas[0][0], 0.1);
    }

    #[test]
    fn descent_returns_the_lowest_loss_iterate_not_the_last() {
        // A step size of 4 on a one-dimensional quadratic overshoots and
        // diverges into the bounds, so the starting point stays the best
        // visited iterate.
        let part = PartSpec {
            shape: vec![1],
            init: vec![0.0],
            lo: vec![-10.0],
            hi: vec![10.0],
        };
        let report = descend(std::slice::from_ref(&part), 4.0, 2, |leaves, _| {
            let diff = leaves[0].add_scalar(-3.0);
            Ok(StepEval {
                loss: diff.mul(&diff).unwrap().sum(),
                leak: 0.0,
            })
        })
        .unwrap();
        assert_eq!(report.loss_trace.len(), 3);
        assert!(report.loss_trace[1] > report.loss_trace[0]);
        assert_eq!(report.best_step, 0);
        assert_eq!(report.deltas[0], vec![0.0]);
    }

    #[test]
    fn descent_reports_a_loss_that_ignores_the_perturbation() {
        let (parts, _) = quadratic_target();
        let err = descend(&parts, 0.1, 5, |_, _| {
            Ok(StepEval {
                loss: Tensor::scalar(1.0),
                leak: 0.0,
            })
        })
        .unwrap_err();
        assert!(err.to_string().contains("does not depend"));
    }

    fn tiny_net(variant: Variant) -> FusionNet {
        let arch = Arch {
            stage_channels: vec![4, 8],
            q: 4,
            p: 8,
            a: 6,
            c: 3,
            image_size: 16,
        };
        FusionNet::new(variant, arch, 7).unwrap()
    }

    fn tiny_stats() -> ChannelStats {
        ChannelStats {
            rgb_mean: [0.45, 0.5, 0.55],
            depth_mean: [0.4, 0.5, 0.6],
        }
    }

    fn tiny_inputs(seed: u64, stats: &ChannelStats) -> (Tensor, Tensor) {
        // Uniform draws inside each channel's valid preprocessed range.
        let mut rng = seeded_rng(seed);
        let mut make = |means: &[f32; 3]| {
            let plane = 16 * 16;
            let mut data = Vec::with_capacity(3 * plane);
            for mean in means {
                for _ in 0..plane {
                    data.push(rng.random_range(-mean..1.0 - mean));
                }
            }
            Tensor::from_vec(vec![3, 16, 16], data).unwrap()
        };
        let x_rgb = make(&stats.rgb_mean);
        let x_depth = make(&stats.depth_mean);
        (x_rgb, x_depth)
    }

    fn quick_budget(epsilon: f32, parts: TargetParts) -> AttackBudget {
        AttackBudget {
            epsilon,
            step_size: 0.05,
            iterations: 5,
            target_parts: parts,
            eps_scale: EpsScale::Unit,
        }
    }

    #[test]
    fn zero_radius_attack_returns_the_clean_input_bit_for_bit() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(31, &stats);
        let result = pgd_attack(
            &net,
            &stats,
            &x_rgb,
            &x_depth,
            0,
            &quick_budget(0.0, TargetParts::Both),
        )
        .unwrap();
        for (a, b) in result.adv_rgb.data().iter().zip(x_rgb.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in result.adv_depth.data().iter().zip(x_depth.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(result.delta_rgb.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(result.delta_depth.unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(result.adv_label, result.clean_label);
        assert!(result.linf_trace.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn rgb_only_attack_leaves_depth_bit_identical() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(32, &stats);
        let result = pgd_attack(
            &net,
            &stats,
            &x_rgb,
            &x_depth,
            1,
            &quick_budget(0.1, TargetParts::Rgb),
        )
        .unwrap();
        for (a, b) in result.adv_depth.data().iter().zip(x_depth.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(result.delta_depth.is_none());
        assert!(result.leak_trace.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn attack_stays_in_the_ball_and_the_valid_range_every_step() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(33, &stats);
        let eps = 0.08;
        let mut budget = quick_budget(eps, TargetParts::Both);
        budget.step_size = 0.2; // deliberately overshooting steps
        let result = pgd_attack(&net, &stats, &x_rgb, &x_depth, 2, &budget).unwrap();
        assert!(result.linf_trace.iter().all(|&l| l <= eps));
        assert!(result.linf_norm() <= eps);
        let ranges = ChannelStats::valid_range(&stats.rgb_mean);
        let plane = 16 * 16;
        for (i, v) in result.adv_rgb.data().iter().enumerate() {
            let (lo, hi) = ranges[i / plane];
            assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
        }
    }

    #[test]
    fn attack_descends_the_margin_on_a_real_network() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(34, &stats);
        let (clean_label, _) = net.predict(&x_rgb, &x_depth).unwrap();
        let mut budget = quick_budget(0.3, TargetParts::Both);
        budget.iterations = 15;
        let result = pgd_attack(&net, &stats, &x_rgb, &x_depth, clean_label, &budget).unwrap();
        let first = result.loss_trace.first().unwrap();
        let last = result.loss_trace.last().unwrap();
        assert!(last < first, "margin did not descend: {first} -> {last}");
    }

    #[test]
    fn targeting_a_stream_the_network_ignores_is_an_error() {
        let net = tiny_net(Variant::Rgb);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(35, &stats);
        let err = pgd_attack(
            &net,
            &stats,
            &x_rgb,
            &x_depth,
            0,
            &quick_budget(0.1, TargetParts::Depth),
        )
        .unwrap_err();
        assert!(err.to_string().contains("never reads"));
        assert!(pgd_attack(
            &net,
            &stats,
            &x_rgb,
            &x_depth,
            0,
            &quick_budget(0.1, TargetParts::Rgb),
        )
        .is_ok());
    }

    #[test]
    fn broken_weights_surface_as_an_error() {
        let mut net = tiny_net(Variant::Rgbd);
        // Poison a parameter past every rectifier, so the hole cannot be
        // masked by an activation clamping it away.
        net.for_each_param_mut(|name, param| {
            if name == "head_bias" {
                param.data[0] = f32::NAN;
            }
        });
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(36, &stats);
        assert!(pgd_attack(
            &net,
            &stats,
            &x_rgb,
            &x_depth,
            0,
            &quick_budget(0.1, TargetParts::Both),
        )
        .is_err());
    }

    #[test]
    fn identical_runs_produce_identical_traces() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(37, &stats);
        let budget = quick_budget(0.1, TargetParts::Both);
        let a = pgd_attack(&net, &stats, &x_rgb, &x_depth, 1, &budget).unwrap();
        let b = pgd_attack(&net, &stats, &x_rgb, &x_depth, 1, &budget).unwrap();
        assert_eq!(a.loss_trace.len(), b.loss_trace.len());
        for (u, v) in a.loss_trace.iter().zip(&b.loss_trace) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        let (da, db) = (a.delta_rgb.unwrap(), b.delta_rgb.unwrap());
        for (u, v) in da.data().iter().zip(db.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn zero_side_patch_changes_nothing() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(38, &stats);
        let spec = PatchSpec {
            side: 0,
            placement: Placement::FixedCenter,
        };
        let result = patch_attack(
            &net,
            &stats,
            &x_rgb,
            &x_depth,
            0,
            &spec,
            &quick_budget(1.0, TargetParts::Rgb),
        )
        .unwrap();
        for (a, b) in result.adv_rgb.data().iter().zip(x_rgb.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(result.adv_label, result.clean_label);
    }

    #[test]
    fn patch_touches_nothing_outside_its_mask() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(39, &stats);
        let spec = PatchSpec {
            side: 5,
            placement: Placement::FixedCenter,
        };
        let result = patch_attack(
            &net,
            &stats,
            &x_rgb,
            &x_depth,
            1,
            &spec,
            &quick_budget(1.0, TargetParts::Rgb),
        )
        .unwrap();
        assert!(result.leak_trace.iter().all(|&l| l == 0.0));
        let origin = result.patch_origin.unwrap();
        assert_eq!(origin, (5, 5));
        let mask = patch_mask(16, 5, origin);
        for ((a, c), m) in result
            .adv_rgb
            .data()
            .iter()
            .zip(x_rgb.data())
            .zip(mask.data())
        {
            if *m == 0.0 {
                assert_eq!(a.to_bits(), c.to_bits());
            }
        }
        for (a, b) in result.adv_depth.data().iter().zip(x_depth.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn patch_content_respects_ball_and_range() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(40, &stats);
        let spec = PatchSpec {
            side: 6,
            placement: Placement::FixedCenter,
        };
        let eps = 0.2;
        let mut budget = quick_budget(eps, TargetParts::Rgb);
        budget.step_size = 0.5;
        let result =
            patch_attack(&net, &stats, &x_rgb, &x_depth, 0, &spec, &budget).unwrap();
        assert!(result.linf_trace.iter().all(|&l| l <= eps));
        let ranges = ChannelStats::valid_range(&stats.rgb_mean);
        let patch = result.delta_rgb.unwrap();
        for (i, v) in patch.data().iter().enumerate() {
            let (lo, hi) = ranges[i / 36];
            assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn random_translation_is_deterministic_and_in_bounds() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(41, &stats);
        let spec = PatchSpec {
            side: 13,
            placement: Placement::RandomTranslation { seed: 77 },
        };
        let budget = quick_budget(1.0, TargetParts::Rgb);
        let a = patch_attack(&net, &stats, &x_rgb, &x_depth, 2, &spec, &budget).unwrap();
        let b = patch_attack(&net, &stats, &x_rgb, &x_depth, 2, &spec, &budget).unwrap();
        assert_eq!(a.patch_origin, b.patch_origin);
        for (u, v) in a.loss_trace.iter().zip(&b.loss_trace) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        let (r0, c0) = a.patch_origin.unwrap();
        assert!(r0 + 13 <= 16 && c0 + 13 <= 16);
        assert!(a.leak_trace.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn patch_rejects_other_target_parts() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(42, &stats);
        let spec = PatchSpec {
            side: 4,
            placement: Placement::FixedCenter,
        };
        for parts in [TargetParts::Depth, TargetParts::Both] {
            let err = patch_attack(
                &net,
                &stats,
                &x_rgb,
                &x_depth,
                0,
                &spec,
                &quick_budget(1.0, parts),
            )
            .unwrap_err();
            assert!(err.to_string().contains("rgb stream only"));
        }
    }

    fn saturated_detector(net: &FusionNet) -> DetectorState {
        let mut rng = seeded_rng(14);
        let vecs = (0..net.arch.c)
            .map(|_| {
                (0..net.arch.a)
                    .map(|_| rng.random_range(-0.5..0.5f32))
                    .collect()
            })
            .collect();
        DetectorState {
            centroids: Centroids::new(vecs).unwrap(),
            beta: 1e6,
            lambda: 30.0,
            fpr_target: 0.1,
            rho: 1e-5,
            achieved_fpr: 0.0,
        }
    }

    #[test]
    fn adaptive_attack_with_a_vanishing_rejection_matches_plain_pgd() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(43, &stats);
        let detector = saturated_detector(&net);
        let budget = quick_budget(0.1, TargetParts::Both);
        let plain = pgd_attack(&net, &stats, &x_rgb, &x_depth, 1, &budget).unwrap();
        let adaptive =
            adaptive_pgd_attack(&net, &detector, &stats, &x_rgb, &x_depth, 1, &budget).unwrap();
        for (u, v) in plain.loss_trace.iter().zip(&adaptive.loss_trace) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        let (dp, da) = (plain.delta_rgb.unwrap(), adaptive.delta_rgb.unwrap());
        for (u, v) in dp.data().iter().zip(da.data()) {
            assert_eq!(u, v);
        }
        // Nothing exceeds a threshold of a million, so the defended verdict
        // accepts and the two attacks agree on success.
        assert_eq!(adaptive.rejected, Some(false));
        assert_eq!(adaptive.success, plain.success);
    }

    #[test]
    fn adaptive_attack_reports_the_defended_verdict() {
        let net = tiny_net(Variant::Rgbd);
        let stats = tiny_stats();
        let (x_rgb, x_depth) = tiny_inputs(44, &stats);
        let mut detector = saturated_detector(&net);
        detector.beta = 1e-6; // reject essentially everything
        let budget = quick_budget(0.05, TargetParts::Both);
        let result =
            adaptive_pgd_attack(&net, &detector, &stats, &x_rgb, &x_depth, 0, &budget).unwrap();
        assert_eq!(result.rejected, Some(true));
        assert!(!result.success);
    }
}
