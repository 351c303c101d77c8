//! Analytic rendering of the synthetic shapes.
//!
//! Each sample is one shape instance under a random pose: a jittered center,
//! size, rotation, and brightness. Depth is an exact height field over a
//! flat background plane; RGB paints the same silhouette with a striped
//! two-color texture plus height shading, so color and geometry describe
//! the same object. All randomness comes from the caller's generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Geometry drawn for one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShapeFamily {
    Sphere,
    Box,
    Pyramid,
    Ring,
}

impl ShapeFamily {
    /// Fixed class-to-shape rule: even classes are spheres, odd ones are
    /// boxes. Geometry only narrows a label down to its group; the painted
    /// texture identifies the exact class, the way containers on a desk
    /// share shells and differ in their printed labels.
    pub fn for_class(class: usize) -> ShapeFamily {
        if class % 2 == 0 {
            ShapeFamily::Sphere
        } else {
            ShapeFamily::Box
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Pyramid => "pyramid",
            ShapeFamily::Ring => "ring",
        }
    }
}

/// Two-color texture assigned to a class.
#[derive(Clone, Copy, Debug)]
pub struct Palette {
    pub base: [f32; 3],
    pub stripe: [f32; 3],
    pub name: &'static str,
}

const PALETTES: [Palette; 5] = [
    Palette {
        base: [0.85, 0.20, 0.20],
        stripe: [0.95, 0.85, 0.30],
        name: "red",
    },
    Palette {
        base: [0.90, 0.55, 0.15],
        stripe: [0.45, 0.25, 0.10],
        name: "orange",
    },
    Palette {
        base: [0.20, 0.35, 0.85],
        stripe: [0.90, 0.90, 0.95],
        name: "blue",
    },
    Palette {
        base: [0.20, 0.75, 0.30],
        stripe: [0.10, 0.25, 0.12],
        name: "green",
    },
    Palette {
        base: [0.60, 0.25, 0.80],
        stripe: [0.30, 0.85, 0.85],
        name: "purple",
    },
];

pub fn palette(index: usize) -> Palette {
    PALETTES[index % PALETTES.len()]
}

/// Per-instance appearance: the stable traits that distinguish one physical
/// object from another of the same class. Held-out test instances get their
/// own draw of these, which is what makes the split meaningful.
#[derive(Clone, Copy, Debug)]
pub struct Instance {
    pub base: [f32; 3],
    pub stripe: [f32; 3],
    pub stripe_period: f32,
    pub stripe_phase: f32,
    pub size_mult: f32,
    pub peak_mult: f32,
}

impl Instance {
    pub fn derive<R: Rng>(palette: &Palette, rng: &mut R) -> Instance {
        let jitter = |c: f32, rng: &mut R| (c + rng.random_range(-0.08..0.08f32)).clamp(0.0, 1.0);
        let base = [
            jitter(palette.base[0], rng),
            jitter(palette.base[1], rng),
            jitter(palette.base[2], rng),
        ];
        let stripe = [
            jitter(palette.stripe[0], rng),
            jitter(palette.stripe[1], rng),
            jitter(palette.stripe[2], rng),
        ];
        Instance {
            base,
            stripe,
            stripe_period: rng.random_range(4.0..7.0),
            stripe_phase: rng.random_range(0.0..std::f32::consts::TAU),
            size_mult: rng.random_range(0.9..1.1),
            peak_mult: rng.random_range(0.9..1.1),
        }
    }
}

/// One rendered sample: RGB `[3,S,S]` in [0,1] and raw depth `[S,S]`.
pub fn render<R: Rng>(
    family: ShapeFamily,
    instance: &Instance,
    size: usize,
    depth_noise_std: f32,
    rng: &mut R,
) -> (Vec<f32>, Vec<f32>) {
    let s = size as f32;
    let bg_depth = s / 4.0;
    let peak = bg_depth * 0.375 * instance.peak_mult;

    let cx = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let cy = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let radius = rng.random_range(0.28..0.38f32) * s * instance.size_mult;
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let brightness = rng.random_range(0.85..1.05f32);
    let stripe_angle = theta + instance.stripe_phase;

    let (sin_t, cos_t) = theta.sin_cos();
    let (sin_a, cos_a) = stripe_angle.sin_cos();

    let plane = size * size;
    let mut depth = vec![bg_depth; plane];
    let mut rgb = vec![0.0f32; 3 * plane];

    for py in 0..size {
        for px in 0..size {
            let x = px as f32 + 0.5 - cx;
            let y = py as f32 + 0.5 - cy;
            // object frame, rotated by the pose angle
            let u = x * cos_t + y * sin_t;
            let v = -x * sin_t + y * cos_t;
            let rho = (x * x + y * y).sqrt();

            let height = match family {
                ShapeFamily::Sphere => {
                    let t = 1.0 - (rho / radius) * (rho / radius);
                    if t > 0.0 {
                        peak * t.sqrt()
                    } else {
                        0.0
                    }
                }
                ShapeFamily::Box => {
                    let half = radius * 0.8;
                    if u.abs() <= half && v.abs() <= half {
                        peak
                    } else {
                        0.0
                    }
                }
                ShapeFamily::Pyramid => {
                    let half = radius * 0.9;
                    let d = u.abs().max(v.abs());
                    if d <= half {
                        peak * (1.0 - d / half)
                    } else {
                        0.0
                    }
                }
                ShapeFamily::Ring => {
                    let outer = radius;
                    let inner = radius * 0.55;
                    if rho >= inner && rho <= outer {
                        let t = (rho - inner) / (outer - inner);
                        peak * (std::f32::consts::PI * t).sin()
                    } else {
                        0.0
                    }
                }
            };

            let idx = py * size + px;
            let mut color = if height > 0.0 {
                depth[idx] = bg_depth - height;
                let w = u * cos_a + v * sin_a;
                let cycle = (w / instance.stripe_period).rem_euclid(1.0);
                let paint = if cycle < 0.5 {
                    instance.base
                } else {
                    instance.stripe
                };
                let shade = 0.75 + 0.25 * (height / peak);
                [paint[0] * shade, paint[1] * shade, paint[2] * shade]
            } else {
                let speckle = rng.random_range(0.0..0.05f32);
                [0.12 + speckle, 0.12 + speckle, 0.14 + speckle]
            };
            for (ch, c) in color.iter_mut().enumerate() {
                *c = (*c * brightness).clamp(0.0, 1.0);
                rgb[ch * plane + idx] = *c;
            }
        }
    }

    if depth_noise_std > 0.0 {
        let normal = Normal::new(0.0f32, depth_noise_std).expect("finite noise std");
        for d in &mut depth {
            *d = (*d + normal.sample(rng)).max(0.0);
        }
    }

    (rgb, depth)
}
