//! Two-stream RGB-D fusion classifier.
//!
//! Each modality runs through a short stack of strided conv stages. After
//! every stage, a projection block (1x1 conv, global average pool, dense
//! map, rectifier) turns the volumetric activation into a p-vector; the two
//! streams' vectors are concatenated per stage and the stage sequence is
//! fed through a GRU. The final hidden state is the fused feature R(x); a
//! dense head plus softmax turns it into class scores.
//!
//! Single-stream variants (color-only, depth-only) are the same code path
//! with the other stream dropped, so ablations train and evaluate through
//! identical machinery.
//!
//! Weights live in plain `f32` buffers (`Param`) and are bound to tape
//! tensors per use: tracked for training, untracked for inference and for
//! attacks that differentiate with respect to the input instead.

mod checkpoint;
mod train;

pub use checkpoint::{load_net, save_net};
pub(crate) use train::{apply_update, mean_loss, OptState};
pub use train::{train, Optimizer, TrainConfig, TrainReport};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::{concat, gru_cell, GruParams, Tensor};

/// Which input streams the network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Rgbd,
    Rgb,
    Depth,
}

impl Variant {
    pub fn uses_rgb(&self) -> bool {
        matches!(self, Variant::Rgbd | Variant::Rgb)
    }

    pub fn uses_depth(&self) -> bool {
        matches!(self, Variant::Rgbd | Variant::Depth)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Variant, String> {
        match s {
            "rgbd" => Ok(Variant::Rgbd),
            "rgb" => Ok(Variant::Rgb),
            "depth" => Ok(Variant::Depth),
            other => Err(format!("unknown variant {other:?}, expected rgbd, rgb, or depth")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Rgbd => "rgbd",
            Variant::Rgb => "rgb",
            Variant::Depth => "depth",
        })
    }
}

/// Structural hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    /// Output channels of each conv stage, in order.
    pub stage_channels: Vec<usize>,
    /// Channel count after the projection blocks' 1x1 conv.
    pub q: usize,
    /// Projection output dimension.
    pub p: usize,
    /// GRU hidden size; the dimension of the fused feature R(x).
    pub a: usize,
    /// Number of classes.
    pub c: usize,
    /// Input images are `[3, image_size, image_size]`.
    pub image_size: usize,
}

impl Arch {
    pub fn toy(c: usize) -> Arch {
        Arch {
            stage_channels: vec![8, 16, 32],
            q: 8,
            p: 32,
            a: 16,
            c,
            image_size: 32,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Model("need at least one conv stage".into()));
        }
        if self.q == 0 || self.p == 0 || self.a == 0 || self.c < 2 {
            return Err(Error::Model(format!(
                "degenerate arch: q={}, p={}, a={}, c={}",
                self.q, self.p, self.a, self.c
            )));
        }
        // Every stage halves the spatial extent; all must stay nonzero.
        if self.image_size >> self.stages() == 0 {
            return Err(Error::Model(format!(
                "{} stages exhaust a {}px image",
                self.stages(),
                self.image_size
            )));
        }
        Ok(())
    }
}

/// A named weight buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn zeros(shape: Vec<usize>) -> Param {
        let n = shape.iter().product();
        Param {
            shape,
            data: vec![0.0; n],
        }
    }

    fn randn(shape: Vec<usize>, std: f32, rng: &mut ChaCha8Rng) -> Param {
        let t = Tensor::randn(shape.clone(), std, rng);
        Param {
            shape,
            data: t.data().to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn tensor(&self, tracked: bool) -> Tensor {
        let t = Tensor::from_vec(self.shape.clone(), self.data.clone())
            .expect("param buffer matches its shape");
        if tracked {
            t.tracked()
        } else {
            t
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct ProjectionBlock {
    pub conv_w: Param,
    pub conv_b: Param,
    pub dense_w: Param,
    pub dense_b: Param,
    /// Apply the trailing rectifier. Disabled only in linearity tests.
    pub nonlinear: bool,
}

#[derive(Clone, Debug)]
pub struct GruBuffers {
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_h: Param,
    pub u_h: Param,
    pub b_h: Param,
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub variant: Variant,
    pub arch: Arch,
    pub rgb_stages: Vec<ConvStage>,
    pub rgb_proj: Vec<ProjectionBlock>,
    pub depth_stages: Vec<ConvStage>,
    pub depth_proj: Vec<ProjectionBlock>,
    pub gru: GruBuffers,
    pub head_w: Param,
    pub head_b: Param,
}

impl FusionNet {
    /// Fresh network with seed-determined initial weights.
    pub fn new(variant: Variant, arch: Arch, seed: u64) -> Result<FusionNet> {
        arch.validate()?;
        let mut rng = seeded_rng(derive_seed(seed, 0x1217));

        let make_stream = |rng: &mut ChaCha8Rng| -> (Vec<ConvStage>, Vec<ProjectionBlock>) {
            let mut stages = Vec::new();
            let mut projections = Vec::new();
            let mut in_ch = 3;
            for &out_ch in &arch.stage_channels {
                let fan_in = (in_ch * 9) as f32;
                stages.push(ConvStage {
                    weight: Param::randn(
                        vec![out_ch, in_ch, 3, 3],
                        (2.0 / fan_in).sqrt(),
                        rng,
                    ),
                    bias: Param::zeros(vec![out_ch]),
                });
                projections.push(ProjectionBlock {
                    conv_w: Param::randn(
                        vec![arch.q, out_ch, 1, 1],
                        (2.0 / out_ch as f32).sqrt(),
                        rng,
                    ),
                    conv_b: Param::zeros(vec![arch.q]),
                    dense_w: Param::randn(
                        vec![arch.p, arch.q],
                        (2.0 / arch.q as f32).sqrt(),
                        rng,
                    ),
                    dense_b: Param::zeros(vec![arch.p]),
                    nonlinear: true,
                });
                in_ch = out_ch;
            }
            (stages, projections)
        };

        // Both streams are always initialized so a fixed seed yields the
        // same depth weights regardless of variant.
        let (rgb_stages, rgb_proj) = make_stream(&mut rng);
        let (depth_stages, depth_proj) = make_stream(&mut rng);

        let gru_in = if variant == Variant::Rgbd {
            2 * arch.p
        } else {
            arch.p
        };
        let wstd = 1.0 / (gru_in as f32).sqrt();
        let ustd = 1.0 / (arch.a as f32).sqrt();
        let gru = GruBuffers {
            w_z: Param::randn(vec![arch.a, gru_in], wstd, &mut rng),
            u_z: Param::randn(vec![arch.a, arch.a], ustd, &mut rng),
            b_z: Param::zeros(vec![arch.a]),
            w_r: Param::randn(vec![arch.a, gru_in], wstd, &mut rng),
            u_r: Param::randn(vec![arch.a, arch.a], ustd, &mut rng),
            b_r: Param::zeros(vec![arch.a]),
            w_h: Param::randn(vec![arch.a, gru_in], wstd, &mut rng),
            u_h: Param::randn(vec![arch.a, arch.a], ustd, &mut rng),
            b_h: Param::zeros(vec![arch.a]),
        };
        let head_w = Param::randn(
            vec![arch.c, arch.a],
            (1.0 / arch.a as f32).sqrt(),
            &mut rng,
        );
        let head_b = Param::zeros(vec![arch.c]);

        Ok(FusionNet {
            variant,
            arch,
            rgb_stages,
            rgb_proj,
            depth_stages,
            depth_proj,
            gru,
            head_w,
            head_b,
        })
    }

    /// Expected input dimension of the GRU for this variant.
    pub fn gru_input_dim(&self) -> usize {
        if self.variant == Variant::Rgbd {
            2 * self.arch.p
        } else {
            self.arch.p
        }
    }

    /// Visit every parameter with a stable name, in a stable order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Param)) {
        let streams: [(&str, &[ConvStage], &[ProjectionBlock]); 2] = [
            ("rgb", &self.rgb_stages, &self.rgb_proj),
            ("depth", &self.depth_stages, &self.depth_proj),
        ];
        for (name, stages, projections) in streams {
            for (i, s) in stages.iter().enumerate() {
                f(&format!("{name}_stage{i}_weight"), &s.weight);
                f(&format!("{name}_stage{i}_bias"), &s.bias);
            }
            for (i, p) in projections.iter().enumerate() {
                f(&format!("{name}_proj{i}_conv_w"), &p.conv_w);
                f(&format!("{name}_proj{i}_conv_b"), &p.conv_b);
                f(&format!("{name}_proj{i}_dense_w"), &p.dense_w);
                f(&format!("{name}_proj{i}_dense_b"), &p.dense_b);
            }
        }
        f("gru_w_z", &self.gru.w_z);
        f("gru_u_z", &self.gru.u_z);
        f("gru_b_z", &self.gru.b_z);
        f("gru_w_r", &self.gru.w_r);
        f("gru_u_r", &self.gru.u_r);
        f("gru_b_r", &self.gru.b_r);
        f("gru_w_h", &self.gru.w_h);
        f("gru_u_h", &self.gru.u_h);
        f("gru_b_h", &self.gru.b_h);
        f("head_weight", &self.head_w);
        f("head_bias", &self.head_b);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        let streams: [(&str, &mut [ConvStage], &mut [ProjectionBlock]); 2] = [
            ("rgb", &mut self.rgb_stages, &mut self.rgb_proj),
            ("depth", &mut self.depth_stages, &mut self.depth_proj),
        ];
        for (name, stages, projections) in streams {
            for (i, s) in stages.iter_mut().enumerate() {
                f(&format!("{name}_stage{i}_weight"), &mut s.weight);
                f(&format!("{name}_stage{i}_bias"), &mut s.bias);
            }
            for (i, p) in projections.iter_mut().enumerate() {
                f(&format!("{name}_proj{i}_conv_w"), &mut p.conv_w);
                f(&format!("{name}_proj{i}_conv_b"), &mut p.conv_b);
                f(&format!("{name}_proj{i}_dense_w"), &mut p.dense_w);
                f(&format!("{name}_proj{i}_dense_b"), &mut p.dense_b);
            }
        }
        f("gru_w_z", &mut self.gru.w_z);
        f("gru_u_z", &mut self.gru.u_z);
        f("gru_b_z", &mut self.gru.b_z);
        f("gru_w_r", &mut self.gru.w_r);
        f("gru_u_r", &mut self.gru.u_r);
        f("gru_b_r", &mut self.gru.b_r);
        f("gru_w_h", &mut self.gru.w_h);
        f("gru_u_h", &mut self.gru.u_h);
        f("gru_b_h", &mut self.gru.b_h);
        f("head_weight", &mut self.head_w);
        f("head_bias", &mut self.head_b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, p| n += p.numel());
        n
    }

    /// Bind the weights to tape tensors. Tracked bindings collect weight
    /// gradients for training; untracked ones are for inference and for
    /// input-space attacks. A binding can be reused across many forwards.
    pub fn bind(&self, tracked: bool) -> TapeNet {
        let mut flat = Vec::new();
        self.for_each_param(|_, p| flat.push(p.tensor(tracked)));
        let mut iter = flat.iter().cloned();
        let mut next = || iter.next().expect("binding order matches visit order");

        let mut bind_stream = |count: usize| -> (Vec<BoundStage>, Vec<BoundProjection>) {
            let stages = (0..count)
                .map(|_| BoundStage {
                    weight: next(),
                    bias: next(),
                })
                .collect();
            let projections = (0..count)
                .map(|i| BoundProjection {
                    conv_w: next(),
                    conv_b: next(),
                    dense_w: next(),
                    dense_b: next(),
                    nonlinear: self.rgb_proj[i].nonlinear,
                })
                .collect();
            (stages, projections)
        };
        let (rgb_stages, mut rgb_proj) = bind_stream(self.arch.stages());
        let (depth_stages, mut depth_proj) = bind_stream(self.arch.stages());
        for (bound, block) in rgb_proj.iter_mut().zip(&self.rgb_proj) {
            bound.nonlinear = block.nonlinear;
        }
        for (bound, block) in depth_proj.iter_mut().zip(&self.depth_proj) {
            bound.nonlinear = block.nonlinear;
        }
        let gru = GruParams {
            w_z: next(),
            u_z: next(),
            b_z: next(),
            w_r: next(),
            u_r: next(),
            b_r: next(),
            w_h: next(),
            u_h: next(),
            b_h: next(),
        };
        let head_w = next();
        let head_b = next();
        TapeNet {
            variant: self.variant,
            arch: self.arch.clone(),
            rgb_stages,
            rgb_proj,
            depth_stages,
            depth_proj,
            gru,
            head_w,
            head_b,
            flat,
        }
    }

    /// Forward pass on a fresh untracked binding.
    pub fn forward(&self, x_rgb: &Tensor, x_depth: &Tensor) -> Result<ForwardRecord> {
        self.bind(false).forward(x_rgb, x_depth)
    }

    /// Predicted label and scores. Ties break toward the lowest index.
    pub fn predict(&self, x_rgb: &Tensor, x_depth: &Tensor) -> Result<(usize, Tensor)> {
        let record = self.forward(x_rgb, x_depth)?;
        Ok((argmax(record.scores.data()), record.scores))
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate().skip(1) {
        if *v > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone)]
pub struct BoundStage {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone)]
pub struct BoundProjection {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    pub nonlinear: bool,
}

/// Projection block: collapse a `[C,H,W]` activation to a p-vector.
pub fn project(volume: &Tensor, block: &BoundProjection) -> Result<Tensor> {
    let mixed = volume.conv2d(&block.conv_w, Some(&block.conv_b), 1, 0)?;
    let pooled = mixed.global_avg_pool()?;
    let projected = block
        .dense_w
        .matvec(&pooled)?
        .add(&block.dense_b)?;
    Ok(if block.nonlinear {
        projected.relu()
    } else {
        projected
    })
}

/// Everything one forward pass produces, with the tape intact: activations
/// stay connected to the inputs (and to tracked weights), so callers can
/// build losses on any field and differentiate.
pub struct ForwardRecord {
    pub rgb_stages: Vec<Tensor>,
    pub depth_stages: Vec<Tensor>,
    pub rgb_projected: Vec<Tensor>,
    pub depth_projected: Vec<Tensor>,
    pub fused: Vec<Tensor>,
    /// Fused feature R(x): the final GRU state, dimension `a`.
    pub feature: Tensor,
    /// Softmax class scores, dimension `c`.
    pub scores: Tensor,
}

/// A network bound to tape tensors.
pub struct TapeNet {
    pub variant: Variant,
    pub arch: Arch,
    rgb_stages: Vec<BoundStage>,
    rgb_proj: Vec<BoundProjection>,
    depth_stages: Vec<BoundStage>,
    depth_proj: Vec<BoundProjection>,
    gru: GruParams,
    head_w: Tensor,
    head_b: Tensor,
    flat: Vec<Tensor>,
}

impl TapeNet {
    pub fn forward(&self, x_rgb: &Tensor, x_depth: &Tensor) -> Result<ForwardRecord> {
        let expect = [3, self.arch.image_size, self.arch.image_size];
        for (name, x) in [("x_rgb", x_rgb), ("x_depth", x_depth)] {
            if x.shape() != expect {
                return Err(Error::BadShape {
                    op: "forward",
                    detail: format!("{name} has shape {:?}, expected {expect:?}", x.shape()),
                });
            }
        }

        let run_stream = |stages: &[BoundStage],
                          projections: &[BoundProjection],
                          x: &Tensor|
         -> Result<(Vec<Tensor>, Vec<Tensor>)> {
            let mut activations = Vec::with_capacity(stages.len());
            let mut projected = Vec::with_capacity(stages.len());
            let mut h = x.clone();
            for (stage, block) in stages.iter().zip(projections) {
                h = h.conv2d(&stage.weight, Some(&stage.bias), 2, 1)?.relu();
                projected.push(project(&h, block)?);
                activations.push(h.clone());
            }
            Ok((activations, projected))
        };

        let (rgb_stages, rgb_projected) = if self.variant.uses_rgb() {
            run_stream(&self.rgb_stages, &self.rgb_proj, x_rgb)?
        } else {
            (Vec::new(), Vec::new())
        };
        let (depth_stages, depth_projected) = if self.variant.uses_depth() {
            run_stream(&self.depth_stages, &self.depth_proj, x_depth)?
        } else {
            (Vec::new(), Vec::new())
        };

        let mut fused = Vec::with_capacity(self.arch.stages());
        for i in 0..self.arch.stages() {
            let s_i = match self.variant {
                Variant::Rgbd => concat(&[&rgb_projected[i], &depth_projected[i]])?,
                Variant::Rgb => rgb_projected[i].clone(),
                Variant::Depth => depth_projected[i].clone(),
            };
            fused.push(s_i);
        }

        let mut state = Tensor::zeros(vec![self.arch.a]);
        for s_i in &fused {
            state = gru_cell(s_i, &state, &self.gru)?;
        }
        let logits = self.head_w.matvec(&state)?.add(&self.head_b)?;
        let scores = logits.softmax()?;

        Ok(ForwardRecord {
            rgb_stages,
            depth_stages,
            rgb_projected,
            depth_projected,
            fused,
            feature: state,
            scores,
        })
    }

    /// Bound parameter tensors in visit order.
    pub fn params(&self) -> &[Tensor] {
        &self.flat
    }

    /// Collected weight gradients in visit order, zeros where a parameter
    /// was never reached.
    pub fn grads(&self) -> Vec<Vec<f32>> {
        self.flat
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    pub fn clear_grads(&self) {
        for t in &self.flat {
            t.clear_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net(variant: Variant) -> FusionNet {
        FusionNet::new(variant, Arch::toy(5), 0).unwrap()
    }

    fn random_inputs(seed: u64) -> (Tensor, Tensor) {
        let mut rng = seeded_rng(seed);
        let x_rgb = Tensor::uniform(vec![3, 32, 32], -0.5, 0.5, &mut rng);
        let x_depth = Tensor::uniform(vec![3, 32, 32], -0.5, 0.5, &mut rng);
        (x_rgb, x_depth)
    }

    #[test]
    fn forward_produces_contracted_shapes() {
        let net = toy_net(Variant::Rgbd);
        let (x_rgb, x_depth) = random_inputs(1);
        let record = net.forward(&x_rgb, &x_depth).unwrap();
        assert_eq!(record.rgb_stages.len(), 3);
        assert_eq!(record.rgb_stages[0].shape(), &[8, 16, 16]);
        assert_eq!(record.rgb_stages[2].shape(), &[32, 4, 4]);
        assert_eq!(record.rgb_projected[1].shape(), &[32]);
        assert_eq!(record.fused[0].shape(), &[64]);
        assert_eq!(record.feature.shape(), &[16]);
        assert_eq!(record.scores.shape(), &[5]);
    }

    #[test]
    fn scores_sum_to_one() {
        let net = toy_net(Variant::Rgbd);
        let (x_rgb, x_depth) = random_inputs(2);
        let record = net.forward(&x_rgb, &x_depth).unwrap();
        let total: f32 = record.scores.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = toy_net(Variant::Rgbd);
        let (x_rgb, x_depth) = random_inputs(3);
        let a = net.forward(&x_rgb, &x_depth).unwrap();
        let b = net.forward(&x_rgb, &x_depth).unwrap();
        assert_eq!(a.scores.data(), b.scores.data());
        assert_eq!(a.feature.data(), b.feature.data());
    }

    #[test]
    fn zero_head_gives_uniform_scores() {
        let mut net = toy_net(Variant::Rgbd);
        net.head_w.data.fill(0.0);
        net.head_b.data.fill(0.0);
        let (x_rgb, x_depth) = random_inputs(4);
        let record = net.forward(&x_rgb, &x_depth).unwrap();
        for v in record.scores.data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn single_stream_variants_skip_the_other_stream() {
        let (x_rgb, x_depth) = random_inputs(5);
        let rgb_net = toy_net(Variant::Rgb);
        let record = rgb_net.forward(&x_rgb, &x_depth).unwrap();
        assert!(record.depth_stages.is_empty());
        assert_eq!(record.fused[0].shape(), &[32]);

        let depth_net = toy_net(Variant::Depth);
        let record = depth_net.forward(&x_rgb, &x_depth).unwrap();
        assert!(record.rgb_stages.is_empty());

        // The ignored stream's content must not influence the output.
        let (other_rgb, _) = random_inputs(6);
        let again = depth_net.forward(&other_rgb, &x_depth).unwrap();
        assert_eq!(record.scores.data(), again.scores.data());
    }

    #[test]
    fn projection_pooling_ignores_spatial_extent() {
        let mut rng = seeded_rng(7);
        let block = BoundProjection {
            conv_w: Tensor::randn(vec![4, 2, 1, 1], 0.5, &mut rng),
            conv_b: Tensor::randn(vec![4], 0.5, &mut rng),
            dense_w: Tensor::randn(vec![6, 4], 0.5, &mut rng),
            dense_b: Tensor::randn(vec![6], 0.5, &mut rng),
            nonlinear: true,
        };
        let small = project(&Tensor::full(vec![2, 3, 3], 0.8), &block).unwrap();
        let large = project(&Tensor::full(vec![2, 9, 9], 0.8), &block).unwrap();
        for (a, b) in small.data().iter().zip(large.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_projection_block_scales_with_input() {
        let mut rng = seeded_rng(8);
        let block = BoundProjection {
            conv_w: Tensor::randn(vec![4, 2, 1, 1], 0.5, &mut rng),
            conv_b: Tensor::zeros(vec![4]),
            dense_w: Tensor::randn(vec![6, 4], 0.5, &mut rng),
            dense_b: Tensor::zeros(vec![6]),
            nonlinear: false,
        };
        let x = Tensor::uniform(vec![2, 4, 4], -1.0, 1.0, &mut rng);
        let once = project(&x, &block).unwrap();
        let twice = project(&x.mul_scalar(2.0), &block).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((2.0 * a - b).abs() < 1e-5, "2*{a} vs {b}");
        }
    }

    #[test]
    fn predict_matches_forward_argmax() {
        let net = toy_net(Variant::Rgbd);
        for seed in 0..100u64 {
            let (x_rgb, x_depth) = random_inputs(seed);
            let record = net.forward(&x_rgb, &x_depth).unwrap();
            let (label, scores) = net.predict(&x_rgb, &x_depth).unwrap();
            assert_eq!(label, argmax(record.scores.data()));
            assert_eq!(scores.data(), record.scores.data());
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = toy_net(Variant::Rgbd);
        let b = toy_net(Variant::Rgbd);
        let mut buffers_a = Vec::new();
        a.for_each_param(|name, p| buffers_a.push((name.to_string(), p.data.clone())));
        let mut identical = true;
        b.for_each_param(|name, p| {
            let (expect_name, expect_data) = &buffers_a[buffers_a
                .iter()
                .position(|(n, _)| n == name)
                .expect("same param set")];
            identical &= expect_name == name && *expect_data == p.data;
        });
        assert!(identical);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = toy_net(Variant::Rgbd);
        let bad = Tensor::zeros(vec![3, 16, 16]);
        let good = Tensor::zeros(vec![3, 32, 32]);
        assert!(net.forward(&bad, &good).is_err());
    }

    #[test]
    fn degenerate_arch_is_rejected() {
        let mut arch = Arch::toy(5);
        arch.c = 1;
        assert!(FusionNet::new(Variant::Rgbd, arch, 0).is_err());
        let mut arch = Arch::toy(5);
        arch.image_size = 4;
        assert!(FusionNet::new(Variant::Rgbd, arch, 0).is_err());
    }

    #[test]
    fn input_gradients_flow_to_both_streams() {
        let net = toy_net(Variant::Rgbd);
        let mut rng = seeded_rng(9);
        let x_rgb = Tensor::uniform(vec![3, 32, 32], -0.5, 0.5, &mut rng).tracked();
        let x_depth = Tensor::uniform(vec![3, 32, 32], -0.5, 0.5, &mut rng).tracked();
        let record = net.bind(false).forward(&x_rgb, &x_depth).unwrap();
        let loss = crate::tensor::cross_entropy(&record.scores, 0).unwrap();
        loss.backward().unwrap();
        let nonzero = |g: Vec<f32>| g.iter().filter(|v| **v != 0.0).count();
        assert!(nonzero(x_rgb.grad().unwrap()) > 100);
        assert!(nonzero(x_depth.grad().unwrap()) > 100);
    }
}
