//! The end-to-end gradient-check suite: every differentiable op, the
//! appearance-model operations and their composition, and one full recurrent
//! frame through the loss, each on a batch of random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{self, ModelOptions, UpdateConfig, NUM_COMPONENTS};
use crate::error::Result;
use crate::graph::{check::grad_check_with, GradCheckOptions, NodeId, OpTag, Tape};
use crate::pipeline::{sequence_loss, AblationFlags, ModelConfig, Runner, AGGREGATION_EPS};
use crate::segnet::{BoundParams, ParamStore, SegNetConfig};
use crate::synthvos::{generate, GenConfig};
use crate::tensor::{ConvGeometry, Tensor};

/// Spatial size and channel count of the random feature maps.
pub const SIDE: usize = 6;
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    /// Random instances per path.
    pub instances: usize,
    pub seed: u64,
    pub check: GradCheckOptions,
    /// Corrupt one backward rule; the suite must then fail.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            instances: 10,
            seed: 0,
            check: GradCheckOptions::default(),
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathReport {
    pub path: &'static str,
    pub instances: usize,
    /// Coordinates compared and coordinates skipped at kinks.
    pub checked: usize,
    pub skipped: usize,
    /// Worst relative error over all instances and inputs.
    pub max_rel_error: f64,
    pub passed: bool,
}

impl PathReport {
    pub fn line(&self) -> String {
        format!(
            "{:<30} {:>3} instances {:>6} coords {:>4} at kinks  max_rel_error={:.3e}  {}",
            self.path,
            self.instances,
            self.checked,
            self.skipped,
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

type Builder = fn(&mut Tape, &[NodeId], &Instance) -> Result<NodeId>;

/// Fixed (non-differentiated) data of one instance.
struct Instance {
    mask: Tensor,
    model: ModelConfig,
    sample: Option<crate::synthvos::SequenceSample>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn fmap(rng: &mut ChaCha8Rng) -> Tensor {
    uniform(rng, &[SIDE, SIDE, CHANNELS], -1.0, 1.0)
}

/// A `2×D` component with positive variances.
fn component(rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(rng, &[2, CHANNELS], -1.0, 1.0);
    for v in &mut t.data_mut()[CHANNELS..] {
        *v = rng.gen_range(0.3..2.0);
    }
    t
}

/// Binary mask with both classes present.
fn random_mask(rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let m = Tensor::from_fn(&[SIDE, SIDE, 1], |_| f64::from(rng.gen_bool(0.4)));
        let s = m.sum();
        if s >= 1.0 && s < (SIDE * SIDE) as f64 {
            return m;
        }
    }
}

/// `sum(w ⊙ y)` with fixed weights, so every output coordinate matters.
fn project(tape: &mut Tape, y: NodeId) -> Result<NodeId> {
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.754_877_666_2).fract() * 2.0 - 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn unary(op: OpTag) -> impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> {
    move |tape, ids| {
        let y = tape.record(op.clone(), &[ids[0]])?;
        project(tape, y)
    }
}

fn binary(op: OpTag) -> impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> {
    move |tape, ids| {
        let y = tape.record(op.clone(), &[ids[0], ids[1]])?;
        project(tape, y)
    }
}

fn regularizers(tape: &mut Tape, r_raw: NodeId) -> Result<Vec<NodeId>> {
    appearance::regularizers(tape, r_raw, NUM_COMPONENTS)
}

fn small_net() -> SegNetConfig {
    // 24×24 frames give a 6×6×4 feature map.
    SegNetConfig {
        feature_dim: CHANNELS,
        skip_dim: 3,
        maskprop_dim: 3,
        fusion_dim: 3,
        refine_dim: 3,
        seed: 0,
    }
}

/// Runs the whole suite. Paths are reported in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<PathReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    let run = |path: &'static str,
                   out: &mut Vec<PathReport>,
                   rng: &mut ChaCha8Rng,
                   make: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<(Vec<Tensor>, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>)>|
     -> Result<()> {
        let mut worst: f64 = 0.0;
        let mut passed = true;
        let (mut checked, mut skipped) = (0, 0);
        for _ in 0..opts.instances {
            let (inputs, f) = make(rng)?;
            let report = grad_check_with(f, &inputs, opts.check, opts.inject_fault)?;
            worst = worst.max(report.max_rel_error());
            passed &= report.passed();
            checked += report.checked();
            skipped += report.skipped();
        }
        out.push(PathReport {
            path,
            instances: opts.instances,
            checked,
            skipped,
            max_rel_error: worst,
            passed,
        });
        Ok(())
    };

    type Made = Result<(Vec<Tensor>, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>)>;
    let boxed = |f: Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>, inputs: Vec<Tensor>| -> Made { Ok((inputs, f)) };

    for (path, op) in [("op.add", OpTag::Add), ("op.sub", OpTag::Sub), ("op.mul", OpTag::Mul), ("op.div", OpTag::Div)] {
        run(path, &mut out, &mut rng, &mut |rng| {
            let a = fmap(rng);
            let b = if op == OpTag::Div { uniform(rng, &[SIDE, SIDE, CHANNELS], 0.5, 2.0) } else { fmap(rng) };
            boxed(Box::new(binary(op.clone())), vec![a, b])
        })?;
    }
    let unaries = [
        ("op.add_scalar", OpTag::AddScalar(0.3), -1.0, 1.0),
        ("op.mul_scalar", OpTag::MulScalar(-1.7), -1.0, 1.0),
        ("op.relu", OpTag::Relu, -1.0, 1.0),
        ("op.ln", OpTag::Ln, 0.2, 2.0),
        ("op.exp", OpTag::Exp, -1.0, 1.0),
        ("op.softplus", OpTag::Softplus, -3.0, 3.0),
        ("op.channel_softmax", OpTag::ChannelSoftmax, -2.0, 2.0),
        ("op.mean", OpTag::Mean, -1.0, 1.0),
        ("op.upsample2x", OpTag::Upsample2x, -1.0, 1.0),
        ("op.slice_channels", OpTag::SliceChannels { start: 1, len: 2 }, -1.0, 1.0),
    ];
    for (path, op, lo, hi) in unaries {
        run(path, &mut out, &mut rng, &mut |rng| {
            boxed(Box::new(unary(op.clone())), vec![uniform(rng, &[SIDE, SIDE, CHANNELS], lo, hi)])
        })?;
    }
    run("op.select_row", &mut out, &mut rng, &mut |rng| {
        boxed(Box::new(unary(OpTag::SelectRow(1))), vec![uniform(rng, &[NUM_COMPONENTS, CHANNELS], -1.0, 1.0)])
    })?;
    run("op.sum", &mut out, &mut rng, &mut |rng| {
        boxed(Box::new(|tape: &mut Tape, ids: &[NodeId]| tape.sum(ids[0])), vec![fmap(rng)])
    })?;
    run("op.concat", &mut out, &mut rng, &mut |rng| {
        let b = uniform(rng, &[SIDE, SIDE, 2], -1.0, 1.0);
        boxed(
            Box::new(|tape: &mut Tape, ids: &[NodeId]| {
                let y = tape.concat(ids)?;
                project(tape, y)
            }),
            vec![fmap(rng), b],
        )
    })?;
    for (path, g) in [
        ("op.conv2d", ConvGeometry::new(3, 1, 1)),
        ("op.conv2d.strided", ConvGeometry::new(3, 2, 1)),
        ("op.conv2d.dilated", ConvGeometry::new(3, 1, 2)),
    ] {
        run(path, &mut out, &mut rng, &mut |rng| {
            let w = uniform(rng, &[3, 3, CHANNELS, 3], -0.5, 0.5);
            let b = uniform(rng, &[3], -0.5, 0.5);
            boxed(
                Box::new(move |tape: &mut Tape, ids: &[NodeId]| {
                    let y = tape.conv2d(ids[0], ids[1], ids[2], g)?;
                    project(tape, y)
                }),
                vec![fmap(rng), w, b],
            )
        })?;
    }
    run("op.ema_blend", &mut out, &mut rng, &mut |rng| {
        let (a, b) = (component(rng), component(rng));
        boxed(Box::new(binary(OpTag::EmaBlend(0.3))), vec![a, b])
    })?;
    run("op.cross_entropy", &mut out, &mut rng, &mut |rng| {
        let target = random_mask(rng);
        let logits = uniform(rng, &[SIDE, SIDE, 2], -2.0, 2.0);
        boxed(Box::new(unary(OpTag::CrossEntropy(target))), vec![logits])
    })?;
    run("op.aggregate", &mut out, &mut rng, &mut |rng| {
        let probs: Vec<Tensor> = (0..3).map(|_| uniform(rng, &[SIDE, SIDE, 1], 0.05, 0.95)).collect();
        boxed(
            Box::new(|tape: &mut Tape, ids: &[NodeId]| {
                let y = tape.record(OpTag::Aggregate { eps: AGGREGATION_EPS }, ids)?;
                project(tape, y)
            }),
            probs,
        )
    })?;

    run("appearance.scores", &mut out, &mut rng, &mut |rng| {
        let mut inputs = vec![fmap(rng)];
        inputs.extend((0..NUM_COMPONENTS).map(|_| component(rng)));
        boxed(
            Box::new(|tape: &mut Tape, ids: &[NodeId]| {
                let s = appearance::scores(tape, ids[0], &ids[1..])?;
                project(tape, s)
            }),
            inputs,
        )
    })?;
    run("appearance.weighted_moments", &mut out, &mut rng, &mut |rng| {
        let alpha = uniform(rng, &[SIDE, SIDE, 1], 0.05, 1.0);
        let r = uniform(rng, &[CHANNELS], 0.05, 1.0);
        boxed(
            Box::new(|tape: &mut Tape, ids: &[NodeId]| {
                let m = appearance::weighted_moments(tape, ids[0], ids[1], ids[2])?;
                project(tape, m)
            }),
            vec![fmap(rng), alpha, r],
        )
    })?;

    let chain: [(&'static str, Builder); 2] = [
        ("appearance.init_then_scores", |tape, ids, inst| {
            let r = regularizers(tape, ids[1])?;
            let theta = appearance::init_first_frame(tape, ids[0], &inst.mask, &r, &UpdateConfig::default(), &ModelOptions::default())?;
            let s = appearance::inference(tape, ids[0], &theta)?;
            project(tape, s)
        }),
        ("appearance.update_then_scores", |tape, ids, inst| {
            let r = regularizers(tape, ids[1])?;
            let opts = ModelOptions::default();
            let cfg = UpdateConfig {
                lambda: 0.5,
                ..Default::default()
            };
            let theta = appearance::init_first_frame(tape, ids[0], &inst.mask, &r, &cfg, &opts)?;
            let theta = appearance::update(tape, ids[2], ids[3], &theta, &r, &cfg, &opts)?;
            let s = appearance::inference(tape, ids[2], &theta)?;
            project(tape, s)
        }),
    ];
    for (path, build) in chain {
        run(path, &mut out, &mut rng, &mut |rng| {
            let inst = Instance {
                mask: random_mask(rng),
                model: ModelConfig::default(),
                sample: None,
            };
            let r_raw = uniform(rng, &[NUM_COMPONENTS, CHANNELS], -2.0, 0.0);
            let inputs = vec![fmap(rng), r_raw, fmap(rng), uniform(rng, &[SIDE, SIDE, 1], 0.05, 0.95)];
            boxed(Box::new(move |tape: &mut Tape, ids: &[NodeId]| build(tape, ids, &inst)), inputs)
        })?;
    }

    run("pipeline.frame_to_loss", &mut out, &mut rng, &mut |rng| {
        let net = SegNetConfig {
            seed: rng.gen(),
            ..small_net()
        };
        let cfg = GenConfig {
            height: SIDE * 4,
            width: SIDE * 4,
            frames: 2,
            min_objects: 2,
            max_objects: 2,
            min_radius: 4.0,
            max_radius: 6.0,
            max_speed: 1.0,
            ..Default::default()
        };
        let inst = Instance {
            mask: Tensor::zeros(&[1]),
            model: ModelConfig {
                net,
                flags: AblationFlags::default(),
                ..Default::default()
            },
            sample: Some(generate(rng.gen(), &cfg)?),
        };
        let params = ParamStore::init(&net)?;
        let inputs: Vec<Tensor> = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| if n.ends_with(".b") { uniform(rng, t.shape(), -0.1, 0.1) } else { t.clone() })
            .collect();
        boxed(
            Box::new(move |tape: &mut Tape, ids: &[NodeId]| {
                let s = inst.sample.as_ref().expect("sample");
                let net = BoundParams::from_nodes(tape, ids.to_vec(), &inst.model.net)?;
                let runner = Runner::with_net(tape, net, &inst.model)?;
                let (_, steps) = runner.run(tape, &s.frames, &s.masks[0])?;
                let (loss, _) = sequence_loss(tape, &steps, &s.masks[1..])?;
                Ok(loss)
            }),
            inputs,
        )
    })?;
    Ok(out)
}
