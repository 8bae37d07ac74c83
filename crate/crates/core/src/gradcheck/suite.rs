//! The finite-difference suite: every differentiable primitive plus one
//! whole recurrent model, checked over many seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, GradCheckOptions};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::Bound;
use crate::recurrent::{ModelConfig, RecurrentUNet};
use crate::tensor::Tensor;
use crate::train::{iteration_weights, recurrent_loss};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: u64 = 20;

/// Coordinates probed per tensor in the whole-model check.
const MODEL_COORDS: usize = 2;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub seeds: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
type Body = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// One primitive under test: random inputs and the op applied to them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Inputs,
    pub body: Body,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC0FFEE ^ seed)
}

fn randn(shape: &[usize], std: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, r)
}

/// Soft targets for the cross-entropy case; a fixed function of the shape so
/// they stay constant while the logits are perturbed.
fn soft_target(shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7))
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d 3x3",
            inputs: |r| {
                vec![
                    randn(&[2, 3, 8, 8], 1.0, r),
                    randn(&[4, 3, 3, 3], 0.5, r),
                    randn(&[4], 0.5, r),
                ]
            },
            body: |t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
        },
        OpCase {
            name: "conv2d stride 2",
            inputs: |r| {
                vec![
                    randn(&[2, 2, 7, 7], 1.0, r),
                    randn(&[3, 2, 3, 3], 0.5, r),
                    randn(&[3], 0.5, r),
                ]
            },
            body: |t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
        },
        OpCase {
            name: "conv2d 1x1",
            inputs: |r| {
                vec![
                    randn(&[2, 3, 4, 4], 1.0, r),
                    randn(&[5, 3, 1, 1], 0.5, r),
                    randn(&[5], 0.5, r),
                ]
            },
            body: |t, v| t.conv2d(v[0], v[1], v[2], 1, 0),
        },
        OpCase {
            name: "conv_transpose2d 2x2",
            inputs: |r| {
                vec![
                    randn(&[2, 3, 4, 4], 1.0, r),
                    randn(&[3, 2, 2, 2], 0.5, r),
                    randn(&[2], 0.5, r),
                ]
            },
            body: |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 0),
        },
        OpCase {
            name: "conv_transpose2d 3x3 pad 1",
            inputs: |r| {
                vec![
                    randn(&[1, 2, 4, 4], 1.0, r),
                    randn(&[2, 3, 3, 3], 0.5, r),
                    randn(&[3], 0.5, r),
                ]
            },
            body: |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1),
        },
        OpCase {
            name: "maxpool2d",
            inputs: |r| vec![randn(&[1, 2, 6, 6], 1.0, r)],
            body: |t, v| t.maxpool2d(v[0]),
        },
        OpCase {
            name: "group_norm",
            inputs: |r| vec![randn(&[2, 8, 4, 4], 2.0, r), randn(&[8], 1.0, r), randn(&[8], 1.0, r)],
            body: |t, v| t.group_norm(v[0], 4, v[1], v[2], 1e-5),
        },
        OpCase {
            name: "relu",
            inputs: |r| vec![randn(&[2, 3, 4, 4], 1.0, r)],
            body: |t, v| Ok(t.relu(v[0])),
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| vec![randn(&[2, 3, 4, 4], 2.0, r)],
            body: |t, v| Ok(t.sigmoid(v[0])),
        },
        OpCase {
            name: "tanh",
            inputs: |r| vec![randn(&[2, 3, 4, 4], 2.0, r)],
            body: |t, v| Ok(t.tanh(v[0])),
        },
        OpCase {
            name: "softmax_channels",
            inputs: |r| vec![randn(&[2, 3, 3, 3], 2.0, r)],
            body: |t, v| t.softmax_channels(v[0]),
        },
        OpCase {
            name: "add, mul, scale",
            inputs: |r| vec![randn(&[2, 3, 3, 3], 1.0, r), randn(&[2, 3, 3, 3], 1.0, r)],
            body: |t, v| {
                let p = t.mul(v[0], v[1])?;
                let s = t.add(p, v[0])?;
                Ok(t.scale(s, 0.75))
            },
        },
        OpCase {
            name: "affine_blend",
            inputs: |r| {
                vec![
                    randn(&[2, 3, 3, 3], 1.0, r),
                    randn(&[2, 3, 3, 3], 1.0, r),
                    randn(&[2, 3, 3, 3], 1.0, r),
                ]
            },
            body: |t, v| t.affine_blend(v[0], v[1], v[2]),
        },
        OpCase {
            name: "concat and slice channels",
            inputs: |r| vec![randn(&[2, 3, 4, 4], 1.0, r), randn(&[2, 1, 4, 4], 1.0, r)],
            body: |t, v| {
                let c = t.concat_channels(v[0], v[1])?;
                let s = t.slice_channels(c, 1, 3)?;
                t.concat_channels(s, c)
            },
        },
        OpCase {
            name: "bce_with_logits",
            inputs: |r| vec![randn(&[2, 1, 4, 4], 3.0, r)],
            body: |t, v| {
                let target = soft_target(t.value(v[0]).shape());
                t.bce_with_logits(v[0], &target)
            },
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: |r| vec![randn(&[2, 3, 3, 3], 2.0, r)],
            body: |t, v| {
                let classes: Vec<usize> = (0..18).map(|i| (i * 7) % 3).collect();
                t.softmax_cross_entropy(v[0], &classes)
            },
        },
    ]
}

/// Reduces an output to a scalar with fixed random weights so every output
/// element contributes.
fn project(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = t.value(out).shape().to_vec();
    let w = Tensor::randn(shape, 1.0, &mut rng(seed + 1000));
    t.dot_const(out, &w)
}

pub fn run_op_case(case: &OpCase, seeds: u64) -> Result<CaseResult> {
    let mut res = CaseResult {
        name: case.name.to_string(),
        seeds,
        checked: 0,
        max_rel_err: 0.0,
        tolerance: OP_TOLERANCE,
    };
    for seed in 0..seeds {
        let xs = (case.inputs)(&mut rng(seed));
        let report = check_gradients(
            |t, v| {
                let out = (case.body)(t, v)?;
                project(t, out, seed)
            },
            &xs,
            &GradCheckOptions {
                seed,
                ..Default::default()
            },
        )?;
        res.checked += report.checked;
        res.max_rel_err = res.max_rel_err.max(report.max_rel_err);
    }
    Ok(res)
}

/// Checks the iteration-weighted loss of a whole DRU(3) model with `N = 3`
/// on a 16x16 image. Two coordinates of the image and of every parameter
/// tensor are probed per seed.
pub fn run_model_check(seeds: u64) -> Result<CaseResult> {
    let mut res = CaseResult {
        name: "DRU(3) whole model, 16x16".to_string(),
        seeds,
        checked: 0,
        max_rel_err: 0.0,
        tolerance: MODEL_TOLERANCE,
    };
    let weights = iteration_weights(3, 0.4)?;
    for seed in 0..seeds {
        let model = RecurrentUNet::<f64>::new(ModelConfig::dru(3).with_iterations(3), seed)?;
        let mut r = rng(seed);
        let x = Tensor::rand_uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut r);
        let target = Tensor::from_fn(vec![1, 1, 16, 16], |i| ((i / 16 + i % 16) % 3 == 0) as u8 as f64);
        let mut inputs = vec![x];
        inputs.extend(model.params.iter().map(|p| p.value.clone()));
        let report = check_gradients(
            |t, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let logits = model.forward(t, &bound, v[0], 3)?;
                Ok(recurrent_loss(t, &logits, &target, &weights)?.0)
            },
            &inputs,
            &GradCheckOptions {
                seed,
                coords_per_input: Some(MODEL_COORDS),
                ..Default::default()
            },
        )?;
        res.checked += report.checked;
        res.max_rel_err = res.max_rel_err.max(report.max_rel_err);
    }
    Ok(res)
}

/// Every op case followed by the whole-model check.
pub fn run_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = op_cases()
        .iter()
        .map(|c| run_op_case(c, seeds))
        .collect::<Result<Vec<_>>>()?;
    out.push(run_model_check(seeds)?);
    Ok(out)
}
