//! Parameterized layers. Each layer owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound to a tape per forward pass.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::GROUP_NORM_EPS;
use crate::tensor::{Real, Tensor};

/// Largest group count not above 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in scaled normal init with gain `gain`; zero bias.
    /// Padding is `kernel / 2`, which keeps the spatial size at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![cout, cin, kernel, kernel], (gain / fan_in).sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv2d {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.padding)
    }
}

/// 2x2, stride-2 learnable upsampling.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        // Each output pixel sees exactly `cin` weights at stride 2.
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![cin, cout, 2, 2], (2.0 / cin as f64).sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Upsample { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.var(self.weight), p.var(self.bias), 2, 0)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let scale = store.add(format!("{name}.scale"), Tensor::full(vec![channels], T::one()));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(vec![channels]));
        GroupNorm {
            scale,
            shift,
            groups: group_count(channels),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, self.groups, p.var(self.scale), p.var(self.shift), GROUP_NORM_EPS)
    }
}

/// conv -> group norm -> optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub relu: bool,
}

impl ConvStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        ConvStage {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, gain, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout),
            relu,
        }
    }

    /// Returns `(pre_activation, output)`; the pre-activation is the raw
    /// convolution output.
    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let pre = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, pre)?;
        Ok((pre, if self.relu { tape.relu(y) } else { y }))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x)?.1)
    }
}

/// A stack of 3x3 [`ConvStage`]s mapping `cin` to `cout` channels at fixed
/// resolution.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub stages: Vec<ConvStage>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBlock {
    /// `final_relu = false` leaves the last stage linear (used where the block
    /// output feeds a sigmoid/tanh gate).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stages: usize,
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let stages = (0..stages.max(1))
            .map(|i| {
                let last = i + 1 == stages.max(1);
                ConvStage::new(
                    store,
                    &format!("{name}.s{i}"),
                    if i == 0 { cin } else { cout },
                    cout,
                    3,
                    // Later stages read a normalized, rectified signal with
                    // half the second moment of a unit-variance input.
                    if i == 0 { 1.0 } else { 2.0 },
                    !last || final_relu,
                    rng,
                )
            })
            .collect();
        ConvBlock {
            stages,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.stages.iter().try_fold(x, |h, s| s.forward(tape, p, h))
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, trace: &mut Vec<Var>) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            let (pre, out) = s.forward_traced(tape, p, h)?;
            trace.push(pre);
            h = out;
        }
        Ok(h)
    }

    /// Shift of the last group norm; acts as the output bias of the block.
    pub fn output_shift(&self) -> ParamId {
        self.stages.last().expect("at least one stage").norm.shift
    }

    pub fn output_scale(&self) -> ParamId {
        self.stages.last().expect("at least one stage").norm.scale
    }
}
