//! Recurrent cells: the encoder-decoder gated units (dual and single gate)
//! and the plain convolutional GRU used by the baselines.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Channels, Conv2d, ConvStage, ParamId, ParamStore, Segment, SegmentSpec};
use crate::tensor::{Real, Tensor};

/// Initial value of the update-gate bias.
pub const UPDATE_GATE_BIAS: f64 = 1.0;

fn check_gate<T: Real>(tape: &Tape<T>, gate: &'static str, g: Var, operand: Var, operand_name: &str) -> Result<()> {
    let (gs, os) = (tape.value(g).shape(), tape.value(operand).shape());
    if gs != os {
        return Err(Error::shape(
            gate,
            format!("gate output {:?} does not match {} {:?}", gs, operand_name, os),
        ));
    }
    Ok(())
}

/// Gated recurrent unit whose gate functions are encoder-decoder segments
/// spanning levels `level..4`.
///
/// `z = sigmoid(f_z(e))`, `r = sigmoid(f_r(e))` (dual only),
/// `h_cand = tanh(f_h(r * e))`, `h = z * h_prev + (1 - z) * h_cand`,
/// `d = f_s(h)`.
#[derive(Clone, Debug)]
pub struct GatedUnit {
    pub level: usize,
    pub fz: Segment,
    pub fr: Option<Segment>,
    pub fh: Segment,
    pub fs: ConvStage,
    pub in_channels: usize,
    pub hidden_channels: usize,
}

impl GatedUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        channels: Channels,
        level: usize,
        stages: usize,
        dual: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = |out: usize| SegmentSpec {
            level,
            channels,
            stages,
            out_channels: Some(out),
            final_relu: false,
        };
        let (cin, hid) = (channels.enc(level), channels.dec(level));
        let fz = Segment::new(store, "rec.fz.", &spec(hid), rng)?;
        let shift = fz.output_block().output_shift();
        store
            .value_mut(shift)
            .data_mut()
            .fill(T::from_f64_lossy(UPDATE_GATE_BIAS));
        let fr = if dual {
            Some(Segment::new(store, "rec.fr.", &spec(cin), rng)?)
        } else {
            None
        };
        let fh = Segment::new(store, "rec.fh.", &spec(hid), rng)?;
        let fs = ConvStage::new(store, "rec.fs", hid, hid, 1, 1.0, true, rng);
        Ok(GatedUnit {
            level,
            fz,
            fr,
            fh,
            fs,
            in_channels: cin,
            hidden_channels: hid,
        })
    }

    pub fn is_dual(&self) -> bool {
        self.fr.is_some()
    }

    /// Bias parameter that drives the update gate.
    pub fn update_gate_shift(&self) -> ParamId {
        self.fz.output_block().output_shift()
    }

    /// Bias parameter that drives the reset tensor, if present.
    pub fn reset_gate_shift(&self) -> Option<ParamId> {
        self.fr.as_ref().map(|s| s.output_block().output_shift())
    }

    /// Zero hidden state matching an `e_l` of shape `e_dims`.
    pub fn initial_state<T: Real>(&self, e_dims: [usize; 4]) -> Tensor<T> {
        let [n, _, h, w] = e_dims;
        Tensor::zeros(vec![n, self.hidden_channels, h, w])
    }

    /// One recurrence step. Returns `(d_l, h_next)`.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, e: Var, h_prev: Var) -> Result<(Var, Var)> {
        let z_pre = self.fz.forward(tape, p, e)?;
        let z = tape.sigmoid(z_pre);
        check_gate(tape, "update_gate", z, h_prev, "hidden state")?;
        let gated = match &self.fr {
            Some(fr) => {
                let r_pre = fr.forward(tape, p, e)?;
                let r = tape.sigmoid(r_pre);
                check_gate(tape, "reset_gate", r, e, "input")?;
                tape.mul(r, e)?
            }
            None => e,
        };
        let cand_pre = self.fh.forward(tape, p, gated)?;
        let cand = tape.tanh(cand_pre);
        check_gate(tape, "candidate", cand, h_prev, "hidden state")?;
        let h = tape.affine_blend(z, h_prev, cand)?;
        let d = self.fs.forward(tape, p, h)?;
        Ok((d, h))
    }
}

/// Convolutional GRU with 3x3 gates:
/// `[z, r] = sigmoid(W_g * [x, h])`, `c = tanh(W_c * [x, r * h])`,
/// `h' = z * h + (1 - z) * c`.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub gates: Conv2d,
    pub candidate: Conv2d,
    pub in_channels: usize,
    pub hidden_channels: usize,
}

impl ConvGru {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let gates = Conv2d::new(store, &format!("{name}.gates"), cin + hidden, 2 * hidden, 3, 1.0, rng);
        let bias = store.value_mut(gates.bias);
        bias.data_mut()[..hidden].fill(T::from_f64_lossy(UPDATE_GATE_BIAS));
        let candidate = Conv2d::new(store, &format!("{name}.candidate"), cin + hidden, hidden, 3, 1.0, rng);
        ConvGru {
            gates,
            candidate,
            in_channels: cin,
            hidden_channels: hidden,
        }
    }

    pub fn initial_state<T: Real>(&self, x_dims: [usize; 4]) -> Tensor<T> {
        let [n, _, h, w] = x_dims;
        Tensor::zeros(vec![n, self.hidden_channels, h, w])
    }

    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat_channels(x, h)?;
        let g_pre = self.gates.forward(tape, p, xh)?;
        let g = tape.sigmoid(g_pre);
        let z = tape.slice_channels(g, 0, self.hidden_channels)?;
        let r = tape.slice_channels(g, self.hidden_channels, self.hidden_channels)?;
        check_gate(tape, "gru_update_gate", z, h, "hidden state")?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat_channels(x, rh)?;
        let c_pre = self.candidate.forward(tape, p, xrh)?;
        let c = tape.tanh(c_pre);
        tape.affine_blend(z, h, c)
    }
}
