//! The recurrence driver: threads the predicted mask and the hidden state
//! through `N` iterations of a shared-parameter network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use super::gates::{ConvGru, GatedUnit};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Channels, OuterUNet, ParamStore, UNetBackbone, DEPTH};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub enum Architecture {
    /// Plain U-Net; also used by the mask-feedback-only baseline.
    Plain(UNetBackbone),
    /// Outer encoder/decoder around a gated unit at `level`.
    Gated { outer: OuterUNet, unit: GatedUnit },
    /// ConvGRU in place of the bottleneck.
    Middle { outer: OuterUNet, gru: ConvGru },
    /// ConvGRU between the backbone features and the head.
    Last { backbone: UNetBackbone, gru: ConvGru },
}

/// A model: configuration, parameters and the layer graph that uses them.
#[derive(Clone, Debug)]
pub struct RecurrentUNet<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub arch: Architecture,
}

impl<T: Real> RecurrentUNet<T> {
    /// Builds and initializes a model. Initialization is a pure function of
    /// `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = Channels {
            base: config.base_channels,
            input: config.input_channels(),
        };
        let stages = config.block_stages;
        let k = config.n_classes;
        let arch = match config.variant {
            Variant::UNet | Variant::RecSimple => {
                Architecture::Plain(UNetBackbone::new(&mut store, ch, stages, k, &mut rng)?)
            }
            Variant::Sru | Variant::Dru => {
                let outer = OuterUNet::new(&mut store, ch, config.level, stages, k, &mut rng);
                let unit = GatedUnit::new(
                    &mut store,
                    ch,
                    config.level,
                    stages,
                    config.variant == Variant::Dru,
                    &mut rng,
                )?;
                Architecture::Gated { outer, unit }
            }
            Variant::RecMiddle => {
                let outer = OuterUNet::new(&mut store, ch, DEPTH, stages, k, &mut rng);
                let gru = ConvGru::new(&mut store, "rec.gru", ch.enc(DEPTH), ch.dec(DEPTH), &mut rng);
                Architecture::Middle { outer, gru }
            }
            Variant::RecLast => {
                let backbone = UNetBackbone::new(&mut store, ch, stages, k, &mut rng)?;
                // Hidden width equals the backbone feature width, so the
                // head reads the GRU state in place of the features.
                let gru = ConvGru::new(&mut store, "rec.gru", ch.dec(0), ch.dec(0), &mut rng);
                Architecture::Last { backbone, gru }
            }
        };
        Ok(RecurrentUNet {
            config,
            params: store,
            arch,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn gated_unit(&self) -> Option<&GatedUnit> {
        match &self.arch {
            Architecture::Gated { unit, .. } => Some(unit),
            _ => None,
        }
    }

    /// Maps logits to the probability map that is fed back as `s_t`.
    pub fn feedback(&self, tape: &mut Tape<T>, logits: Var) -> Result<Var> {
        if self.config.n_classes == 1 {
            Ok(tape.sigmoid(logits))
        } else {
            tape.softmax_channels(logits)
        }
    }

    /// Runs `iterations` recurrence steps on the image batch `x` and returns
    /// the logits of every step. `bound` must come from binding
    /// `self.params` onto `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, iterations: usize) -> Result<Vec<Var>> {
        if iterations == 0 {
            return Err(Error::config("model.iterations", "must be at least 1"));
        }
        let dims = tape.value(x).dims4("recurrent_forward")?;
        if dims[1] != self.config.image_channels {
            return Err(Error::shape(
                "recurrent_forward",
                format!(
                    "model expects {} image channels, got {}",
                    self.config.image_channels, dims[1]
                ),
            ));
        }
        let [n, _, h, w] = dims;
        let fb = self.config.feedback_channels();
        let mut mask = tape.constant(Tensor::zeros(vec![n, fb, h, w]));
        let mut hidden: Option<Var> = None;
        let mut out = Vec::with_capacity(iterations);

        if self.config.variant == Variant::UNet {
            let Architecture::Plain(net) = &self.arch else {
                unreachable!("unet variant builds a plain backbone")
            };
            let logits = net.forward(tape, p, x)?;
            check_finite(tape, logits, 1)?;
            return Ok(vec![logits; iterations]);
        }

        for t in 1..=iterations {
            let input = if self.config.mask_feedback {
                tape.concat_channels(x, mask)?
            } else {
                x
            };
            let logits = match &self.arch {
                Architecture::Plain(net) => net.forward(tape, p, input)?,
                Architecture::Gated { outer, unit } => {
                    let enc = outer.encode(tape, p, input)?;
                    let h_prev = match hidden {
                        Some(v) => v,
                        None => {
                            let e_dims = tape.value(enc.inner).dims4("recurrent_forward")?;
                            tape.constant(unit.initial_state(e_dims))
                        }
                    };
                    let (d, h_next) = unit.step(tape, p, enc.inner, h_prev)?;
                    hidden = Some(h_next);
                    let f = outer.decode(tape, p, d, &enc.skips)?;
                    outer.head(tape, p, f)?
                }
                Architecture::Middle { outer, gru } => {
                    let enc = outer.encode(tape, p, input)?;
                    let h_prev = match hidden {
                        Some(v) => v,
                        None => {
                            let e_dims = tape.value(enc.inner).dims4("recurrent_forward")?;
                            tape.constant(gru.initial_state(e_dims))
                        }
                    };
                    let h_next = gru.step(tape, p, enc.inner, h_prev)?;
                    hidden = Some(h_next);
                    let f = outer.decode(tape, p, h_next, &enc.skips)?;
                    outer.head(tape, p, f)?
                }
                Architecture::Last { backbone, gru } => {
                    let f = backbone.features(tape, p, input)?;
                    let h_prev = match hidden {
                        Some(v) => v,
                        None => {
                            let f_dims = tape.value(f).dims4("recurrent_forward")?;
                            tape.constant(gru.initial_state(f_dims))
                        }
                    };
                    let h_next = gru.step(tape, p, f, h_prev)?;
                    hidden = Some(h_next);
                    backbone.head.forward(tape, p, h_next)?
                }
            };
            check_finite(tape, logits, t)?;
            if let Some(hv) = hidden {
                if !tape.value(hv).is_finite() {
                    return Err(Error::NonFinite {
                        what: "hidden state".into(),
                        iteration: t,
                    });
                }
            }
            out.push(logits);
            if t < iterations && self.config.mask_feedback {
                mask = self.feedback(tape, logits)?;
            }
        }
        Ok(out)
    }

    /// Inference without gradient tracking; returns the logits of each step.
    pub fn predict(&self, x: &Tensor<T>, iterations: usize) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let logits = self.forward(&mut tape, &p, xv, iterations)?;
        Ok(logits.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Per-step foreground probability maps `[N, 1, H, W]`.
    pub fn predict_proba(&self, x: &Tensor<T>, iterations: usize) -> Result<Vec<Tensor<T>>> {
        self.predict(x, iterations)?
            .into_iter()
            .map(|l| foreground_probability(&l, self.config.n_classes))
            .collect()
    }
}

/// Foreground probability from logits: sigmoid for one logit channel, the
/// second softmax channel for two classes.
pub fn foreground_probability<T: Real>(logits: &Tensor<T>, n_classes: usize) -> Result<Tensor<T>> {
    match n_classes {
        1 => Ok(logits.map(|v| T::from_f64_lossy(crate::ops::sigmoid(v.as_f64())))),
        2 => crate::ops::softmax_channels(logits)?.slice_channels(1, 1),
        k => Err(Error::config(
            "model.n_classes",
            format!("binary metrics need 1 or 2 classes, model has {}", k),
        )),
    }
}

fn check_finite<T: Real>(tape: &Tape<T>, v: Var, iteration: usize) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "logits".into(),
            iteration,
        })
    }
}
