//! The compact U-Net: four pooling levels, channel width doubling after
//! every pool, transposed-convolution upsampling and skip concatenation.
//!
//! Levels are numbered `0..=4`. Encoder block `i < 4` runs at `1/2^i`
//! resolution with `base * 2^i` channels and is followed by a 2x2 pool; the
//! bottleneck (level 4) runs at `1/16` with `base * 16` channels. The
//! activation entering level `l` is `e_l` (the network input for `l = 0`,
//! otherwise the pooled output of encoder block `l - 1`); the activation
//! leaving decoder level `l` is `d_l`.

use rand::Rng;

use super::layers::{Conv2d, ConvBlock, Upsample};
use super::params::{Bound, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEPTH: usize = 4;

/// Channel schedule of a U-Net with `base` channels in its first block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channels {
    pub base: usize,
    pub input: usize,
}

impl Channels {
    /// Output width of encoder block `i` (`i == 4` is the bottleneck).
    pub fn block(&self, i: usize) -> usize {
        self.base << i
    }

    /// Channels of `e_l`.
    pub fn enc(&self, level: usize) -> usize {
        if level == 0 {
            self.input
        } else {
            self.block(level - 1)
        }
    }

    /// Channels of `d_l`.
    pub fn dec(&self, level: usize) -> usize {
        self.block(level)
    }
}

/// Spatial multiple required for an input entering at `level`.
pub fn spatial_multiple(level: usize) -> usize {
    1 << (DEPTH - level)
}

pub(crate) fn check_spatial(op: &'static str, dims: [usize; 4], level: usize) -> Result<()> {
    let m = spatial_multiple(level);
    let [_, _, h, w] = dims;
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        let pad_h = (m - h % m) % m;
        let pad_w = (m - w % m) % m;
        return Err(Error::shape(
            op,
            format!(
                "spatial size {}x{} must be a multiple of {}; pad by {} rows and {} columns (e.g. reflect padding)",
                h, w, m, pad_h, pad_w
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: Upsample,
    pub block: ConvBlock,
}

impl DecoderLevel {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        ch: &Channels,
        level: usize,
        out: usize,
        stages: usize,
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let width = ch.block(level);
        let up = Upsample::new(store, &format!("{prefix}up{level}"), ch.dec(level + 1), width, rng);
        let block = ConvBlock::new(
            store,
            &format!("{prefix}dec{level}"),
            2 * width,
            out,
            stages,
            final_relu,
            rng,
        );
        DecoderLevel { up, block }
    }

    /// Upsamples `below`, concatenates `[skip, upsampled]` and convolves.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        below: Var,
        skip: Var,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let up = self.up.forward(tape, p, below)?;
        let cat = tape.concat_channels(skip, up)?;
        match trace {
            Some(t) => self.block.forward_traced(tape, p, cat, t),
            None => self.block.forward(tape, p, cat),
        }
    }
}

/// Encoder blocks `l..4`, bottleneck and decoder levels `4..l` with their
/// internal skips. Maps `e_l` to `d_l` at unchanged resolution.
#[derive(Clone, Debug)]
pub struct Segment {
    pub level: usize,
    pub encoders: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
    /// Ordered from the deepest level up to `level`.
    pub decoders: Vec<DecoderLevel>,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct SegmentSpec {
    pub level: usize,
    pub channels: Channels,
    pub stages: usize,
    /// Overrides the channel count of the final block (defaults to `dec(level)`).
    pub out_channels: Option<usize>,
    pub final_relu: bool,
}

impl Segment {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &SegmentSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let SegmentSpec {
            level,
            channels: ch,
            stages,
            out_channels,
            final_relu,
        } = *spec;
        if level > DEPTH {
            return Err(Error::config(
                "model.level",
                format!("recurrence level must be in 0..={}, got {}", DEPTH, level),
            ));
        }
        let out = out_channels.unwrap_or(ch.dec(level));
        let encoders = (level..DEPTH)
            .map(|i| {
                ConvBlock::new(
                    store,
                    &format!("{prefix}enc{i}"),
                    ch.enc(i),
                    ch.block(i),
                    stages,
                    true,
                    rng,
                )
            })
            .collect();
        let deepest = level == DEPTH;
        let bottleneck = ConvBlock::new(
            store,
            &format!("{prefix}bottleneck"),
            ch.enc(DEPTH),
            if deepest { out } else { ch.block(DEPTH) },
            stages,
            !deepest || final_relu,
            rng,
        );
        let decoders = (level..DEPTH)
            .rev()
            .map(|i| {
                let last = i == level;
                DecoderLevel::new(
                    store,
                    prefix,
                    &ch,
                    i,
                    if last { out } else { ch.block(i) },
                    stages,
                    !last || final_relu,
                    rng,
                )
            })
            .collect();
        Ok(Segment {
            level,
            encoders,
            bottleneck,
            decoders,
            in_channels: ch.enc(level),
            out_channels: out,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, e: Var) -> Result<Var> {
        self.run(tape, p, e, None)
    }

    /// Forward pass that also collects every convolution pre-activation.
    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, e: Var, trace: &mut Vec<Var>) -> Result<Var> {
        self.run(tape, p, e, Some(trace))
    }

    fn run<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, e: Var, mut trace: Option<&mut Vec<Var>>) -> Result<Var> {
        let dims = tape.value(e).dims4("segment_forward")?;
        check_spatial("segment_forward", dims, self.level)?;
        if dims[1] != self.in_channels {
            return Err(Error::shape(
                "segment_forward",
                format!(
                    "level-{} segment expects {} input channels, got {}",
                    self.level, self.in_channels, dims[1]
                ),
            ));
        }
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut x = e;
        for enc in &self.encoders {
            x = match trace.as_deref_mut() {
                Some(t) => enc.forward_traced(tape, p, x, t)?,
                None => enc.forward(tape, p, x)?,
            };
            skips.push(x);
            x = tape.maxpool2d(x)?;
        }
        x = match trace.as_deref_mut() {
            Some(t) => self.bottleneck.forward_traced(tape, p, x, t)?,
            None => self.bottleneck.forward(tape, p, x)?,
        };
        for (dec, &skip) in self.decoders.iter().zip(skips.iter().rev()) {
            x = dec.forward(tape, p, x, skip, trace.as_deref_mut())?;
        }
        Ok(x)
    }

    /// The block producing the segment output.
    pub fn output_block(&self) -> &ConvBlock {
        self.decoders.last().map(|d| &d.block).unwrap_or(&self.bottleneck)
    }
}

/// Encoder levels `0..l` and decoder levels `l..0` around an inner module,
/// plus the 1x1 output head.
#[derive(Clone, Debug)]
pub struct OuterUNet {
    pub level: usize,
    pub encoders: Vec<ConvBlock>,
    /// Ordered from `level - 1` up to 0.
    pub decoders: Vec<DecoderLevel>,
    pub head: Conv2d,
    pub channels: Channels,
}

/// Skips and the inner activation produced by the outer encoder.
pub struct Encoded {
    pub skips: Vec<Var>,
    pub inner: Var,
}

impl OuterUNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        channels: Channels,
        level: usize,
        stages: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let encoders = (0..level)
            .map(|i| {
                ConvBlock::new(
                    store,
                    &format!("enc{i}"),
                    channels.enc(i),
                    channels.block(i),
                    stages,
                    true,
                    rng,
                )
            })
            .collect();
        let decoders = (0..level)
            .rev()
            .map(|i| DecoderLevel::new(store, "", &channels, i, channels.block(i), stages, true, rng))
            .collect();
        let head = Conv2d::new(store, "head", channels.dec(0), n_classes, 1, 1.0, rng);
        OuterUNet {
            level,
            encoders,
            decoders,
            head,
            channels,
        }
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Encoded> {
        let dims = tape.value(x).dims4("backbone_forward")?;
        check_spatial("backbone_forward", dims, 0)?;
        if dims[1] != self.channels.input {
            return Err(Error::shape(
                "backbone_forward",
                format!(
                    "network expects {} input channels, got {}",
                    self.channels.input, dims[1]
                ),
            ));
        }
        let mut skips = Vec::with_capacity(self.level);
        let mut h = x;
        for enc in &self.encoders {
            h = enc.forward(tape, p, h)?;
            skips.push(h);
            h = tape.maxpool2d(h)?;
        }
        Ok(Encoded { skips, inner: h })
    }

    /// Runs the outer decoder from `d_level` and returns the `dec(0)`-channel
    /// features in front of the head.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, inner: Var, skips: &[Var]) -> Result<Var> {
        let mut h = inner;
        for (dec, &skip) in self.decoders.iter().zip(skips.iter().rev()) {
            h = dec.forward(tape, p, h, skip, None)?;
        }
        Ok(h)
    }

    pub fn head<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var> {
        self.head.forward(tape, p, features)
    }
}

/// Plain U-Net: a level-0 segment followed by the 1x1 head.
#[derive(Clone, Debug)]
pub struct UNetBackbone {
    pub body: Segment,
    pub head: Conv2d,
}

impl UNetBackbone {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        channels: Channels,
        stages: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let body = Segment::new(
            store,
            "",
            &SegmentSpec {
                level: 0,
                channels,
                stages,
                out_channels: None,
                final_relu: true,
            },
            rng,
        )?;
        let head = Conv2d::new(store, "head", channels.dec(0), n_classes, 1, 1.0, rng);
        Ok(UNetBackbone { body, head })
    }

    /// Backbone features in front of the head.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let dims = tape.value(x).dims4("backbone_forward")?;
        check_spatial("backbone_forward", dims, 0)?;
        self.body.forward(tape, p, x)
    }

    /// Logits, no activation applied.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.features(tape, p, x)?;
        self.head.forward(tape, p, f)
    }
}
