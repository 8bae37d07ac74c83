//! Synthetic segmentation tasks with exact masks: `blobs` (filled
//! ellipses) and `curves` (thin random-walk polylines), both drawn on a
//! textured noise background.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BLOB_FRACTION: f64 = 0.02;
pub const MAX_BLOB_FRACTION: f64 = 0.5;

const NOISE_STD: f64 = 0.05;
const TEXTURE_AMPLITUDE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    Blobs,
    Curves,
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Blobs => "blobs",
            SynthTask::Curves => "curves",
        })
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blobs" => Ok(SynthTask::Blobs),
            "curves" => Ok(SynthTask::Curves),
            other => Err(Error::config(
                "data.task",
                format!("unknown synthetic task `{}` (expected blobs or curves)", other),
            )),
        }
    }
}

/// One polyline with integer vertices and a square brush of `width` px.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Vec<(i32, i32)>,
    pub width: usize,
}

/// Pixels of the 8-connected digital line from `a` to `b`, both ends
/// included.
pub fn bresenham(a: (i32, i32), b: (i32, i32)) -> Vec<(i32, i32)> {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - x).abs(), -(b.1 - y).abs());
    let (sx, sy) = (if x < b.0 { 1 } else { -1 }, if y < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    let mut out = vec![(x, y)];
    while (x, y) != b {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        out.push((x, y));
    }
    out
}

/// Rasterizes one polyline into an `h x w` row-major mask. Points are
/// `(x, y)`.
pub fn rasterize_polyline(line: &Polyline, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let lo = -((line.width as i32 - 1) / 2);
    let hi = lo + line.width as i32 - 1;
    let mut stamp = |(x, y): (i32, i32)| {
        for dy in lo..=hi {
            for dx in lo..=hi {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                    mask[py as usize * w + px as usize] = true;
                }
            }
        }
    };
    match line.points.as_slice() {
        [] => {}
        [p] => stamp(*p),
        pts => {
            for seg in pts.windows(2) {
                for p in bresenham(seg[0], seg[1]) {
                    stamp(p);
                }
            }
        }
    }
    mask
}

fn reflect_coord(mut v: f64, max: f64, heading: &mut f64, horizontal: bool) -> f64 {
    for _ in 0..4 {
        if v < 0.0 {
            v = -v;
        } else if v > max {
            v = 2.0 * max - v;
        } else {
            break;
        }
        *heading = if horizontal { PI - *heading } else { -*heading };
    }
    v.clamp(0.0, max)
}

/// Draws 1-3 random-walk polylines of width 1-3 that reflect off the
/// image border.
pub fn random_polylines(rng: &mut impl Rng, h: usize, w: usize) -> Vec<Polyline> {
    let turn = Normal::new(0.0, 0.5).expect("valid std");
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            let mut x = rng.random_range(0.0..=xmax);
            let mut y = rng.random_range(0.0..=ymax);
            let mut heading = rng.random_range(0.0..2.0 * PI);
            let segments = rng.random_range(6..=12);
            let step_max = (h.min(w) as f64 / 5.0).max(4.0);
            let mut points = vec![(x.round() as i32, y.round() as i32)];
            for _ in 0..segments {
                heading += turn.sample(rng);
                let len = rng.random_range(step_max * 0.5..=step_max);
                x = reflect_coord(x + len * heading.cos(), xmax, &mut heading, true);
                y = reflect_coord(y + len * heading.sin(), ymax, &mut heading, false);
                points.push((x.round() as i32, y.round() as i32));
            }
            Polyline {
                points,
                width: rng.random_range(1..=3),
            }
        })
        .collect()
}

fn blob_mask(rng: &mut impl Rng, h: usize, w: usize) -> Vec<bool> {
    let (hf, wf) = (h as f64, w as f64);
    let max_axis = (hf.min(wf) / 4.0).max(2.0);
    loop {
        let mut mask = vec![false; h * w];
        for _ in 0..rng.random_range(1..=5) {
            let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
            let a = rng.random_range(2.0..=max_axis);
            let b = rng.random_range(2.0..=max_axis);
            let th: f64 = rng.random_range(0.0..PI);
            let (c, s) = (th.cos(), th.sin());
            for (i, m) in mask.iter_mut().enumerate() {
                let (px, py) = ((i % w) as f64 + 0.5 - cx, (i / w) as f64 + 0.5 - cy);
                let (u, v) = (c * px + s * py, -s * px + c * py);
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    *m = true;
                }
            }
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        if (MIN_BLOB_FRACTION..=MAX_BLOB_FRACTION).contains(&frac) {
            return mask;
        }
    }
}

/// Smooth per-channel texture plus white noise, with the foreground tinted
/// by a fixed per-image offset.
fn render(rng: &mut impl Rng, mask: &[bool], channels: usize, h: usize, w: usize) -> Tensor<f32> {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let contrast = rng.random_range(0.25..=0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        let base = rng.random_range(0.3..=0.7);
        let tint = contrast * rng.random_range(0.6..=1.0);
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.5..3.0) * 2.0 * PI / w as f64,
                    rng.random_range(0.5..3.0) * 2.0 * PI / h as f64,
                    rng.random_range(0.0..2.0 * PI),
                    TEXTURE_AMPLITUDE * rng.random_range(0.3..=1.0),
                ]
            })
            .collect();
        for (i, &fg) in mask.iter().enumerate() {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let tex: f64 = waves
                .iter()
                .map(|[fx, fy, ph, amp]| amp * (fx * x + fy * y + ph).sin())
                .sum();
            let v = base + tex + if fg { tint } else { 0.0 } + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(vec![channels, h, w], data).expect("sized by construction")
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Generates sample `index` of `split`. Each sample has its own random
/// stream, so a sample does not depend on how many others are generated.
pub fn generate_one(
    task: SynthTask,
    seed: u64,
    split: Split,
    index: usize,
    h: usize,
    w: usize,
    channels: usize,
) -> Result<Sample> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::config(
            "data.size",
            format!("synthetic images must be multiples of 16, got {}x{}", h, w),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_stream(split) << 40) | index as u64);
    let mask = match task {
        SynthTask::Blobs => blob_mask(&mut rng, h, w),
        SynthTask::Curves => {
            let mut mask = vec![false; h * w];
            for line in random_polylines(&mut rng, h, w) {
                for (m, r) in mask.iter_mut().zip(rasterize_polyline(&line, h, w)) {
                    *m |= r;
                }
            }
            mask
        }
    };
    let image = render(&mut rng, &mask, channels, h, w);
    let mask = Tensor::new(vec![1, h, w], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    Sample::new(image, mask, format!("{}_{}_{:05}", task, split, index))
}

/// `n` samples of `split`.
pub fn generate(
    task: SynthTask,
    seed: u64,
    split: Split,
    n: usize,
    h: usize,
    w: usize,
    channels: usize,
) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| generate_one(task, seed, split, i, h, w, channels))
        .collect()
}
