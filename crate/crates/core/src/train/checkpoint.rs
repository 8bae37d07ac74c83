//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! "RUNT"  u32 version
//! u32 len, model config as INI text
//! u32 element width in bytes (4 or 8)
//! u64 epoch, u64 optimizer step, f64 best validation metric
//! 32 bytes RNG seed, u64 RNG stream, u128 RNG word position
//! u32 record count, then per record:
//!     u32 len, name (UTF-8), u32 ndim, ndim x u64 extent, payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Parameter records come first in model order, followed by the Adam
//! moments named `adam.m:<param>` and `adam.v:<param>`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use crate::error::{Error, Result};
use crate::ini::Ini;
use crate::nn::ParamStore;
use crate::recurrent::{ModelConfig, RecurrentUNet};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"RUNT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m:";
const ADAM_V: &str = "adam.v:";

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub element_bytes: u32,
    pub epoch: u64,
    pub optimizer_step: u64,
    pub best_metric: f64,
    pub rng: ChaCha8Rng,
    pub records: Vec<(String, Tensor<T>)>,
}

/// Training progress stored next to the parameters.
#[derive(Clone, Debug)]
pub struct TrainingState<'a, T> {
    pub epoch: u64,
    pub best_metric: f64,
    pub rng: &'a ChaCha8Rng,
    pub optimizer: Option<&'a Adam<T>>,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Real>(b: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(b, name);
    put_u32(b, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(b, d as u64);
    }
    for &v in t.data() {
        v.write_le(b);
    }
}

/// Serializes a model (and optional training state) to bytes.
pub fn encode_checkpoint<T: Real>(model: &RecurrentUNet<T>, state: Option<&TrainingState<'_, T>>) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    put_u32(&mut b, CHECKPOINT_VERSION);
    let cfg = Ini {
        sections: vec![model.config.to_section()],
    }
    .render();
    put_str(&mut b, &cfg);
    put_u32(&mut b, T::BYTES as u32);
    let default_rng = ChaCha8Rng::seed_from_u64(0);
    let (epoch, best, rng, opt) = match state {
        Some(s) => (s.epoch, s.best_metric, s.rng, s.optimizer),
        None => (0, f64::NEG_INFINITY, &default_rng, None),
    };
    put_u64(&mut b, epoch);
    put_u64(&mut b, opt.map(|o| o.step).unwrap_or(0));
    b.extend_from_slice(&best.to_le_bytes());
    b.extend_from_slice(&rng.get_seed());
    put_u64(&mut b, rng.get_stream());
    b.extend_from_slice(&rng.get_word_pos().to_le_bytes());

    let n_opt = opt.map(|o| 2 * o.m.len()).unwrap_or(0);
    put_u32(&mut b, (model.params.len() + n_opt) as u32);
    for p in model.params.iter() {
        put_tensor(&mut b, &p.name, &p.value);
    }
    if let Some(o) = opt {
        for (p, m) in model.params.iter().zip(&o.m) {
            put_tensor(&mut b, &format!("{ADAM_M}{}", p.name), m);
        }
        for (p, v) in model.params.iter().zip(&o.v) {
            put_tensor(&mut b, &format!("{ADAM_V}{}", p.name), v);
        }
    }
    let crc = crc32fast::hash(&b);
    put_u32(&mut b, crc);
    b
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &RecurrentUNet<T>,
    state: Option<&TrainingState<'_, T>>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {} at byte {}",
                what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Corrupt(format!("{} is not valid UTF-8", what)))
    }
}

/// Parses checkpoint bytes; payloads are converted to `T`.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing RUNT magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Corrupt("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch (file truncated or modified)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let cfg_text = r.string("model config")?;
    let ini = Ini::parse(&cfg_text)?;
    let section = ini
        .section("model")
        .ok_or_else(|| Error::Corrupt("model config section missing".into()))?;
    let config = ModelConfig::from_section(section)?;
    let width = r.u32("element width")?;
    if width != 4 && width != 8 {
        return Err(Error::Corrupt(format!("unsupported element width {}", width)));
    }
    let epoch = r.u64("epoch")?;
    let optimizer_step = r.u64("optimizer step")?;
    let best_metric = f64::from_le_bytes(r.take(8, "best metric")?.try_into().unwrap());
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("record name")?;
        let ndim = r.u32("record rank")? as usize;
        if ndim > 8 {
            return Err(Error::Corrupt(format!("record `{}` has rank {}", name, ndim)));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("record extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("record `{}` is too large", name)))?;
        let raw = r.take(
            numel
                .checked_mul(width as usize)
                .ok_or_else(|| Error::Corrupt(format!("record `{}` is too large", name)))?,
            "record payload",
        )?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect()
        };
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last record",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        element_bytes: width,
        epoch,
        optimizer_step,
        best_metric,
        rng,
        records,
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl<T: Real> Checkpoint<T> {
    fn params(&self) -> impl Iterator<Item = &(String, Tensor<T>)> {
        self.records
            .iter()
            .filter(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V))
    }

    /// Copies the stored parameters into `store`, which must hold exactly
    /// the same names and shapes in the same order.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        let stored: Vec<_> = self.params().collect();
        for (i, p) in store.iter_mut().enumerate() {
            let Some((name, t)) = stored.get(i) else {
                return Err(Error::ParamMismatch {
                    name: p.name.clone(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if *name != p.name {
                return Err(Error::ParamMismatch {
                    name: p.name.clone(),
                    detail: format!("checkpoint has `{}` at this position", name),
                });
            }
            if t.shape() != p.value.shape() {
                return Err(Error::ParamMismatch {
                    name: p.name.clone(),
                    detail: format!("checkpoint shape {:?}, model shape {:?}", t.shape(), p.value.shape()),
                });
            }
        }
        if let Some((name, _)) = stored.get(store.len()) {
            return Err(Error::ParamMismatch {
                name: name.clone(),
                detail: "not present in the model".into(),
            });
        }
        for (p, (_, t)) in store.iter_mut().zip(stored) {
            p.value = t.clone();
        }
        Ok(())
    }

    /// Builds the stored model.
    pub fn model(&self) -> Result<RecurrentUNet<T>> {
        let mut m = RecurrentUNet::new(self.config.clone(), 0)?;
        self.restore_params(&mut m.params)?;
        Ok(m)
    }

    /// Restores Adam moments if the checkpoint has them.
    pub fn restore_optimizer(&self, opt: &mut Adam<T>, store: &ParamStore<T>) -> Result<bool> {
        let find = |prefix: &str, name: &str| {
            let key = format!("{prefix}{name}");
            self.records.iter().find(|(n, _)| *n == key).map(|(_, t)| t)
        };
        if !self.records.iter().any(|(n, _)| n.starts_with(ADAM_M)) {
            return Ok(false);
        }
        for (i, p) in store.iter().enumerate() {
            let (Some(m), Some(v)) = (find(ADAM_M, &p.name), find(ADAM_V, &p.name)) else {
                return Err(Error::ParamMismatch {
                    name: p.name.clone(),
                    detail: "optimizer moments missing from checkpoint".into(),
                });
            };
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::ParamMismatch {
                    name: p.name.clone(),
                    detail: "optimizer moment shape differs".into(),
                });
            }
            opt.m[i] = m.clone();
            opt.v[i] = v.clone();
        }
        opt.step = self.optimizer_step;
        Ok(true)
    }
}
