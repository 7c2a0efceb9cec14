//! Little-endian binary checkpoints. The byte layout is documented in FORMATS.md.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talkflow_core::numerics::{AdamConfig, OptimizerState, ParamSet};
use talkflow_core::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TFLWCKPT";
pub const VERSION: u32 = 1;
/// Bytes per stored scalar; only `f64` checkpoints exist.
pub const DTYPE_F64: u8 = 8;

const FLAG_OPTIMIZER: u8 = 1;
const FLAG_RNG: u8 = 2;

const GROUP_PARAM: u8 = 0;
const GROUP_M: u8 = 1;
const GROUP_V: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Which model the parameters belong to (`expflow`, `poseflow`, `codebook`, `vqig`).
    pub kind: String,
    /// Resolved run configuration at save time.
    pub config_json: String,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub params: ParamSet<f64>,
    pub optimizer: Option<OptimizerState<f64>>,
    pub rng: Option<RngState>,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F64);
        let mut flags = 0;
        if self.optimizer.is_some() {
            flags |= FLAG_OPTIMIZER;
        }
        if self.rng.is_some() {
            flags |= FLAG_RNG;
        }
        out.push(flags);
        out.extend_from_slice(&0u16.to_le_bytes());
        put_str16(&mut out, &self.kind)?;
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(
            &u32::try_from(cfg.len())
                .map_err(|_| Error::data("config too large"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        if let Some(r) = &self.rng {
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        let mut tensors: Vec<(u8, &str, bool, &Array2<f64>)> = self
            .params
            .entries()
            .map(|(n, e)| (GROUP_PARAM, n, e.trainable, &e.value))
            .collect();
        if let Some(o) = &self.optimizer {
            out.extend_from_slice(&o.step.to_le_bytes());
            for v in [o.config.lr, o.config.beta1, o.config.beta2, o.config.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for (group, set) in [(GROUP_M, &o.m), (GROUP_V, &o.v)] {
                tensors.extend(
                    set.entries()
                        .map(|(n, e)| (group, n, e.trainable, &e.value)),
                );
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (group, name, trainable, value) in &tensors {
            put_str16(&mut out, name)?;
            out.push(*group);
            out.push(*trainable as u8);
            out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * value.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, _, _, value) in &tensors {
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::data("truncated checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut c = Cursor {
            bytes: body,
            pos: 0,
        };
        if c.take(8)? != MAGIC {
            return Err(Error::data("not a checkpoint (bad magic)"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::data(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        if u64::from_le_bytes(tail.try_into().unwrap()) != fnv1a(body) {
            return Err(Error::data(
                "checkpoint checksum mismatch (truncated or corrupt)",
            ));
        }
        let dtype = c.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::data(format!("unsupported scalar width {dtype}")));
        }
        let flags = c.u8()?;
        c.take(2)?;
        let kind = c.str16()?;
        let cfg_len = c.u32()? as usize;
        let config_json = String::from_utf8(c.take(cfg_len)?.to_vec())
            .map_err(|_| Error::data("config is not UTF-8"))?;
        let step = c.u64()?;
        let rng = if flags & FLAG_RNG != 0 {
            let seed: [u8; 32] = c.take(32)?.try_into().unwrap();
            let stream = c.u64()?;
            let word_pos = u128::from_le_bytes(c.take(16)?.try_into().unwrap());
            Some(RngState {
                seed,
                stream,
                word_pos,
            })
        } else {
            None
        };
        let opt_head = if flags & FLAG_OPTIMIZER != 0 {
            let s = c.u64()?;
            let (lr, beta1, beta2, eps) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?);
            Some((
                s,
                AdamConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                },
            ))
        } else {
            None
        };
        let count = c.u32()? as usize;
        let mut index = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = c.str16()?;
            let group = c.u8()?;
            let trainable = c.u8()? != 0;
            let rows = c.u32()? as usize;
            let cols = c.u32()? as usize;
            let offset = c.u64()?;
            index.push((name, group, trainable, rows, cols, offset));
        }
        let data_len = c.u64()? as usize;
        let data = c.take(data_len)?;
        if c.pos != body.len() {
            return Err(Error::data("trailing bytes in checkpoint"));
        }
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for (name, group, trainable, rows, cols, offset) in index {
            let start = offset as usize;
            let end = start + 8 * rows * cols;
            let raw = data.get(start..end).ok_or_else(|| {
                Error::data(format!("tensor {name} lies outside the data section"))
            })?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), vals)
                .map_err(|e| Error::data(e.to_string()))?;
            let target = match group {
                GROUP_PARAM => &mut params,
                GROUP_M => &mut m,
                GROUP_V => &mut v,
                _ => return Err(Error::data(format!("unknown tensor group {group}"))),
            };
            if target.contains(&name) {
                return Err(Error::data(format!("duplicate tensor {name}")));
            }
            target.insert_entry(name, arr, trainable);
        }
        let optimizer = match opt_head {
            Some((s, config)) => {
                params
                    .same_shapes(&m)
                    .and_then(|_| params.same_shapes(&v))
                    .map_err(|e| Error::data(e.to_string()))?;
                Some(OptimizerState {
                    config,
                    m,
                    v,
                    step: s,
                })
            }
            None => None,
        };
        Ok(Self {
            kind,
            config_json,
            step,
            params,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Checks the kind and returns the parameters, verifying them against
    /// a freshly built model of the same configuration.
    pub fn params_for(&self, kind: &str, template: &ParamSet<f64>) -> Result<ParamSet<f64>> {
        if self.kind != kind {
            return Err(Error::data(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind
            )));
        }
        template.same_shapes(&self.params).map_err(|e| {
            Error::data(format!(
                "checkpoint does not match the configured model: {e}"
            ))
        })?;
        Ok(self.params.clone())
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::data(format!("name too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::data("tensor name is not UTF-8"))
    }
}
