//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic "TLCK" | version u32 | step u64 | config digest [32]
//! | array count u32
//! | per array: name length u16, UTF-8 name, element count u64, f64 values
//! | first moments: per array, element count u64, f64 values
//! | second moments: same layout
//! | sampler blob: length u32, then seed u64, epoch u64, cursor u64
//! | extension blob: length u32, then
//!     model config TOML (length u32 + bytes),
//!     token loss window, example score window
//!     (each: capacity u64, seen u64, length u64, f64 values)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Result, TrainConfig, TrainError};
use crate::model::ModelConfig;
use crate::truncation::LossWindow;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the epoch-shuffled batch sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerState {
    pub seed: u64,
    pub epoch: u64,
    /// Index of the next example within the epoch's permutation.
    pub cursor: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub digest: [u8; 32],
    pub model_config: ModelConfig,
    pub params: Vec<(String, Vec<f64>)>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub sampler: SamplerState,
    pub token_window: LossWindow,
    pub example_window: LossWindow,
}

#[derive(serde::Serialize)]
struct DigestInput<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// SHA-256 of the canonical TOML rendering of both configs.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig) -> [u8; 32] {
    let text = toml::to_string(&DigestInput { model, train })
        .expect("configs serialize to TOML");
    Sha256::digest(text.as_bytes()).into()
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_window(out: &mut Vec<u8>, w: &LossWindow) {
    out.extend_from_slice(&(w.capacity() as u64).to_le_bytes());
    out.extend_from_slice(&w.seen().to_le_bytes());
    let v: Vec<f64> = w.values().collect();
    put_f64s(out, &v);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, data) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_f64s(&mut out, data);
        }
        for moments in [&self.adam_m, &self.adam_v] {
            for m in moments {
                put_f64s(&mut out, m);
            }
        }
        out.extend_from_slice(&24u32.to_le_bytes());
        for v in [self.sampler.seed, self.sampler.epoch, self.sampler.cursor] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut ext = Vec::new();
        let cfg = toml::to_string(&self.model_config).expect("model config serializes");
        ext.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        ext.extend_from_slice(cfg.as_bytes());
        put_window(&mut ext, &self.token_window);
        put_window(&mut ext, &self.example_window);
        out.extend_from_slice(&(ext.len() as u32).to_le_bytes());
        out.extend_from_slice(&ext);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Format("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let step = r.u64()?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| TrainError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            params.push((name, r.f64s()?));
        }
        let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for m in &mut moments {
            for (name, p) in &params {
                let v = r.f64s()?;
                if v.len() != p.len() {
                    return Err(TrainError::Format(format!(
                        "optimizer moment for `{name}` has {} values, parameter has {}",
                        v.len(),
                        p.len()
                    )));
                }
                m.push(v);
            }
        }
        let [adam_m, adam_v] = moments;
        if r.u32()? != 24 {
            return Err(TrainError::Format("unexpected sampler blob length".into()));
        }
        let sampler = SamplerState {
            seed: r.u64()?,
            epoch: r.u64()?,
            cursor: r.u64()?,
        };
        let ext_len = r.u32()? as usize;
        let ext_end = r.pos + ext_len;
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| TrainError::Format("model config is not UTF-8".into()))?;
        let model_config: ModelConfig = toml::from_str(cfg_text)
            .map_err(|e| TrainError::Format(format!("model config: {e}")))?;
        let token_window = r.window()?;
        let example_window = r.window()?;
        if r.pos != ext_end || r.pos != buf.len() {
            return Err(TrainError::Format("trailing or misaligned bytes".into()));
        }
        Ok(Self {
            step,
            digest,
            model_config,
            params,
            adam_m,
            adam_v,
            sampler,
            token_window,
            example_window,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = n
            .checked_mul(8)
            .ok_or(TrainError::Truncated { offset: self.pos })?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn window(&mut self) -> Result<LossWindow> {
        let cap = self.u64()? as usize;
        let seen = self.u64()?;
        let values = self.f64s()?;
        if cap == 0 || values.len() > cap {
            return Err(TrainError::Format("inconsistent loss window".into()));
        }
        Ok(LossWindow::from_parts(cap, values, seen))
    }
}
