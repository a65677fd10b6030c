//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "DFAN"  u16 version
//! u32 config length, config text ([model] section)
//! u64 update counter
//! u8 has optimizer; if 1: u64 adam step, f64 beta1, f64 beta2, f64 eps
//! u32 tensor count, then per tensor:
//!   u16 name length, name (utf-8), u8 flags (bit 0: trainable),
//!   u8 rank (4), rank x u32 dims, f32 data
//! ```
//!
//! Adam moments are stored as tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use super::config::ModelConfig;
use super::network::DefianModel;
use crate::config_file::ConfigFile;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFAN";
pub const VERSION: u16 = 1;

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `(param name, first moment, second moment)`.
    pub moments: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
    pub updates: u64,
}

impl Checkpoint {
    pub fn from_model(model: &DefianModel<f32>, adam: Option<&Adam<f32>>, updates: u64) -> Self {
        let optimizer = adam.map(|a| OptimizerState {
            step: a.steps(),
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            moments: model
                .store()
                .iter()
                .filter_map(|(id, p)| a.moments(id).map(|(m, v)| (p.name.clone(), m.clone(), v.clone())))
                .collect(),
        });
        Self {
            config: model.config().clone(),
            params: model.store().clone(),
            optimizer,
            updates,
        }
    }

    pub fn model(&self) -> Result<DefianModel<f32>> {
        DefianModel::from_store(self.config.clone(), self.params.clone())
    }

    /// Optimizer with restored moments, keyed to `model`'s parameter ids.
    pub fn adam_for(&self, model: &DefianModel<f32>) -> Result<Option<Adam<f32>>> {
        let Some(st) = &self.optimizer else {
            return Ok(None);
        };
        let mut adam = Adam::new(st.beta1, st.beta2, st.eps);
        let moments =
            st.moments
                .iter()
                .map(|(name, m, v)| {
                    let id = model.store().id(name).ok_or_else(|| {
                        Error::InvalidArgument(format!("optimizer state for unknown parameter {name}"))
                    })?;
                    Ok((id, m.clone(), v.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
        adam.restore(st.step, moments);
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut file = ConfigFile::default();
        file.insert(self.config.to_section());
        let text = file.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.updates.to_le_bytes());
        let mut tensors: Vec<(String, bool, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.trainable, &p.value))
            .collect();
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                for f in [st.beta1, st.beta2, st.eps] {
                    out.extend_from_slice(&f.to_le_bytes());
                }
                for (name, m, v) in &st.moments {
                    tensors.push((format!("{M_PREFIX}{name}"), false, m));
                    tensors.push((format!("{V_PREFIX}{name}"), false, v));
                }
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, trainable, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(trainable as u8);
            out.push(4);
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error_at(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let cfg_len = r.u32("config length")? as usize;
        let cfg_at = r.pos;
        let text = std::str::from_utf8(r.take(cfg_len, "config block")?)
            .map_err(|_| r.error_at(cfg_at, "config block is not utf-8"))?;
        let file = ConfigFile::parse(text).map_err(|e| r.error_at(cfg_at, format!("config block: {e}")))?;
        let section = file
            .section("model")
            .ok_or_else(|| r.error_at(cfg_at, "config block has no [model] section"))?;
        let config =
            ModelConfig::from_section(section).map_err(|e| r.error_at(cfg_at, format!("config block: {e}")))?;
        let updates = r.u64("update counter")?;
        let has_opt = r.u8("optimizer flag")?;
        let mut optimizer = match has_opt {
            0 => None,
            1 => Some(OptimizerState {
                step: r.u64("adam step")?,
                beta1: r.f64("adam beta1")?,
                beta2: r.f64("adam beta2")?,
                eps: r.f64("adam eps")?,
                moments: Vec::new(),
            }),
            other => return Err(r.error_at(r.pos - 1, format!("invalid optimizer flag {other}"))),
        };
        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        let mut first_moments: Vec<(String, Tensor<f32>)> = Vec::new();
        let mut second_moments: Vec<(String, Tensor<f32>)> = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.error_at(at, "tensor name is not utf-8"))?
                .to_string();
            let flags = r.u8("tensor flags")?;
            let rank = r.u8("tensor rank")?;
            if rank != 4 {
                return Err(r.error_at(r.pos - 1, format!("tensor {name}: rank {rank}, expected 4")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32("tensor dims")? as usize;
            }
            let bytes_len = shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error_at(at, format!("tensor {name}: dims {shape:?} overflow")))?;
            let raw = r.take(bytes_len, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(shape, data)?;
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                first_moments.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                second_moments.push((p.to_string(), t));
            } else {
                params
                    .add(name.clone(), t, flags & 1 != 0)
                    .map_err(|_| r.error_at(at, format!("duplicate tensor {name}")))?;
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        match &mut optimizer {
            Some(st) => {
                if first_moments.len() != second_moments.len() {
                    return Err(r.error_at(r.pos, "unpaired optimizer moments"));
                }
                for ((mn, m), (vn, v)) in first_moments.into_iter().zip(second_moments) {
                    if mn != vn || m.shape() != v.shape() {
                        return Err(r.error_at(r.pos, format!("optimizer moments for {mn} and {vn} do not pair")));
                    }
                    st.moments.push((mn, m, v));
                }
            }
            None if !first_moments.is_empty() || !second_moments.is_empty() => {
                return Err(r.error_at(r.pos, "optimizer moments without optimizer header"));
            }
            None => {}
        }
        let ckpt = Self {
            config,
            params,
            optimizer,
            updates,
        };
        // Reject files whose tensors do not fit the configured layout.
        ckpt.model().map_err(|e| Error::Checkpoint {
            offset: bytes.len() as u64,
            msg: e.to_string(),
        })?;
        Ok(ckpt)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a checkpoint to continue training and refuses one whose model
    /// configuration differs from `expected`.
    pub fn load_for_resume(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.config != expected {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {} was written for a different model configuration",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}
