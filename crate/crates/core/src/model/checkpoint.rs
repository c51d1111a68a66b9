//! Binary checkpoint format.
//!
//! ```text
//! "USEG"                      magic
//! u32                         format version
//! u32 + bytes                 JSON metadata (config, epoch, eval_dsc, ...)
//! u32                         record count
//! record*                     u32 name length, UTF-8 name, u8 rank,
//!                             rank x u32 dims, f32 values
//! ```
//!
//! All integers and floats are little-endian. Values are held at `f32`
//! precision inside a [`Checkpoint`], so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"USEG";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param:";
const MEAN: &str = "running_mean:";
const VAR: &str = "running_var:";
const ADAM_M: &str = "adam_m:";
const ADAM_V: &str = "adam_v:";

/// Adam moments keyed by parameter name, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Batch-norm layer name to `(running mean, running variance)`.
    pub running_stats: BTreeMap<String, (Tensor, Tensor)>,
    pub stats_initialized: bool,
    pub optimizer_state: Option<OptimizerSnapshot>,
    pub epoch: usize,
    pub eval_dsc: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: UNetConfig,
    epoch: usize,
    eval_dsc: f64,
    stats_initialized: bool,
    optimizer_step: Option<u64>,
}

fn narrow(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

fn narrow_vec(values: &[f64]) -> Tensor {
    Tensor::from_parts(vec![values.len()], values.iter().map(|&v| v as f32 as f64).collect())
}

impl Checkpoint {
    /// Snapshots `model` at checkpoint precision.
    pub fn capture(
        model: &UNet,
        optimizer_state: Option<OptimizerSnapshot>,
        epoch: usize,
        eval_dsc: f64,
    ) -> Self {
        let params = model
            .param_names()
            .iter()
            .cloned()
            .zip(model.params().iter().map(narrow))
            .collect();
        let running_stats = model
            .stat_names()
            .iter()
            .cloned()
            .zip(
                model
                    .running_stats()
                    .iter()
                    .map(|s| (narrow_vec(&s.mean), narrow_vec(&s.var))),
            )
            .collect();
        let optimizer_state = optimizer_state.map(|o| OptimizerSnapshot {
            step: o.step,
            first_moment: o.first_moment.iter().map(|(k, v)| (k.clone(), narrow(v))).collect(),
            second_moment: o.second_moment.iter().map(|(k, v)| (k.clone(), narrow(v))).collect(),
        });
        Checkpoint {
            config: model.config().clone(),
            params,
            running_stats,
            stats_initialized: model.stats_initialized(),
            optimizer_state,
            epoch,
            eval_dsc,
        }
    }

    /// Rebuilds the network. Every architecture slot must be present with
    /// matching dims, and nothing else may be.
    pub fn to_model(&self) -> Result<UNet> {
        let mut model = UNet::new(self.config.clone(), 0)?;
        if self.params.len() != model.param_names().len() {
            return Err(Error::Inconsistent(format!(
                "{} parameter records, architecture has {}",
                self.params.len(),
                model.param_names().len()
            )));
        }
        let names = model.param_names().to_vec();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Inconsistent(format!("missing parameter `{name}`")))?;
            if t.dims() != slot.dims() {
                return Err(Error::Inconsistent(format!(
                    "parameter `{name}` has dims {:?}, expected {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t.clone();
        }
        if self.running_stats.len() != model.stat_names().len() {
            return Err(Error::Inconsistent(format!(
                "{} running-stat records, architecture has {}",
                self.running_stats.len(),
                model.stat_names().len()
            )));
        }
        let stat_names = model.stat_names().to_vec();
        let initialized = self.stats_initialized;
        for (name, slot) in stat_names.iter().zip(model.running_stats_mut()) {
            let (mean, var) = self
                .running_stats
                .get(name)
                .ok_or_else(|| Error::Inconsistent(format!("missing running stats `{name}`")))?;
            if mean.len() != slot.mean.len() || var.len() != slot.var.len() {
                return Err(Error::Inconsistent(format!(
                    "running stats `{name}` have the wrong channel count"
                )));
            }
            *slot = RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
                initialized,
            };
        }
        Ok(model)
    }

    fn records(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, v) in &self.params {
            out.push((format!("{PARAM}{k}"), v));
        }
        for (k, (m, v)) in &self.running_stats {
            out.push((format!("{MEAN}{k}"), m));
            out.push((format!("{VAR}{k}"), v));
        }
        if let Some(opt) = &self.optimizer_state {
            for (k, v) in &opt.first_moment {
                out.push((format!("{ADAM_M}{k}"), v));
            }
            for (k, v) in &opt.second_moment {
                out.push((format!("{ADAM_V}{k}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            epoch: self.epoch,
            eval_dsc: self.eval_dsc,
            stats_initialized: self.stats_initialized,
            optimizer_step: self.optimizer_state.as_ref().map(|o| o.step),
        })?;
        let records = self.records();
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.dims() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Inconsistent(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;

        let mut params = BTreeMap::new();
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Inconsistent("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let len: usize = dims.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or(Error::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let tensor = Tensor::new(dims, data)
                .map_err(|e| Error::Inconsistent(format!("record `{name}`: {e}")))?;
            let (map, key) = if let Some(k) = name.strip_prefix(PARAM) {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix(MEAN) {
                (&mut means, k)
            } else if let Some(k) = name.strip_prefix(VAR) {
                (&mut vars, k)
            } else if let Some(k) = name.strip_prefix(ADAM_M) {
                (&mut first, k)
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                (&mut second, k)
            } else {
                return Err(Error::Inconsistent(format!("unknown record `{name}`")));
            };
            if map.insert(key.to_string(), tensor).is_some() {
                return Err(Error::Inconsistent(format!("duplicate record `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Inconsistent(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - r.pos
            )));
        }

        if means.len() != vars.len() {
            return Err(Error::Inconsistent("unpaired running statistics".into()));
        }
        let mut running_stats = BTreeMap::new();
        for (k, m) in means {
            let v = vars
                .remove(&k)
                .ok_or_else(|| Error::Inconsistent(format!("running variance for `{k}` missing")))?;
            running_stats.insert(k, (m, v));
        }
        let optimizer_state = match meta.optimizer_step {
            Some(step) => Some(OptimizerSnapshot {
                step,
                first_moment: first,
                second_moment: second,
            }),
            None if first.is_empty() && second.is_empty() => None,
            None => {
                return Err(Error::Inconsistent(
                    "optimizer moments present without a step count".into(),
                ))
            }
        };
        let ckpt = Checkpoint {
            config: meta.config,
            params,
            running_stats,
            stats_initialized: meta.stats_initialized,
            optimizer_state,
            epoch: meta.epoch,
            eval_dsc: meta.eval_dsc,
        };
        // architecture consistency: every slot present with the right dims
        let model = ckpt.to_model()?;
        if let Some(opt) = &ckpt.optimizer_state {
            for (name, p) in model.param_names().iter().zip(model.params()) {
                for moments in [&opt.first_moment, &opt.second_moment] {
                    match moments.get(name) {
                        Some(t) if t.dims() == p.dims() => {}
                        _ => {
                            return Err(Error::Inconsistent(format!(
                                "optimizer moment for `{name}` missing or misshapen"
                            )))
                        }
                    }
                }
            }
            if opt.first_moment.len() != model.params().len()
                || opt.second_moment.len() != model.params().len()
            {
                return Err(Error::Inconsistent("extra optimizer moments".into()));
            }
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn tiny() -> UNet {
        let cfg = UNetConfig {
            base_features: 2,
            depth: 2,
            ..Default::default()
        };
        let mut net = UNet::new(cfg, 3).unwrap();
        net.forward(&Tensor::full(&[1, 3, 8, 8], 0.25), Mode::Train).unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = tiny();
        let moments: BTreeMap<_, _> = net
            .param_names()
            .iter()
            .cloned()
            .zip(net.params().iter().map(|p| p.map(|v| v * 0.1)))
            .collect();
        let opt = OptimizerSnapshot {
            step: 17,
            first_moment: moments.clone(),
            second_moment: moments,
        };
        let ckpt = Checkpoint::capture(&net, Some(opt), 4, 0.123456789);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.eval_dsc.to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn error_kinds_are_distinct() {
        let bytes = Checkpoint::capture(&tiny(), None, 0, 0.0).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"US"), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, expected: 1 })
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated)
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn record_count_mismatch_is_inconsistent() {
        let mut ckpt = Checkpoint::capture(&tiny(), None, 0, 0.0);
        let first = ckpt.params.keys().next().unwrap().clone();
        ckpt.params.remove(&first);
        let bytes = ckpt.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Inconsistent(_))));
    }
}
