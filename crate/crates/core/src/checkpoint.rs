//! Checkpoint container.
//!
//! ```text
//! "CTPK" | version: u16 | header_len: u32 | header JSON | f32 LE payload
//! ```
//!
//! The header carries the config snapshot, its hash, the epoch and step
//! counters, the random-stream state and an index of every tensor in the
//! payload. Tensors are stored in index order: model parameters first,
//! then optimizer velocities under the same names.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CtpConfig;
use crate::error::{CtpError, Result};
use crate::io::write_atomic;
use crate::model::CtpModel;
use crate::optim::Sgd;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTPK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Random-stream state. Every stream is derived from the seed and the
/// epoch, so the next epoch to run pins down all future randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: CtpConfig,
    config_hash: String,
    epoch: usize,
    step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Everything needed to resume pretraining or rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CtpConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
    pub momentum: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(config: &CtpConfig, model: &CtpModel<f32>, opt: &Sgd<f32>, epoch: usize, step: u64) -> Self {
        let params: Vec<NamedTensor> = model
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
            .collect();
        let momentum = params
            .iter()
            .zip(&opt.velocity)
            .map(|(p, v)| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: v.clone(),
            })
            .collect();
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            epoch,
            step,
            rng: RngState {
                seed: config.seed,
                next_epoch: epoch,
            },
            params,
            momentum,
        }
    }

    /// Refuse a checkpoint written under a different config unless forced.
    pub fn check_config(&self, expected: &CtpConfig, force: bool) -> Result<()> {
        let want = expected.hash();
        if self.config_hash != want && !force {
            return Err(CtpError::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {} (use --force to override)",
                short(&self.config_hash),
                short(&want)
            )));
        }
        Ok(())
    }

    /// Copy stored parameters into `model`, matching by name and shape.
    pub fn restore_model(&self, model: &mut CtpModel<f32>) -> Result<()> {
        restore(&self.params, model.params_mut().into_iter().map(|p| (p.name.clone(), p.shape.clone(), &mut p.value)))
    }

    /// Copy stored parameters into the encoder only; head tensors are ignored.
    pub fn restore_encoder(&self, model: &mut CtpModel<f32>) -> Result<()> {
        let enc: Vec<NamedTensor> = self.params.iter().filter(|t| t.name.starts_with("encoder.")).cloned().collect();
        restore(&enc, model.encoder.params_mut().into_iter().map(|p| (p.name.clone(), p.shape.clone(), &mut p.value)))
    }

    pub fn restore_optimizer(&self, model: &CtpModel<f32>, opt: &mut Sgd<f32>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        restore(&self.momentum, names.into_iter().zip(opt.velocity.iter_mut()).map(|((n, s), v)| (n, s, v)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (group, list) in [(TensorGroup::Param, &self.params), (TensorGroup::Momentum, &self.momentum)] {
            for t in list {
                tensors.push(TensorEntry {
                    name: t.name.clone(),
                    group,
                    shape: t.shape.clone(),
                    offset,
                });
                offset += t.data.len();
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.iter().chain(&self.momentum) {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(CtpError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(CtpError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = &bytes[10..];
        if body.len() < hlen {
            return Err(CtpError::Checkpoint("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| CtpError::Checkpoint(format!("malformed checkpoint header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(CtpError::Checkpoint("stored config does not match its hash".into()));
        }
        let payload = &body[hlen..];
        if payload.len() % 4 != 0 {
            return Err(CtpError::Checkpoint("payload is not a whole number of f32 values".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut params = Vec::new();
        let mut momentum = Vec::new();
        let mut expect = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expect || e.offset + n > floats.len() {
                return Err(CtpError::Checkpoint(format!("tensor {} lies outside the payload", e.name)));
            }
            expect += n;
            let t = NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: floats[e.offset..e.offset + n].to_vec(),
            };
            match e.group {
                TensorGroup::Param => params.push(t),
                TensorGroup::Momentum => momentum.push(t),
            }
        }
        if expect != floats.len() {
            return Err(CtpError::Checkpoint("payload has trailing data".into()));
        }
        Ok(Self {
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            params,
            momentum,
        })
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn restore<'a>(
    stored: &[NamedTensor],
    targets: impl Iterator<Item = (String, Vec<usize>, &'a mut Vec<f32>)>,
) -> Result<()> {
    let mut n = 0;
    for (name, shape, dst) in targets {
        let src = stored
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CtpError::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
        if src.shape != shape {
            return Err(CtpError::Checkpoint(format!(
                "tensor {name} has shape {:?} in the checkpoint, model expects {shape:?}",
                src.shape
            )));
        }
        dst.copy_from_slice(&src.data);
        n += 1;
    }
    if n != stored.len() {
        return Err(CtpError::Checkpoint(format!("checkpoint holds {} tensors, model uses {n}", stored.len())));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

/// Read a checkpoint. Nothing is returned unless the whole file parses.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CtpError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderSpec, HeadSpec, ModelSpec};
    use rand::SeedableRng;

    fn small_config(seed: u64) -> CtpConfig {
        let mut cfg = CtpConfig::default();
        cfg.seed = seed;
        cfg.model = ModelSpec {
            encoder: EncoderSpec {
                input_t: 4,
                input_h: 32,
                input_w: 32,
                widths: vec![4, 8],
                spatial_stride: 4,
                temporal_stride: 2,
                ..EncoderSpec::default()
            },
            head: HeadSpec {
                pool_size: 2,
                hidden: 8,
                out_t: 4,
                squeeze_enabled: true,
            },
            ..ModelSpec::default()
        };
        cfg
    }

    fn sample(seed: u64) -> (CtpConfig, Checkpoint) {
        let cfg = small_config(seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let model = CtpModel::<f32>::new(&cfg.model, &mut rng).unwrap();
        let mut opt = Sgd::new(&model.params(), 0.9, 1e-4);
        for (i, v) in opt.velocity.iter_mut().enumerate() {
            v.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 31 + j) as f32 * 1e-3);
        }
        let ck = Checkpoint::capture(&cfg, &model, &opt, 3, 42);
        (cfg, ck)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (_, ck) = sample(1);
        let a = dir.path().join("a.ctpk");
        let b = dir.path().join("b.ctpk");
        save_checkpoint(&a, &ck).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ck);
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn restore_round_trips_model_and_optimizer() {
        let (cfg, ck) = sample(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut model = CtpModel::<f32>::new(&cfg.model, &mut rng).unwrap();
        let mut opt = Sgd::new(&model.params(), 0.9, 1e-4);
        ck.restore_model(&mut model).unwrap();
        ck.restore_optimizer(&model, &mut opt).unwrap();
        assert_eq!(Checkpoint::capture(&cfg, &model, &opt, 3, 42), ck);
    }

    #[test]
    fn corrupted_magic_is_a_clean_error() {
        let (_, ck) = sample(3);
        let mut bytes = ck.to_bytes();
        bytes[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CtpError::Checkpoint(_))));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn hash_guard() {
        let (cfg, ck) = sample(4);
        assert!(ck.check_config(&cfg, false).is_ok());
        let other = small_config(5);
        assert!(matches!(ck.check_config(&other, false), Err(CtpError::Checkpoint(_))));
        assert!(ck.check_config(&other, true).is_ok());
    }

    #[test]
    fn shape_mismatch_refused() {
        let (_, ck) = sample(6);
        let mut cfg = small_config(6);
        cfg.model.head.hidden = 16;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = CtpModel::<f32>::new(&cfg.model, &mut rng).unwrap();
        assert!(ck.restore_model(&mut model).is_err());
        // the encoder is unchanged, so an encoder-only restore succeeds
        assert!(ck.restore_encoder(&mut model).is_ok());
    }
}
