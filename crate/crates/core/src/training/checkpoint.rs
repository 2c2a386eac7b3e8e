//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "MUNETCKP"
//! version          u32
//! config_len       u32, then config_len bytes of TOML (network + train)
//! topology_hash    u64
//! epoch            u64
//! rng              32-byte seed, u64 stream, u128 word position
//! param_count      u32
//!   id u32 | role u8 | ndim u8 | dims u32 × ndim | values f64 × Π dims
//! bn_count         u32
//!   channels u32 | mean f64 × channels | var f64 × channels
//! has_optimizer    u8
//!   step u64 | beta1 f64 | beta2 f64 | eps f64 | (m, v) f64 × Π dims per parameter
//! checksum         first 8 bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerState, TrainConfig};
use crate::autodiff::BnState;
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, NetworkGraph};
use crate::params::{ParamId, Role};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MUNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn to_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub id: u32,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub topology_hash: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub params: Vec<ParamBlock>,
    pub bn: Vec<BnState>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(
        net: &NetworkGraph,
        opt: Option<&OptimizerState>,
        rng: &ChaCha8Rng,
        epoch: u64,
        train: &TrainConfig,
    ) -> Self {
        let snapshot = ConfigSnapshot { network: net.config().clone(), train: train.clone() };
        Checkpoint {
            config: toml::to_string(&snapshot).expect("config snapshot serializes"),
            topology_hash: net.topology_hash(),
            epoch,
            rng: RngState::of(rng),
            params: net
                .params()
                .iter()
                .map(|p| ParamBlock {
                    id: p.id.0,
                    role: p.role,
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            bn: net.bn_states().to_vec(),
            optimizer: opt.cloned(),
        }
    }

    /// Parameters and batch-norm moments only, for inference use. Resuming
    /// training from it fails for lack of optimizer state.
    pub fn weights_only(net: &NetworkGraph) -> Self {
        Checkpoint::capture(net, None, &ChaCha8Rng::seed_from_u64(0), 0, &TrainConfig::default())
    }

    /// Build the network recorded in the snapshot and restore into it.
    pub fn network(&self) -> Result<NetworkGraph> {
        let mut net = NetworkGraph::build(self.config_snapshot()?.network)?;
        self.restore_into(&mut net)?;
        Ok(net)
    }

    pub fn config_snapshot(&self) -> Result<ConfigSnapshot> {
        toml::from_str(&self.config).map_err(|e| Error::corrupt(format!("config snapshot: {e}"), None))
    }

    /// Copy parameter values and batch-norm moments into `net`.
    pub fn restore_into(&self, net: &mut NetworkGraph) -> Result<()> {
        let hash = net.topology_hash();
        if hash != self.topology_hash {
            return Err(Error::Topology { checkpoint: self.topology_hash, network: hash });
        }
        if self.params.len() != net.params().len() || self.bn.len() != net.bn_states().len() {
            return Err(Error::corrupt("parameter or batch-norm count disagrees with topology", None));
        }
        for block in &self.params {
            let value = Tensor::new(block.shape.clone(), block.data.clone())?;
            let id = ParamId(block.id);
            if block.id as usize >= net.params().len() || net.params().get(id).role != block.role {
                return Err(Error::corrupt(format!("parameter block {} does not fit the network", block.id), None));
            }
            net.params_mut().set_value(id, value)?;
        }
        for (dst, src) in net.bn_states_mut().iter_mut().zip(&self.bn) {
            if dst.channels() != src.channels() {
                return Err(Error::corrupt("batch-norm channel count mismatch", None));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        put_u32(&mut w, self.config.len() as u32);
        w.extend_from_slice(self.config.as_bytes());
        w.extend_from_slice(&self.topology_hash.to_le_bytes());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut w, self.params.len() as u32);
        for p in &self.params {
            put_u32(&mut w, p.id);
            w.push(p.role.code());
            w.push(p.shape.len() as u8);
            for &d in &p.shape {
                put_u32(&mut w, d as u32);
            }
            put_f64s(&mut w, &p.data);
        }
        put_u32(&mut w, self.bn.len() as u32);
        for s in &self.bn {
            put_u32(&mut w, s.channels() as u32);
            put_f64s(&mut w, &s.mean);
            put_f64s(&mut w, &s.var);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                w.extend_from_slice(&o.step.to_le_bytes());
                put_f64s(&mut w, &[o.beta1, o.beta2, o.eps]);
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_f64s(&mut w, m.data());
                    put_f64s(&mut w, v.data());
                }
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest[..8]);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::corrupt("bad magic bytes", Some(0)));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 8 + 8 {
            return Err(Error::corrupt("file truncated", Some(bytes.len() as u64)));
        }
        let body = &bytes[..bytes.len() - 8];
        let digest = Sha256::digest(body);
        if digest[..8] != bytes[bytes.len() - 8..] {
            return Err(Error::corrupt("checksum mismatch (truncated or damaged file)", Some(body.len() as u64)));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let clen = r.u32()? as usize;
        let cpos = r.pos;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::corrupt("config snapshot is not UTF-8", Some(cpos as u64)))?;
        let topology_hash = r.u64()?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = r.u32()?;
            let rpos = r.pos;
            let role = Role::from_code(r.u8()?)
                .ok_or_else(|| Error::corrupt("unknown parameter role", Some(rpos as u64)))?;
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let data = r.f64s(len)?;
            params.push(ParamBlock { id, role, shape, data });
        }
        let nb = r.u32()? as usize;
        let mut bn = Vec::with_capacity(nb.min(1 << 16));
        for _ in 0..nb {
            let c = r.u32()? as usize;
            bn.push(BnState { mean: r.f64s(c)?, var: r.f64s(c)? });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let hyper = r.f64s(3)?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for p in &params {
                    m.push(Tensor::new(p.shape.clone(), r.f64s(p.data.len())?)?);
                    v.push(Tensor::new(p.shape.clone(), r.f64s(p.data.len())?)?);
                }
                Some(OptimizerState { m, v, step, beta1: hyper[0], beta2: hyper[1], eps: hyper[2] })
            }
            other => return Err(Error::corrupt(format!("bad optimizer flag {other}"), Some(r.pos as u64 - 1))),
        };
        if r.pos != body.len() {
            return Err(Error::corrupt("trailing bytes after optimizer state", Some(r.pos as u64)));
        }
        Ok(Checkpoint { config, topology_hash, epoch, rng: RngState { seed, stream, word_pos }, params, bn, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::corrupt(format!("unexpected end of data reading {n} bytes"), Some(self.pos as u64))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::corrupt("length overflow", Some(self.pos as u64)))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
