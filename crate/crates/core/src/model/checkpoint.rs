//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic     8 bytes  "SGRUCKPT"
//! version   u32
//! config    u32 byte length, then the ModelConfig as UTF-8 JSON
//! topology  u64 skeleton fingerprint
//! count     u32 number of tensors
//! tensor*   u32 name length, UTF-8 name,
//!           u32 rank, rank × u64 dims,
//!           product(dims) × f64 values, row-major
//! ```
//!
//! Tensors appear in the canonical parameter order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphnet::SkeletonTopology;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGRUCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub topology_fingerprint: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Fails unless the stored model can run under `config` on `topology`.
    /// Every mismatching field is reported with both values.
    pub fn check_compatible(&self, config: &ModelConfig, topology: &SkeletonTopology) -> Result<()> {
        let stored = &self.config;
        let mut diffs = Vec::new();
        let mut cmp = |name: &str, a: String, b: String| {
            if a != b {
                diffs.push(format!("{name}: checkpoint {a} vs config {b}"));
            }
        };
        cmp("classes", stored.classes.to_string(), config.classes.to_string());
        cmp("stages", stored.stages.to_string(), config.stages.to_string());
        cmp("hidden", stored.hidden.to_string(), config.hidden.to_string());
        cmp("gnn", format!("{:?}", stored.gnn), format!("{:?}", config.gnn));
        if stored.gnn == crate::model::GnnKind::Gat {
            cmp("heads", stored.heads.to_string(), config.heads.to_string());
        }
        cmp("n_nodes", stored.n_nodes.to_string(), config.n_nodes.to_string());
        cmp("input_dim", stored.input_dim.to_string(), config.input_dim.to_string());
        cmp("seq_len", stored.seq_len.to_string(), config.seq_len.to_string());
        cmp(
            "classifier_width",
            stored.classifier_width().to_string(),
            config.classifier_width().to_string(),
        );
        let fp = topology.fingerprint();
        if fp != self.topology_fingerprint {
            diffs.push(format!(
                "topology: checkpoint {:016x} vs config {fp:016x}",
                self.topology_fingerprint
            ));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(diffs.join("; ")))
        }
    }
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config: &ModelConfig, topology: &SkeletonTopology) -> Result<()> {
    params.check_shapes(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    put_len(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&topology.fingerprint().to_le_bytes());
    let names = params.names();
    put_len(&mut buf, names.len())?;
    let mut err = None;
    params.visit(&mut |name, t| {
        if err.is_some() {
            return;
        }
        if let Err(e) = put_tensor(&mut buf, name, t) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("stored config invalid: {e}")))?;
    let topology_fingerprint = r.u64()?;
    let count = r.u32()? as usize;
    let mut stored = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, tensor) = r.tensor()?;
        if stored.insert(name.clone(), tensor).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let template = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    if template.names().len() != count {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {count} tensors, config implies {}",
            template.names().len()
        )));
    }
    let params = template.map(&mut |name, t| {
        let found = stored
            .remove(name)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor `{name}`")))?;
        if found.shape() != t.shape() {
            return Err(Error::Incompatible(format!(
                "`{name}` has shape {:?}, config implies {:?}",
                found.shape(),
                t.shape()
            )));
        }
        Ok(found)
    })?;
    Ok(Checkpoint {
        config,
        topology_fingerprint,
        params,
    })
}

fn put_len(buf: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} exceeds u32")))?;
    buf.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_len(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_len(buf, t.rank())?;
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut total: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?)
                .map_err(|_| Error::CorruptCheckpoint(format!("`{name}` dimension overflows")))?;
            total = total
                .checked_mul(d)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("`{name}` size overflows")))?;
            shape.push(d);
        }
        let raw = self.take(total.checked_mul(8).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("`{name}` size overflows"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::CorruptCheckpoint(format!("`{name}`: {e}")))?;
        Ok((name, tensor))
    }
}
