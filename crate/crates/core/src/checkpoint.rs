//! Binary checkpoints of a trainer: parameters, optimizer slots and step
//! counters together with the run configuration and architecture.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "LCTCKPT\0"
//! version   u32
//! config    u64 length + UTF-8 TOML
//! arch      u64 length + UTF-8 JSON
//! steps     u64      batches trained
//! counters  u32 count, then per counter: u32 name length, name, u64 value
//! blocks    u32 count, then per block: u32 name length, name,
//!           u32 rank, rank × u64 extents, numel × f64 values
//! ```

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::engine::{Architecture, PartitionedModel, Trainer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LCTCKPT\0";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub trainer: Trainer,
}

fn named_tensors(trainer: &Trainer) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for s in trainer.stages() {
        let i = s.index;
        for (k, p) in s.group.params().enumerate() {
            out.push((format!("stage{i}.group.{k}"), p.clone()));
        }
        for (k, t) in s.group_opt.slots().iter().enumerate() {
            out.push((format!("stage{i}.group_opt.{k}"), t.clone()));
        }
        if let (Some(c), Some(o)) = (&s.critic, &s.critic_opt) {
            for (k, p) in c.params().enumerate() {
                out.push((format!("stage{i}.critic.{k}"), p.clone()));
            }
            for (k, t) in o.slots().iter().enumerate() {
                out.push((format!("stage{i}.critic_opt.{k}"), t.clone()));
            }
        }
    }
    out
}

fn counters(trainer: &Trainer) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    for s in trainer.stages() {
        out.push((format!("stage{}.group_opt.steps", s.index), s.group_opt.steps()));
        if let Some(o) = &s.critic_opt {
            out.push((format!("stage{}.critic_opt.steps", s.index), o.steps()));
        }
    }
    out
}

fn put_str(buf: &mut Vec<u8>, s: &str, wide: bool) {
    if wide {
        buf.extend((s.len() as u64).to_le_bytes());
    } else {
        buf.extend((s.len() as u32).to_le_bytes());
    }
    buf.extend(s.as_bytes());
}

/// Serialises a trainer and its config.
pub fn encode(config: &RunConfig, trainer: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    put_str(&mut buf, &config.to_toml(), true);
    put_str(&mut buf, &serde_json::to_string(trainer.arch()).expect("architecture serialises"), true);
    buf.extend(trainer.steps_done().to_le_bytes());
    let cs = counters(trainer);
    buf.extend((cs.len() as u32).to_le_bytes());
    for (name, v) in cs {
        put_str(&mut buf, &name, false);
        buf.extend(v.to_le_bytes());
    }
    let blocks = named_tensors(trainer);
    buf.extend((blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        put_str(&mut buf, &name, false);
        buf.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend(v.to_le_bytes());
        }
    }
    buf
}

pub fn save(path: &Path, config: &RunConfig, trainer: &Trainer) -> Result<()> {
    let bytes = encode(config, trainer);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, wide: bool) -> Result<&'a str> {
        let n = if wide { self.u64()? as usize } else { self.u32()? as usize };
        std::str::from_utf8(self.take(n)?).map_err(|_| bad("string is not UTF-8"))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

/// Rebuilds a trainer from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("format version {version} is not supported (expected {VERSION})")));
    }
    let config = RunConfig::from_toml(r.str(true)?)?;
    let arch: Architecture = serde_json::from_str(r.str(true)?).map_err(|e| bad(format!("architecture: {e}")))?;
    arch.validate()?;
    let steps = r.u64()?;
    let mut trainer = Trainer::new(PartitionedModel::init(arch, 0), &config.optim.main, &config.optim.critic);
    trainer.set_steps_done(steps);

    let expected_counters = counters(&trainer);
    let n_counters = r.u32()? as usize;
    if n_counters != expected_counters.len() {
        return Err(bad(format!("{n_counters} counters, expected {}", expected_counters.len())));
    }
    let mut counter_values = Vec::with_capacity(n_counters);
    for (want, _) in &expected_counters {
        let name = r.str(false)?;
        if name != want {
            return Err(bad(format!("counter `{name}` where `{want}` was expected")));
        }
        counter_values.push(r.u64()?);
    }

    let expected = named_tensors(&trainer);
    let n_blocks = r.u32()? as usize;
    if n_blocks != expected.len() {
        return Err(bad(format!("{n_blocks} blocks, expected {}", expected.len())));
    }
    let mut values = Vec::with_capacity(n_blocks);
    for (want, t) in &expected {
        let name = r.str(false)?;
        if name != want {
            return Err(bad(format!("block `{name}` where `{want}` was expected")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.shape() {
            return Err(bad(format!("block `{name}` has shape {shape:?}, expected {:?}", t.shape())));
        }
        let data = r
            .take(t.numel() * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::new(shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
    }

    let mut values = values.into_iter();
    let mut counter_values = counter_values.into_iter();
    for s in trainer.stages_mut() {
        for p in s.group.params_mut() {
            *p = values.next().expect("counted");
        }
        let slots: Vec<Tensor> = values.by_ref().take(s.group_opt.slots().len()).collect();
        s.group_opt.restore(counter_values.next().expect("counted"), slots)?;
        if let (Some(c), Some(o)) = (&mut s.critic, &mut s.critic_opt) {
            for p in c.params_mut() {
                *p = values.next().expect("counted");
            }
            let slots: Vec<Tensor> = values.by_ref().take(o.slots().len()).collect();
            o.restore(counter_values.next().expect("counted"), slots)?;
        }
    }
    Ok(Checkpoint { config, trainer })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
