//! Binary checkpoint codec.
//!
//! Layout:
//! - the magic line `promptfuse-checkpoint 1`;
//! - the run configuration and training counters as `key = value` lines;
//! - the line `--`;
//! - a little-endian `u32` array count, then per array: `u32` name length,
//!   UTF-8 name, `u32` rank, `u32` dims, `f32` values;
//! - a little-endian `u64` FNV-1a checksum of everything before it.
//!
//! Arrays are the network parameters in declaration order, followed by the
//! Adam moments under `adam.m.<name>` and `adam.v.<name>`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::losses::LossReport;
use crate::tensor::Tensor;
use crate::train::{AdamState, RunConfig, TrainState};

pub const MAGIC: &str = "promptfuse-checkpoint 1\n";
const SEPARATOR: &str = "--\n";

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.shape().len());
    for &d in t.shape() {
        push_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(cfg: &RunConfig, state: &TrainState) -> Vec<u8> {
    let mut kv = KeyValues::default();
    cfg.write_kv(&mut kv);
    kv.set("state.step", state.step);
    kv.set("state.epoch", state.epoch);
    kv.set("state.batch_cursor", state.batch_cursor);
    kv.set("state.adam_t", state.adam.t);
    kv.set("state.running.intensity", state.running.intensity);
    kv.set("state.running.texture", state.running.texture);
    kv.set("state.running.color", state.running.color);
    kv.set("state.running.total", state.running.total);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(kv.to_text().as_bytes());
    out.extend_from_slice(SEPARATOR.as_bytes());
    let params = state.network.params();
    push_u32(&mut out, 3 * params.len());
    for (name, t) in params.iter() {
        push_array(&mut out, name, t);
    }
    for (prefix, moments) in [("adam.m.", &state.adam.m), ("adam.v.", &state.adam.v)] {
        for ((name, _), t) in params.iter().zip(moments) {
            push_array(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ck("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn array(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u32()?;
        let name = core::str::from_utf8(self.take(len)?).map_err(|_| ck("array name is not UTF-8"))?.into();
        let rank = self.u32()?;
        if rank > 8 {
            return Err(ck(format!("array `{name}` has implausible rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.u32()).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ck("array too large"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| ck("array too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok((name, shape, data))
    }
}

/// Decodes a checkpoint, validating the checksum and every array against
/// the parameter plan implied by the stored configuration.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, TrainState)> {
    if bytes.len() < MAGIC.len() + 8 || !bytes.starts_with(MAGIC.as_bytes()) {
        return Err(ck("not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(ck("checksum mismatch, file is corrupted"));
    }
    let rest = &body[MAGIC.len()..];
    let sep = rest
        .windows(SEPARATOR.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == SEPARATOR.as_bytes())
        .ok_or_else(|| ck("missing header terminator"))?;
    let header = core::str::from_utf8(&rest[..=sep]).map_err(|_| ck("header is not UTF-8"))?;
    let mut kv = KeyValues::parse(header)?;
    let step = kv.take_required("state.step")?;
    let epoch = kv.take_required("state.epoch")?;
    let batch_cursor = kv.take_required("state.batch_cursor")?;
    let adam_t = kv.take_required("state.adam_t")?;
    let running = LossReport {
        intensity: kv.take_required("state.running.intensity")?,
        texture: kv.take_required("state.running.texture")?,
        color: kv.take_required("state.running.color")?,
        total: kv.take_required("state.running.total")?,
    };
    let cfg = RunConfig::take_kv(&mut kv)?;
    kv.ensure_empty()?;
    let mut network = cfg.build_network()?;

    let mut reader = Reader { bytes: rest, pos: sep + 1 + SEPARATOR.len() };
    let count = reader.u32()?;
    let n = network.params().len();
    if count != 3 * n {
        return Err(ck(format!("expected {} arrays for this configuration, found {count}", 3 * n)));
    }
    let plan = network.parameter_plan();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (section, prefix) in ["", "adam.m.", "adam.v."].into_iter().enumerate() {
        for (i, (pname, pshape)) in plan.iter().enumerate() {
            let (name, shape, data) = reader.array()?;
            let expected = format!("{prefix}{pname}");
            if name != expected {
                return Err(ck(format!("expected array `{expected}`, found `{name}`")));
            }
            if &shape != pshape {
                return Err(ck(format!("array `{name}` has shape {shape:?}, configuration expects {pshape:?}")));
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(ck(format!("array `{name}` holds non-finite values")));
            }
            let t = Tensor::new(&shape, data)?;
            match section {
                0 => network.params_mut().tensors_mut()[i] = t,
                1 => m.push(t),
                _ => v.push(t),
            }
        }
    }
    if reader.pos != rest.len() {
        return Err(ck("trailing bytes after the last array"));
    }
    let state = TrainState { step, epoch, batch_cursor, network, adam: AdamState { m, v, t: adam_t }, running };
    Ok((cfg, state))
}
