//! Binary checkpoint format. One file captures a full trainer snapshot so a
//! resumed run continues bit for bit.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic           8 bytes, b"DMRCKPT1"
//! payload_len     u64
//! payload_sha256  32 bytes
//! payload:
//!   config_hash   string (u64 length + UTF-8 bytes)
//!   config_toml   string, human-readable echo of the configuration
//!   epochs_done   u64
//!   global_step   u64
//!   hard flag     u8; when 1: selection_epoch u64, count u64, indices u64*
//!   stats         u64 count, then (index u64, sum f64, elements u64)*
//!   params        u64 group count, then (name string, u64 len, f64* len)*
//!   bn buffers    4 f64 vectors (u64 len + values), mean/var for each head
//!   velocity      f64 vector
//!   streams       u64 count, then (label string, seed 32 bytes, pos u128)*
//! ```
//!
//! Every f64 is stored as the little-endian bytes of its bit pattern, so
//! save, load, save round-trips to identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{DmrError, Result};
use crate::mining::HardSet;
use crate::model::{BnBuffers, Layout};
use crate::train::TrainerState;

const MAGIC: &[u8; 8] = b"DMRCKPT1";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }

    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn u128(&mut self, x: u128) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_bits().to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DmrError::Integrity(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.take(8)?.try_into().unwrap(),
        )))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.len_checked()?;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| DmrError::Integrity("checkpoint string is not UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let len = self.len_checked()?;
        (0..len).map(|_| self.f64()).collect()
    }

    // Length fields bounded by the remaining bytes; a corrupt length must
    // not drive a huge allocation.
    fn len_checked(&mut self) -> Result<usize> {
        let len = self.u64()? as usize;
        if len > self.buf.len() - self.pos {
            return Err(DmrError::Integrity(format!(
                "checkpoint length field {len} exceeds remaining {} bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(len)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(DmrError::Integrity(format!(
                "{} trailing bytes after checkpoint payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_payload(config: &ExperimentConfig, state: &TrainerState) -> Result<Vec<u8>> {
    let layout = Layout::build(&config.model_dims());
    if state.params.len() != layout.total_len() {
        return Err(DmrError::Incompatible(format!(
            "state has {} parameters, layout expects {}",
            state.params.len(),
            layout.total_len()
        )));
    }
    let mut w = Writer::new();
    w.str(&config.hash());
    w.str(&config.to_toml_string()?);
    w.u64(state.epochs_done as u64);
    w.u64(state.global_step);
    match &state.hard {
        None => w.u8(0),
        Some(h) => {
            w.u8(1);
            w.u64(h.epoch_of_selection as u64);
            w.u64(h.indices.len() as u64);
            for &j in &h.indices {
                w.u64(j);
            }
        }
    }
    w.u64(state.stats_raw.len() as u64);
    for (&j, &(sum, count)) in &state.stats_raw {
        w.u64(j);
        w.f64(sum);
        w.u64(count);
    }
    w.u64(layout.groups().len() as u64);
    for info in layout.groups() {
        w.str(&info.name);
        w.f64s(&state.params[info.offset..info.offset + info.len]);
    }
    w.f64s(&state.bn.mu_mean);
    w.f64s(&state.bn.mu_var);
    w.f64s(&state.bn.sigma_mean);
    w.f64s(&state.bn.sigma_var);
    w.f64s(&state.velocity);
    let streams = [
        ("shuffle", &state.shuffle_state),
        ("mask", &state.mask_state),
        ("eps", &state.eps_state),
    ];
    w.u64(streams.len() as u64);
    for (label, (seed, pos)) in streams {
        w.str(label);
        w.buf.extend_from_slice(seed);
        w.u128(*pos);
    }
    Ok(w.buf)
}

pub fn save_to_vec(config: &ExperimentConfig, state: &TrainerState) -> Result<Vec<u8>> {
    let payload = encode_payload(config, state)?;
    let mut out = Vec::with_capacity(payload.len() + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(path: &Path, config: &ExperimentConfig, state: &TrainerState) -> Result<()> {
    std::fs::write(path, save_to_vec(config, state)?)?;
    Ok(())
}

/// Split a checkpoint file into its checked payload.
fn verified_payload(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(DmrError::Integrity(
            "not a checkpoint: bad magic or too short".into(),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let stored_digest = &bytes[16..48];
    let payload = &bytes[48..];
    if payload.len() != len {
        return Err(DmrError::Integrity(format!(
            "payload length {} does not match header {len}",
            payload.len()
        )));
    }
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored_digest {
        return Err(DmrError::Integrity("checkpoint checksum mismatch".into()));
    }
    Ok(payload)
}

/// Read the configuration a checkpoint was written under, without needing
/// it up front. The checksum is verified first.
pub fn peek_config(bytes: &[u8]) -> Result<ExperimentConfig> {
    let payload = verified_payload(bytes)?;
    let mut r = Reader::new(payload);
    let _hash = r.str()?;
    let toml = r.str()?;
    ExperimentConfig::from_toml_str(&toml)
}

pub fn peek_config_file(path: &Path) -> Result<ExperimentConfig> {
    peek_config(&std::fs::read(path)?)
}

pub fn load_from_slice(bytes: &[u8], expected: &ExperimentConfig) -> Result<TrainerState> {
    let payload = verified_payload(bytes)?;
    let mut r = Reader::new(payload);

    let hash = r.str()?;
    if hash != expected.hash() {
        return Err(DmrError::Incompatible(
            "checkpoint was written under a different configuration".into(),
        ));
    }
    let _config_echo = r.str()?;
    let epochs_done = r.u64()? as usize;
    let global_step = r.u64()?;

    let hard = match r.u8()? {
        0 => None,
        1 => {
            let epoch_of_selection = r.u64()? as usize;
            let count = r.u64()? as usize;
            let mut indices = BTreeSet::new();
            for _ in 0..count {
                indices.insert(r.u64()?);
            }
            Some(HardSet {
                indices,
                epoch_of_selection,
            })
        }
        other => {
            return Err(DmrError::Integrity(format!(
                "bad hard-set flag {other} in checkpoint"
            )))
        }
    };

    let stat_count = r.u64()? as usize;
    let mut stats_raw = BTreeMap::new();
    for _ in 0..stat_count {
        let j = r.u64()?;
        let sum = r.f64()?;
        let count = r.u64()?;
        stats_raw.insert(j, (sum, count));
    }

    let layout = Layout::build(&expected.model_dims());
    let group_count = r.u64()? as usize;
    if group_count != layout.groups().len() {
        return Err(DmrError::Incompatible(format!(
            "checkpoint has {group_count} parameter groups, architecture has {}",
            layout.groups().len()
        )));
    }
    let mut params = vec![0.0; layout.total_len()];
    for info in layout.groups() {
        let name = r.str()?;
        if name != info.name {
            return Err(DmrError::Incompatible(format!(
                "parameter group {name:?} where {:?} was expected",
                info.name
            )));
        }
        let values = r.f64s()?;
        if values.len() != info.len {
            return Err(DmrError::Incompatible(format!(
                "group {name:?} has {} values, architecture needs {}",
                values.len(),
                info.len
            )));
        }
        params[info.offset..info.offset + info.len].copy_from_slice(&values);
    }

    let bn = BnBuffers {
        mu_mean: r.f64s()?,
        mu_var: r.f64s()?,
        sigma_mean: r.f64s()?,
        sigma_var: r.f64s()?,
    };
    let velocity = r.f64s()?;

    let stream_count = r.u64()? as usize;
    if stream_count != 3 {
        return Err(DmrError::Integrity(format!(
            "expected 3 stream states, found {stream_count}"
        )));
    }
    let mut states: BTreeMap<String, ([u8; 32], u128)> = BTreeMap::new();
    for _ in 0..3 {
        let label = r.str()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let pos = r.u128()?;
        states.insert(label, (seed, pos));
    }
    r.finish()?;

    let mut stream = |label: &str| -> Result<([u8; 32], u128)> {
        states
            .remove(label)
            .ok_or_else(|| DmrError::Integrity(format!("stream {label:?} missing from checkpoint")))
    };

    Ok(TrainerState {
        epochs_done,
        global_step,
        params,
        bn,
        velocity,
        stats_raw,
        hard,
        shuffle_state: stream("shuffle")?,
        mask_state: stream("mask")?,
        eps_state: stream("eps")?,
    })
}

pub fn load(path: &Path, expected: &ExperimentConfig) -> Result<TrainerState> {
    load_from_slice(&std::fs::read(path)?, expected)
}
