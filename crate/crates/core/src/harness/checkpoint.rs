//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CADACKPT" | u32 version | u32 header length | header JSON
//! u32 entry count | entries
//! entry: u32 name length | name | u8 kind | u32 rank | u64 dims.. | f32 data..
//! ```
//!
//! Entry names are namespaced: `student/`, `teacher/`, `disc/enc/`,
//! `disc/dec{k}/` for weights and `opt/seg/`, `opt/disc/enc/`,
//! `opt/disc/dec{k}/` for optimizer slots (`{param}#{slot}`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptFlags, Discriminator, Lambdas};
use crate::error::{Error, Result};
use crate::nn::{OptKind, OptState, ParamKind, ParamSet, Tensor};
use crate::segnet::SegNetConfig;

use super::TrainState;

const MAGIC: &[u8; 8] = b"CADACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Trainable,
    Buffer,
    OptSlot,
}

impl EntryKind {
    fn code(self) -> u8 {
        match self {
            EntryKind::Trainable => 0,
            EntryKind::Buffer => 1,
            EntryKind::OptSlot => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EntryKind::Trainable),
            1 => Some(EntryKind::Buffer),
            2 => Some(EntryKind::OptSlot),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptHeader {
    pub kind: OptKind,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub net: SegNetConfig,
    pub lambdas: Lambdas,
    pub flags: AdaptFlags,
    pub iter: u64,
    pub epoch: u64,
    pub student_step: u64,
    pub teacher_step: u64,
    pub disc_steps: Vec<u64>,
    pub seg_opt: OptHeader,
    pub disc_opts: Vec<OptHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub entries: Vec<Entry>,
}

fn push_params(entries: &mut Vec<Entry>, prefix: &str, params: &ParamSet<f32>) {
    for (name, p) in params.iter() {
        entries.push(Entry {
            name: format!("{prefix}{name}"),
            kind: match p.kind {
                ParamKind::Trainable => EntryKind::Trainable,
                ParamKind::Buffer => EntryKind::Buffer,
            },
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        });
    }
}

fn push_opt(entries: &mut Vec<Entry>, prefix: &str, opt: &OptState<f32>) -> OptHeader {
    for (name, slots) in &opt.buffers {
        for (i, t) in slots.iter().enumerate() {
            entries.push(Entry {
                name: format!("{prefix}{name}#{i}"),
                kind: EntryKind::OptSlot,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }
    OptHeader { kind: opt.kind, t: opt.t }
}

fn disc_prefixes(n_dec: usize) -> Vec<String> {
    std::iter::once("enc/".to_string())
        .chain((0..n_dec).map(|k| format!("dec{k}/")))
        .collect()
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let mut entries = Vec::new();
        push_params(&mut entries, "student/", &state.student);
        push_params(&mut entries, "teacher/", &state.teacher);
        let discs: Vec<&Discriminator<f32>> =
            std::iter::once(&state.adaptors.enc).chain(state.adaptors.dec.iter()).collect();
        let prefixes = disc_prefixes(state.adaptors.dec.len());
        for (d, p) in discs.iter().zip(&prefixes) {
            push_params(&mut entries, &format!("disc/{p}"), &d.params);
        }
        let seg_opt = push_opt(&mut entries, "opt/seg/", &state.seg_opt);
        let disc_opts = discs
            .iter()
            .zip(&prefixes)
            .map(|(d, p)| push_opt(&mut entries, &format!("opt/disc/{p}"), &d.opt))
            .collect();
        Checkpoint {
            header: Header {
                net: state.net,
                lambdas: state.adaptors.lambdas,
                flags: state.adaptors.flags,
                iter: state.iter,
                epoch: state.epoch,
                student_step: state.student.step(),
                teacher_step: state.teacher.step(),
                disc_steps: discs.iter().map(|d| d.params.step()).collect(),
                seg_opt,
                disc_opts,
            },
            entries,
        }
    }

    fn fill_params(&self, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
        let mut seen = 0;
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix) && e.kind != EntryKind::OptSlot) {
            let name = &e.name[prefix.len()..];
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::ParamMismatch(format!("checkpoint entry `{}` unknown", e.name)))?;
            if p.value.shape() != e.shape.as_slice() {
                return Err(Error::ParamMismatch(format!(
                    "`{}`: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(&e.data);
            p.grad = None;
            seen += 1;
        }
        if seen != params.len() {
            return Err(Error::ParamMismatch(format!(
                "checkpoint has {seen} of {} entries under `{prefix}`",
                params.len()
            )));
        }
        Ok(())
    }

    fn fill_opt(&self, prefix: &str, header: &OptHeader, opt: &mut OptState<f32>) -> Result<()> {
        opt.kind = header.kind;
        opt.t = header.t;
        opt.buffers.clear();
        for e in self.entries.iter().filter(|e| e.kind == EntryKind::OptSlot && e.name.starts_with(prefix)) {
            let rest = &e.name[prefix.len()..];
            let (name, slot) = rest
                .rsplit_once('#')
                .ok_or_else(|| Error::ParamMismatch(format!("optimizer entry `{}` lacks a slot", e.name)))?;
            let slot: usize = slot
                .parse()
                .map_err(|_| Error::ParamMismatch(format!("optimizer entry `{}` has a bad slot", e.name)))?;
            let slots = opt.buffers.entry(name.to_string()).or_default();
            if slot != slots.len() {
                return Err(Error::ParamMismatch(format!("optimizer slots of `{name}` out of order")));
            }
            slots.push(Tensor::new(e.shape.clone(), e.data.clone())?);
        }
        Ok(())
    }

    /// Copies every entry into `state`, which must have the same layout.
    pub fn restore(&self, state: &mut TrainState) -> Result<()> {
        let h = &self.header;
        if h.net != state.net {
            return Err(Error::ParamMismatch(format!(
                "checkpoint network {:?} differs from configured {:?}",
                h.net, state.net
            )));
        }
        let n_dec = state.adaptors.dec.len();
        if h.disc_steps.len() != n_dec + 1 || h.disc_opts.len() != n_dec + 1 {
            return Err(Error::ParamMismatch("checkpoint discriminator count".into()));
        }
        self.fill_params("student/", &mut state.student)?;
        self.fill_params("teacher/", &mut state.teacher)?;
        state.student.set_step(h.student_step);
        state.teacher.set_step(h.teacher_step);
        self.fill_opt("opt/seg/", &h.seg_opt, &mut state.seg_opt)?;
        let prefixes = disc_prefixes(n_dec);
        let discs = std::iter::once(&mut state.adaptors.enc).chain(state.adaptors.dec.iter_mut());
        for (((d, p), step), oh) in discs.zip(&prefixes).zip(&h.disc_steps).zip(&h.disc_opts) {
            self.fill_params(&format!("disc/{p}"), &mut d.params)?;
            d.params.set_step(*step);
            self.fill_opt(&format!("opt/disc/{p}"), oh, &mut d.opt)?;
        }
        state.iter = h.iter;
        state.epoch = h.epoch;
        Ok(())
    }

    /// Parameters stored under `prefix` (for example `teacher/`), as a
    /// fresh set in checkpoint order.
    pub fn params(&self, prefix: &str) -> Result<ParamSet<f32>> {
        let mut set = ParamSet::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix) && e.kind != EntryKind::OptSlot) {
            let kind = match e.kind {
                EntryKind::Trainable => ParamKind::Trainable,
                _ => ParamKind::Buffer,
            };
            set.insert(&e.name[prefix.len()..], Tensor::new(e.shape.clone(), e.data.clone())?, kind)?;
        }
        if set.is_empty() {
            return Err(Error::ParamMismatch(format!("checkpoint has no entries under `{prefix}`")));
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.kind.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let header_len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| format!("checkpoint header: {e}"))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "entry name is not UTF-8")?;
            let kind = EntryKind::from_code(r.take(1)?[0]).ok_or_else(|| format!("entry `{name}`: bad kind"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or("entry too large")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(Entry { name, kind, shape, data });
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after last entry".into());
        }
        Ok(Checkpoint { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Checkpoint file name for a completed epoch.
pub fn file_name(epoch: u64) -> String {
    format!("ckpt_epoch{epoch:04}.bin")
}

/// The checkpoint with the highest epoch in `dir`, if any.
pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    let read = match fs::read_dir(dir) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in read {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let epoch = name
            .strip_prefix("ckpt_epoch")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(epoch) = epoch {
            if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
                best = Some((epoch, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
