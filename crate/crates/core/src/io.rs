//! Binary checkpoint container, metrics CSV and sweep export.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! b"DCPNASCK" | u32 version | u64 config hash | u64 epoch | u8 kind | u32 entries
//! entry: u8 tag | u16 name length | name bytes | payload
//!   tag 0 (tensor): u32 ndim | u64 dims… | f64 data…
//!   tag 1 (bytes):  u64 length | bytes…
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::ConfigHash;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCPNASCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Search = 0,
    Retrain = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: ConfigHash,
    pub epoch: u64,
    pub kind: CheckpointKind,
    pub entries: IndexMap<String, Entry>,
}

impl Checkpoint {
    pub fn new(config_hash: ConfigHash, epoch: u64, kind: CheckpointKind) -> Self {
        Self {
            config_hash,
            epoch,
            kind,
            entries: IndexMap::new(),
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Entry::Tensor(t));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.entries.insert(name.into(), Entry::Bytes(b));
    }

    pub fn put_json<T: Serialize>(&mut self, name: impl Into<String>, v: &T) -> Result<()> {
        self.put_bytes(name, serde_json::to_vec(v)?);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Bytes(_)) => Err(Error::Data(format!("checkpoint entry `{name}` is not a tensor"))),
            None => Err(Error::Data(format!("checkpoint has no entry `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.entries.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            Some(Entry::Tensor(_)) => Err(Error::Data(format!("checkpoint entry `{name}` is not a byte blob"))),
            None => Err(Error::Data(format!("checkpoint has no entry `{name}`"))),
        }
    }

    pub fn json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(self.bytes(name)?)?)
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> IndexMap<String, Tensor> {
        self.entries
            .iter()
            .filter_map(|(k, e)| match e {
                Entry::Tensor(t) => k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())),
                Entry::Bytes(_) => None,
            })
            .collect()
    }

    pub fn expect_hash(&self, expected: ConfigHash) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::HashMismatch {
                expected: expected.hex(),
                found: self.config_hash.hex(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        w.write_u64::<LittleEndian>(self.config_hash.0).expect("vec write");
        w.write_u64::<LittleEndian>(self.epoch).expect("vec write");
        w.write_u8(self.kind as u8).expect("vec write");
        w.write_u32::<LittleEndian>(self.entries.len() as u32).expect("vec write");
        for (name, e) in &self.entries {
            let tag = match e {
                Entry::Tensor(_) => 0,
                Entry::Bytes(_) => 1,
            };
            w.write_u8(tag).expect("vec write");
            w.write_u16::<LittleEndian>(name.len() as u16).expect("vec write");
            w.extend_from_slice(name.as_bytes());
            match e {
                Entry::Tensor(t) => {
                    w.write_u32::<LittleEndian>(t.ndim() as u32).expect("vec write");
                    for &d in t.shape() {
                        w.write_u64::<LittleEndian>(d as u64).expect("vec write");
                    }
                    for &v in t.data() {
                        w.write_f64::<LittleEndian>(v).expect("vec write");
                    }
                }
                Entry::Bytes(b) => {
                    w.write_u64::<LittleEndian>(b.len() as u64).expect("vec write");
                    w.extend_from_slice(b);
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let vpos = r.pos;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: vpos,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let config_hash = ConfigHash(r.u64()?);
        let epoch = r.u64()?;
        let kpos = r.pos;
        let kind = match r.u8()? {
            0 => CheckpointKind::Search,
            1 => CheckpointKind::Retrain,
            k => {
                return Err(Error::Parse {
                    offset: kpos,
                    message: format!("unknown checkpoint kind {k}"),
                })
            }
        };
        let count = r.u32()?;
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let tpos = r.pos;
            let tag = r.u8()?;
            let nlen = r.u16()? as usize;
            let npos = r.pos;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Parse {
                offset: npos,
                message: "entry name is not UTF-8".into(),
            })?;
            let e = match tag {
                0 => {
                    let ndim = r.u32()? as usize;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(r.u64()? as usize);
                    }
                    let n: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        data.push(r.f64()?);
                    }
                    Entry::Tensor(Tensor::new(shape, data)?)
                }
                1 => {
                    let len = r.u64()? as usize;
                    Entry::Bytes(r.take(len)?.to_vec())
                }
                t => {
                    return Err(Error::Parse {
                        offset: tpos,
                        message: format!("unknown entry tag {t}"),
                    })
                }
            };
            entries.insert(name, e);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                message: "trailing bytes after the last entry".into(),
            });
        }
        Ok(Self {
            config_hash,
            epoch,
            kind,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut b = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut b)?;
        Self::from_bytes(&b)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated: need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(self.take(2)?.read_u16::<LittleEndian>()?)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(self.take(4)?.read_u32::<LittleEndian>()?)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(self.take(8)?.read_u64::<LittleEndian>()?)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(self.take(8)?.read_f64::<LittleEndian>()?)
    }
}

/// One row of the per-epoch metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: u64,
    pub phase: String,
    pub epoch: u64,
    pub loss: f64,
    pub neg_g: f64,
    pub d: f64,
    pub l_r: f64,
    pub val_acc: f64,
    pub tau: usize,
    pub backtracked_count: usize,
    pub psi_norm: f64,
    pub config_hash: String,
}

/// One optimizer step; kept in memory and written to `steps.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub round: u64,
    pub phase: String,
    pub epoch: u64,
    pub loss: f64,
    pub neg_g: f64,
    pub d: f64,
    pub l_r: f64,
    pub tau: usize,
    pub backtracked_count: usize,
}

/// CSV text of a record list with a header row. Floats are written with
/// Rust's shortest round-trip formatting, so reruns are byte-identical.
pub fn records_to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub const EPOCH_COLUMNS: [&str; 12] = [
    "round",
    "phase",
    "epoch",
    "loss",
    "neg_g",
    "d",
    "l_r",
    "val_acc",
    "tau",
    "backtracked_count",
    "psi_norm",
    "config_hash",
];

pub const STEP_COLUMNS: [&str; 10] = [
    "step",
    "round",
    "phase",
    "epoch",
    "loss",
    "neg_g",
    "d",
    "l_r",
    "tau",
    "backtracked_count",
];

pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Final numbers of a run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub lambda: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub search_val_acc: f64,
    pub retrain_test_acc: Option<f64>,
}

/// Collects `summary.json` files below `root` into a sweep table with
/// columns `lambda, mu, val_acc, run`.
pub fn export_sweep(root: &Path) -> Result<String> {
    let mut rows: Vec<(f64, f64, f64, String)> = Vec::new();
    let mut dirs: Vec<_> = std::fs::read_dir(root)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    dirs.push(root.to_path_buf());
    dirs.sort();
    for d in dirs {
        let p = d.join("summary.json");
        if !p.is_file() {
            continue;
        }
        let s: RunSummary = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
        let acc = s.retrain_test_acc.unwrap_or(s.search_val_acc);
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push((s.lambda, s.mu, acc, name));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lambda", "mu", "val_acc", "run"])?;
    for (l, m, a, n) in rows {
        w.write_record([l.to_string(), m.to_string(), a.to_string(), n])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
