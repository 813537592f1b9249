//! Binary feature files, checkpoints, and atomic file replacement.
//!
//! Feature file: `"C3BN"`, version `u32`, `T u32`, `D u32`, then `T×D`
//! little-endian `f64` in row-major order.
//!
//! Checkpoint: `"C3BNCKPT"`, version `u32`, a length-prefixed `key=value`
//! metadata block, a blob count, then per blob: name length `u32`, UTF-8
//! name, rows `u32`, cols `u32`, little-endian `f64` data.

use std::fs;
use std::io::Write;
use std::path::Path;

use c3bn_core::model::{Baseline, ModelConfig, ModelParams};
use c3bn_core::Tensor2D;

use crate::error::{CliError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"C3BN";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"C3BNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes via a sibling temporary file and a rename, so readers see either
/// the old or the new contents.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn encode_features(t: &Tensor2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.buf.len() - self.pos))
        }
    }
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Tensor2D, String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f64s(rows * cols)?;
    r.finish()?;
    Tensor2D::new(rows, cols, data).map_err(|e| e.to_string())
}

/// Model parameters plus the metadata needed to rebuild them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    /// Last completed epoch, counting from 1.
    pub epoch: usize,
    pub c3bn: bool,
}

fn model_meta(c: &Checkpoint) -> String {
    let m = &c.params.config;
    format!(
        "baseline={}\nclasses={}\nfeature_dim={}\nembed_dim={}\nproj_dim={}\nkernel_width={}\ninit_std={:?}\nseed={}\nepoch={}\nc3bn={}\n",
        m.baseline.name(),
        m.classes,
        m.feature_dim,
        m.embed_dim,
        m.proj_dim,
        m.kernel_width,
        m.init_std,
        c.seed,
        c.epoch,
        if c.c3bn { "on" } else { "off" },
    )
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = model_meta(c);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(c.params.len() as u32).to_le_bytes());
    for (name, t) in c.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_meta(text: &str) -> std::result::Result<(ModelConfig, u64, usize, bool), String> {
    let mut cfg = ModelConfig::default();
    let (mut seed, mut epoch, mut c3bn) = (0, 0, false);
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad metadata line {line:?}"))?;
        let bad = |_| format!("bad metadata value {k}={v}");
        match k {
            "baseline" => cfg.baseline = Baseline::parse(v).ok_or_else(|| bad(()))?,
            "classes" => cfg.classes = v.parse().map_err(|_| bad(()))?,
            "feature_dim" => cfg.feature_dim = v.parse().map_err(|_| bad(()))?,
            "embed_dim" => cfg.embed_dim = v.parse().map_err(|_| bad(()))?,
            "proj_dim" => cfg.proj_dim = v.parse().map_err(|_| bad(()))?,
            "kernel_width" => cfg.kernel_width = v.parse().map_err(|_| bad(()))?,
            "init_std" => cfg.init_std = v.parse().map_err(|_| bad(()))?,
            "seed" => seed = v.parse().map_err(|_| bad(()))?,
            "epoch" => epoch = v.parse().map_err(|_| bad(()))?,
            "c3bn" => c3bn = v == "on",
            _ => log::warn!("checkpoint: ignoring unknown metadata key {k}"),
        }
    }
    Ok((cfg, seed, epoch, c3bn))
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|e| e.to_string())?;
    let (config, seed, epoch, c3bn) = parse_meta(meta)?;
    let n = r.u32()? as usize;
    let mut named = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let data = r.f64s(rows * cols)?;
        let t = Tensor2D::new(rows, cols, data).map_err(|e| format!("{name}: {e}"))?;
        named.push((name, t));
    }
    r.finish()?;
    let params = ModelParams::from_named(&config, named).map_err(|e| e.to_string())?;
    Ok(Checkpoint {
        params,
        seed,
        epoch,
        c3bn,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(c))
}
