//! Versioned checkpoint container.
//!
//! Layout: a text header (magic, version, step, rng state, optimizer
//! scalars, the canonical model config, a tensor manifest) followed by the
//! little-endian f64 payloads in manifest order.
//!
//! ```text
//! SLBCKPT1
//! version 1
//! step <n>
//! rng <seed hex> <stream> <word pos>
//! adam none | adam <step> <lr> <beta1> <beta2> <eps> <weight decay> <clip>
//! config <bytes>
//! <canonical config text>
//! tensors <count>
//! <name> <d0>x<d1> <offset> <bytes> <sha256 prefix>
//! payload <bytes>
//! <binary>
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, SlbModel};
use crate::config::ConfigError;
use crate::numerics::{AdamW, AdamWConfig, Tensor};

const MAGIC: &str = "SLBCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checksum mismatch for tensor '{0}'")]
    Checksum(String),
    #[error("tensor '{name}' has shape {found:?}, config implies {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor '{0}' missing from checkpoint")]
    MissingTensor(String),
    #[error("unexpected tensor '{0}' in checkpoint")]
    UnexpectedTensor(String),
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SlbModel,
    pub optimizer: Option<AdamW>,
    pub rng: RngState,
    pub step: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn checksum(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes)[..8])
}

fn shape_text(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let groups = self.model.params.groups();
        let mut out: Vec<(String, &Tensor)> =
            groups.iter().map(|p| (p.name.clone(), &*p.tensor)).collect();
        if let Some(opt) = &self.optimizer {
            for (p, m) in groups.iter().zip(&opt.m) {
                out.push((format!("adam.m.{}", p.name), m));
            }
            for (p, v) in groups.iter().zip(&opt.v) {
                out.push((format!("adam.v.{}", p.name), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let mut header = String::new();
        let _ = writeln!(header, "{MAGIC}");
        let _ = writeln!(header, "version {CHECKPOINT_VERSION}");
        let _ = writeln!(header, "step {}", self.step);
        let _ = writeln!(
            header,
            "rng {} {} {}",
            hex(&self.rng.seed),
            self.rng.stream,
            self.rng.word_pos
        );
        match &self.optimizer {
            None => header.push_str("adam none\n"),
            Some(o) => {
                let c = o.config;
                let _ = writeln!(
                    header,
                    "adam {} {} {} {} {} {} {}",
                    o.step, c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.clip
                );
            }
        }
        let config = self.model.config.to_text();
        let _ = writeln!(header, "config {}", config.len());
        header.push_str(&config);
        let _ = writeln!(header, "tensors {}", tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let _ = writeln!(
                header,
                "{name} {} {start} {} {}",
                shape_text(t.shape()),
                payload.len() - start,
                checksum(&payload[start..])
            );
        }
        let _ = writeln!(header, "payload {}", payload.len());
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if !bytes.starts_with(MAGIC.as_bytes()) || r.line("magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version: u32 = r.field("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let step: u64 = r.field("step")?;
        let rng = parse_rng(&r.line("rng")?)?;
        let adam_line = r.line("adam")?;
        let config_len: usize = r.field("config")?;
        let config_text = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|_| CheckpointError::Header("config is not UTF-8".into()))?
            .to_string();
        let config = ModelConfig::from_text(&config_text)?;
        let count: usize = r.field("tensors")?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            manifest.push(parse_entry(&r.line("tensor manifest")?)?);
        }
        let payload_len: usize = r.field("payload")?;
        let payload = r.take(payload_len, "payload")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Header(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }

        let mut template = SlbModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut optimizer = parse_adam(&adam_line, &template)?;
        let n = template.params.len();
        let mut seen = vec![false; 3 * n];
        for e in &manifest {
            let (slot, pname) = if let Some(p) = e.name.strip_prefix("adam.m.") {
                (1, p)
            } else if let Some(p) = e.name.strip_prefix("adam.v.") {
                (2, p)
            } else {
                (0, e.name.as_str())
            };
            let idx = template
                .params
                .position(pname)
                .ok()
                .filter(|_| slot == 0 || optimizer.is_some())
                .ok_or_else(|| CheckpointError::UnexpectedTensor(e.name.clone()))?;
            let expected = template.params.groups()[idx].tensor.shape().to_vec();
            if e.shape != expected {
                return Err(CheckpointError::Shape {
                    name: e.name.clone(),
                    expected,
                    found: e.shape.clone(),
                });
            }
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| CheckpointError::Truncated(e.name.clone()))?;
            if e.len != 8 * expected.iter().product::<usize>() {
                return Err(CheckpointError::Header(format!(
                    "tensor '{}' byte length {} disagrees with its shape",
                    e.name, e.len
                )));
            }
            let raw = &payload[e.offset..end];
            if checksum(raw) != e.checksum {
                return Err(CheckpointError::Checksum(e.name.clone()));
            }
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(expected, data).map_err(ModelError::from)?;
            seen[slot * n + idx] = true;
            match slot {
                0 => template.params.groups_mut()[idx].tensor = Arc::new(t),
                1 => optimizer.as_mut().expect("checked above").m[idx] = t,
                _ => optimizer.as_mut().expect("checked above").v[idx] = t,
            }
        }
        let slots = if optimizer.is_some() { 3 } else { 1 };
        for (i, ok) in seen.iter().enumerate().take(slots * n) {
            if !ok {
                let name = &template.params.groups()[i % n].name;
                return Err(CheckpointError::MissingTensor(match i / n {
                    0 => name.clone(),
                    1 => format!("adam.m.{name}"),
                    _ => format!("adam.v.{name}"),
                }));
            }
        }
        Ok(Checkpoint {
            model: template,
            optimizer,
            rng,
            step,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self, what: &str) -> Result<String, CheckpointError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        self.pos += end + 1;
        String::from_utf8(rest[..end].to_vec())
            .map_err(|_| CheckpointError::Header(format!("{what} line is not UTF-8")))
    }

    /// Reads a `key value` line.
    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CheckpointError> {
        let line = self.line(key)?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::Header(format!("expected '{key} <value>', found '{line}'")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn bad(line: &str) -> CheckpointError {
    CheckpointError::Header(format!("cannot parse '{line}'"))
}

fn parse_rng(line: &str) -> Result<RngState, CheckpointError> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 4 || f[0] != "rng" || f[1].len() != 64 {
        return Err(bad(line));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&f[1][2 * i..2 * i + 2], 16).map_err(|_| bad(line))?;
    }
    Ok(RngState {
        seed,
        stream: f[2].parse().map_err(|_| bad(line))?,
        word_pos: f[3].parse().map_err(|_| bad(line))?,
    })
}

fn parse_adam(line: &str, model: &SlbModel) -> Result<Option<AdamW>, CheckpointError> {
    if line == "adam none" {
        return Ok(None);
    }
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 8 || f[0] != "adam" {
        return Err(bad(line));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
    let config = AdamWConfig {
        lr: num(2)?,
        beta1: num(3)?,
        beta2: num(4)?,
        eps: num(5)?,
        weight_decay: num(6)?,
        clip: num(7)?,
    };
    let mut opt = AdamW::new(config, &model.params);
    opt.step = f[1].parse().map_err(|_| bad(line))?;
    Ok(Some(opt))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    checksum: String,
}

fn parse_entry(line: &str) -> Result<Entry, CheckpointError> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 5 {
        return Err(bad(line));
    }
    let shape = f[1]
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad(line)))
        .collect::<Result<_, _>>()?;
    Ok(Entry {
        name: f[0].to_string(),
        shape,
        offset: f[2].parse().map_err(|_| bad(line))?,
        len: f[3].parse().map_err(|_| bad(line))?,
        checksum: f[4].to_string(),
    })
}
