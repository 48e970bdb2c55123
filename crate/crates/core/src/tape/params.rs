//! Named parameter collections and a versioned binary checkpoint format.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Parameters keyed by name. `BTreeMap` keeps iteration order stable so that
/// optimizers, serialization, and digests are reproducible run to run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    arrays: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.arrays.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Iterates in sorted-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|k| k.as_str())
    }

    pub fn total_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// He-style initialization scaled by fan-in; suits ReLU stacks.
    pub fn init_he(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let std = (2.0 / rows as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| {
            // Box-Muller from two uniforms keeps us off rand_distr.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        self.insert(name, value);
    }

    /// Uniform Xavier/Glorot initialization; suits linear/attention layers.
    pub fn init_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.insert(name, value);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, Array2::from_elem((rows, cols), v));
    }

    /// SHA-256 over names, shapes, and little-endian scalar bytes; changes
    /// iff any parameter value changes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, arr) in &self.arrays {
            hasher.update(name.as_bytes());
            hasher.update((arr.dim().0 as u64).to_le_bytes());
            hasher.update((arr.dim().1 as u64).to_le_bytes());
            for v in arr.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// On-disk training state: parameters plus free-form metadata (epoch counter,
/// optimizer moments flattened as extra arrays, configuration digest...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub meta: Vec<(String, String)>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
        } else {
            self.meta.push((key.to_string(), value.to_string()));
        }
    }
}

const MAGIC: &[u8; 8] = b"P2GCKPT\0";
const VERSION: u32 = 1;

/// Writes a checkpoint; the encoding stores every f64 as its exact
/// little-endian bytes, so read/write round-trips are bit-identical.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    write_str(&mut buf, &ckpt.config_digest);
    buf.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        write_str(&mut buf, k);
        write_str(&mut buf, v);
    }
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, arr) in ckpt.params.iter() {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(arr.dim().0 as u64).to_le_bytes());
        buf.extend_from_slice(&(arr.dim().1 as u64).to_le_bytes());
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::write_bytes(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = crate::io::read_bytes(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::parse(path, "not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported checkpoint version {version}")));
    }
    let config_digest = read_str(&mut r, path)?;
    let n_meta = read_u32(&mut r, path)? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = read_str(&mut r, path)?;
        let v = read_str(&mut r, path)?;
        meta.push((k, v));
    }
    let n_params = read_u32(&mut r, path)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name = read_str(&mut r, path)?;
        let rows = read_u64(&mut r, path)? as usize;
        let cols = read_u64(&mut r, path)? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::parse(path, "array dimensions overflow"))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path)?;
            data.push(f64::from_le_bytes(b));
        }
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::parse(path, format!("array shape: {e}")))?;
        params.insert(&name, arr);
    }
    Ok(Checkpoint { config_digest, meta, params })
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], out: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(out)
        .map_err(|_| Error::parse(path, "truncated checkpoint"))
}

fn read_u32(r: &mut &[u8], path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8], path: &Path) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    if len > r.len() {
        return Err(Error::parse(path, "truncated checkpoint string"));
    }
    let (head, tail) = r.split_at(len);
    let s = std::str::from_utf8(head)
        .map_err(|_| Error::parse(path, "checkpoint string is not utf-8"))?
        .to_string();
    *r = tail;
    Ok(s)
}
