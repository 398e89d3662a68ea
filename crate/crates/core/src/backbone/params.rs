//! Named parameter tensors, gradient stores and the checkpoint archive.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{LddmError, Result};

/// Named real tensors in insertion order. Every tensor is 2-D; biases are `1 x n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: IndexMap<String, Array2<f64>>,
}

/// Gradients share the layout of the parameters they belong to.
pub type GradStore = ParameterStore;

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(LddmError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(t) if t.dim() == value.dim() => {
                *t = value;
                Ok(())
            }
            Some(t) => Err(LddmError::ShapeMismatch(format!(
                "`{name}`: expected {:?}, got {:?}",
                t.dim(),
                value.dim()
            ))),
            None => Err(LddmError::InvalidArgument(format!("unknown parameter `{name}`"))),
        }
    }

    /// Truncated-normal weights at the given standard deviation.
    pub fn init_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let t = Array2::from_shape_fn((rows, cols), |_| truncated_normal(rng, std));
        self.insert(name, t)
    }

    /// Redraw an existing tensor with truncated-normal entries.
    pub fn reset_normal<R: Rng + ?Sized>(&mut self, name: &str, std: f64, rng: &mut R) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| LddmError::InvalidArgument(format!("unknown parameter `{name}`")))?;
        t.mapv_inplace(|_| truncated_normal(rng, std));
        Ok(())
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| LddmError::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// A zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Array2::zeros(v.dim()))).collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((a, x), (b, y))| a == b && x.dim() == y.dim())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(LddmError::ShapeMismatch("parameter stores differ in names or shapes".into()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// Multiply every entry by `c`.
    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * c);
        }
    }

    /// Accumulate `other` (same layout) into `self`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            *a += b;
        }
        Ok(())
    }

    /// Copy of the tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> Self {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect(),
        }
    }

    pub fn extend(&mut self, other: Self) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the f32 payload, as written to checkpoints.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update((*x as f32).to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

const MAGIC: &str = "LDDM-CHECKPOINT v1";

/// A checkpoint archive: metadata lines plus named tensors.
///
/// Layout: a UTF-8 header
///
/// ```text
/// LDDM-CHECKPOINT v1
/// meta <key> <value>
/// tensor <name> <rows> <cols> f32 <byte offset>
/// payload <total bytes>
/// ```
///
/// followed by the little-endian f32 payload. Offsets are relative to the
/// first payload byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: ParameterStore,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(LddmError::InvalidArgument(format!("bad metadata entry `{k}`")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.tensors.iter() {
            if name.contains(char::is_whitespace) {
                return Err(LddmError::InvalidArgument(format!("bad tensor name `{name}`")));
            }
            header.push_str(&format!("tensor {name} {} {} f32 {offset}\n", t.nrows(), t.ncols()));
            offset += t.len() * 4;
        }
        header.push_str(&format!("payload {offset}\n"));
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(header.as_bytes())?;
        for (_, t) in self.tensors.iter() {
            for v in t.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(LddmError::Parse(format!("{}: not a checkpoint", path.display())));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        let total;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(LddmError::Parse("truncated checkpoint header".into()));
            }
            let l = line.trim_end_matches('\n');
            let mut parts = l.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let f: Vec<&str> = parts.next().unwrap_or("").split(' ').collect();
                    if f.len() != 5 || f[3] != "f32" {
                        return Err(LddmError::Parse(format!("bad tensor line `{l}`")));
                    }
                    let p = |s: &str| s.parse::<usize>().map_err(|e| LddmError::Parse(e.to_string()));
                    entries.push((f[0].to_string(), p(f[1])?, p(f[2])?, p(f[4])?));
                }
                Some("payload") => {
                    total = parts
                        .next()
                        .unwrap_or("")
                        .parse::<usize>()
                        .map_err(|e| LddmError::Parse(e.to_string()))?;
                    break;
                }
                _ => return Err(LddmError::Parse(format!("unexpected header line `{l}`"))),
            }
        }
        let mut payload = vec![0u8; total];
        r.read_exact(&mut payload)?;
        let mut tensors = ParameterStore::new();
        for (name, rows, cols, off) in entries {
            let end = off + rows * cols * 4;
            if end > total {
                return Err(LddmError::Parse(format!("tensor `{name}` overruns payload")));
            }
            let vals: Vec<f64> = payload[off..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let t = Array2::from_shape_vec((rows, cols), vals).map_err(|e| LddmError::Parse(e.to_string()))?;
            tensors.insert(name, t)?;
        }
        Ok(Checkpoint { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn checkpoint_roundtrip_preserves_f32_values() {
        let mut rng = StreamKey::root(1).rng();
        let mut p = ParameterStore::new();
        p.init_normal("a.w", 3, 4, 0.02, &mut rng).unwrap();
        p.init_zeros("a.b", 1, 4).unwrap();
        p.init_normal("ema.a.w", 3, 4, 1.0, &mut rng).unwrap();
        let mut ck = Checkpoint { meta: BTreeMap::new(), tensors: p.clone() };
        ck.meta.insert("step".into(), "12".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.meta["step"], "12");
        assert!(back.tensors.same_layout(&p));
        for ((_, a), (_, b)) in back.tensors.iter().zip(p.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, (*y as f32) as f64);
            }
        }
        assert_eq!(back.tensors.checksum(), p.checksum());
    }

    #[test]
    fn truncated_normal_stays_within_two_std() {
        let mut rng = StreamKey::root(2).rng();
        let mut p = ParameterStore::new();
        p.init_normal("w", 100, 100, 0.02, &mut rng).unwrap();
        assert!(p.get("w").unwrap().iter().all(|v| v.abs() <= 0.04));
        assert!(p.insert("w", Array2::zeros((1, 1))).is_err());
    }
}
