//! Dense fp64 tensors, named parameter sets, and the `AESM` checkpoint
//! container.
//!
//! All reductions accumulate leftmost-first so results are bit-identical
//! across runs on one platform.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor value {v}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Row-major matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Treat a rank-1 tensor as a single-row matrix.
    pub fn as_matrix_shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// Named parameters with deterministic (lexicographic) iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names, all-zero tensors of matching shapes.
    pub fn zeros_like(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, t) in self.iter() {
            out.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        out
    }

    /// Elementwise `self += scale * other`; shapes must agree.
    pub fn axpy(&mut self, scale: f64, other: &ParameterSet) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let o = other
                .entries
                .get(name)
                .ok_or_else(|| Error::dim(format!("axpy missing entry {name}")))?;
            if o.shape() != t.shape() {
                return Err(Error::dim(format!("axpy shape mismatch on {name}")));
            }
            for (a, b) in t.data.iter_mut().zip(o.data.iter()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn same_shapes(&self, other: &ParameterSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

const MAGIC: &[u8; 4] = b"AESM";
const FORMAT_VERSION: u16 = 1;

/// Write a parameter set in the `AESM` container format.
///
/// Layout: magic `AESM`, format version u16, entry count u32, then per
/// entry: name length u16 + UTF-8 name, rank u8, extents u32 each, values
/// little-endian fp64. All integers little-endian.
pub fn write_checkpoint<W: Write>(w: &mut W, params: &ParameterSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParameterSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not an AESM checkpoint".into()));
    }
    let mut u2 = [0u8; 2];
    r.read_exact(&mut u2)?;
    let version = u16::from_le_bytes(u2);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4)?;
    let count = u32::from_le_bytes(u4);
    let mut params = ParameterSet::new();
    for _ in 0..count {
        r.read_exact(&mut u2)?;
        let name_len = u16::from_le_bytes(u2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?;
        let mut u1 = [0u8; 1];
        r.read_exact(&mut u1)?;
        let rank = u1[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u4)?;
            shape.push(u32::from_le_bytes(u4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut u8b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut u8b)?;
            data.push(f64::from_le_bytes(u8b));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut &bytes[..])
}
