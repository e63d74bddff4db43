//! Dense row-major `f32` tensors and integer label maps, plus their on-disk
//! formats.
//!
//! Tensor files (`DCT1`): magic, `u32` rank, `rank` x `u32` dims, then the
//! row-major data as little-endian `f32`. Label files (`DCL1`) share the
//! header layout with `u8` payload; `255` marks an ignored pixel.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DCT1";
pub const LABEL_MAGIC: &[u8; 4] = b"DCL1";
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, rejecting a length mismatch or any non-finite value.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose output length is correct by
    /// construction; finiteness is checked by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for tensors that are not (yet) recorded in a graph,
    /// e.g. parameters between optimizer steps.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    /// Size of the trailing (channel) dimension.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Slice `i` along the leading dimension.
    pub fn index_outer(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        write_header(&mut out, &self.shape);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    /// Reads one tensor from a stream; `origin` names the source in errors.
    pub fn read_from(r: &mut impl Read, origin: &Path) -> Result<Tensor> {
        let shape = read_header(r, TENSOR_MAGIC, origin)?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::format(origin, "truncated tensor payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = bytes.as_slice();
        let t = Tensor::read_from(&mut cursor, path)?;
        if !cursor.is_empty() {
            return Err(Error::format(path, "trailing bytes after tensor"));
        }
        Ok(t)
    }
}

/// Per-pixel class indices with `255` as the ignore value.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for LabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LabelMap[{}x{}]", self.height, self.width)
    }
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "label_map",
                format!(
                    "{}x{} needs {} labels, got {}",
                    height,
                    width,
                    height * width,
                    data.len()
                ),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len());
        out.extend_from_slice(LABEL_MAGIC);
        write_header(&mut out, &[self.height, self.width]);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<LabelMap> {
        let mut cursor = bytes;
        let shape = read_header(&mut cursor, LABEL_MAGIC, origin)?;
        if shape.len() != 2 {
            return Err(Error::format(
                origin,
                format!("label map rank {} != 2", shape.len()),
            ));
        }
        let n = shape[0] * shape[1];
        if cursor.len() != n {
            return Err(Error::format(
                origin,
                format!("label payload has {} bytes, expected {}", cursor.len(), n),
            ));
        }
        LabelMap::new(shape[0], shape[1], cursor.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<LabelMap> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        LabelMap::from_bytes(&bytes, path)
    }
}

fn write_header(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn read_u32(r: &mut impl Read, origin: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(origin, "truncated header"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], origin: &Path) -> Result<Vec<usize>> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)
        .map_err(|_| Error::format(origin, "missing magic"))?;
    if &got != magic {
        return Err(Error::format(
            origin,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let rank = read_u32(r, origin)? as usize;
    if rank > 8 {
        return Err(Error::format(origin, format!("implausible rank {rank}")));
    }
    (0..rank)
        .map(|_| read_u32(r, origin).map(|d| d as usize))
        .collect()
}
