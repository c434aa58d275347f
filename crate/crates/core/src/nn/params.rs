use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Weight,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

/// Ordered collection of named tensors. Gradients use a store with the same
/// layout, so a [`ParamId`] addresses the matching slot in both.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn weight_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Weight)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of learned scalars.
    pub fn weight_count(&self) -> usize {
        self.weight_ids().map(|id| self.get(id).len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(T::zero()));
    }

    pub fn add_assign(&mut self, other: &ParamStore<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrites every tensor from `(name, tensor)` pairs; names and shapes
    /// must match this store exactly.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, tensor) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown tensor {name}")))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    self.get(id).shape(),
                    tensor.shape()
                )));
            }
            *self.get_mut(id) = tensor;
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches")
}

const TENSOR_MAGIC: &[u8; 4] = b"NTSR";

/// Writes named tensors as little-endian `f32` with a shape header each.
pub fn write_tensors<'a, T: Real, W: Write>(
    out: &mut W,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 4);
        for x in tensor.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Inverse of [`write_tensors`].
pub fn read_tensors<T: Real, R: Read>(input: &mut R) -> std::io::Result<Vec<(String, Tensor<T>)>> {
    use std::io::{Error as IoError, ErrorKind};
    let bad = |m: &str| IoError::new(ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("bad tensor block magic"));
    }
    let count = read_u32(input)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = read_u32(input)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u32(input).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data).map_err(|e| bad(&e.to_string()))?));
    }
    Ok(out)
}
