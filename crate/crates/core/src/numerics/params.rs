use std::collections::HashMap;

use rand_core::RngCore;

use super::{Gradients, NumericsError, Tensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// `None` until a backward sweep touches the parameter.
    pub grad: Option<Tensor>,
}

/// Named, ordered parameter table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i].value = value;
            self.params[i].grad = None;
            return ParamId(i);
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad: None });
        ParamId(self.params.len() - 1)
    }

    /// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// fans taken from the first and last dimensions.
    pub fn insert_xavier(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl RngCore) -> ParamId {
        let fan_in = shape[0] as f64;
        let fan_out = *shape.last().unwrap() as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (rng::unit(rng) * 2.0 - 1.0) * bound).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| NumericsError::UnknownParam(name.into()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the parameter gradients of one backward sweep.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("grad shape")),
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().filter_map(|p| p.grad.as_ref()).flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        norm
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from a named table; every name and shape must match.
    pub fn load_values(&mut self, table: Vec<(String, Tensor)>) -> Result<(), NumericsError> {
        if table.len() != self.params.len() {
            return Err(NumericsError::Corrupt(format!("expected {} tensors, found {}", self.params.len(), table.len())));
        }
        for (name, value) in table {
            let id = self.id(&name)?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(NumericsError::ShapeMismatch { op: "load", left: p.value.shape().to_vec(), right: value.shape().to_vec() });
            }
            p.value = value;
            p.grad = None;
        }
        Ok(())
    }
}

/// Appends a named-tensor table: count, then per tensor the UTF-8 name,
/// rank, dimensions and little-endian `f64` values. All integers are `u64` LE.
pub fn write_tensor_table(out: &mut Vec<u8>, table: &[(String, Tensor)]) {
    out.extend((table.len() as u64).to_le_bytes());
    for (name, t) in table {
        out.extend((name.len() as u64).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    cursor: &'a mut usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NumericsError> {
        let end = self.cursor.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| NumericsError::Corrupt("unexpected end of data".into()))?;
        let s = &self.bytes[*self.cursor..end];
        *self.cursor = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a table written by [`write_tensor_table`], advancing `cursor`.
pub fn read_tensor_table(bytes: &[u8], cursor: &mut usize) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut r = Reader { bytes, cursor };
    let count = r.u64()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u64()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NumericsError::Corrupt("bad name".into()))?;
        let rank = r.u64()? as usize;
        if rank > 8 {
            return Err(NumericsError::Corrupt(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| NumericsError::Corrupt("tensor too large".into()))?;
        let data = r.take(n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        table.push((name, Tensor::new(shape, data)?));
    }
    Ok(table)
}
