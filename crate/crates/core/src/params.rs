//! Named parameter storage, the Adam optimizer and the `SMAP1` checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SMAP1"
//! u32 tensor count
//! per tensor: u32 name length, name (utf-8), u8 dtype length, dtype ("f32" | "f64"),
//!             u32 rank, rank × u64 extents
//! raw element data of every tensor, in manifest order
//! ```

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SMAP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<F> {
    name: String,
    value: Arc<Tensor<F>>,
    grad: Tensor<F>,
}

/// Owns every trainable tensor of a model together with its gradient slot.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<F>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[F]) {
        for (a, &b) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Adds another store's gradients into this one (identical layouts).
    pub fn add_grads_from(&mut self, other: &ParamStore<F>) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            for (a, &b) in p.grad.data_mut().iter_mut().zip(q.grad.data()) {
                *a += b;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn grad_norm(&self) -> F {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<F>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: F) -> F {
        let norm = self.grad_norm();
        if norm > max_norm && norm > F::zero() {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// `(name, shape)` for every parameter, in registration order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let dtype = F::DTYPE.name();
            out.push(dtype.len() as u8);
            out.extend_from_slice(dtype.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for p in &self.params {
            for &x in p.value.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Overwrites parameter values from checkpoint bytes. Names, shapes and
    /// dtype must match this store exactly.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = parse_manifest(bytes)?;
        if entries.manifest.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                entries.manifest.len(),
                self.params.len()
            )));
        }
        let mut offset = entries.data_offset;
        let size = F::DTYPE.size();
        for (p, (name, dtype, shape)) in self.params.iter_mut().zip(entries.manifest) {
            if p.name != name || p.value.shape() != shape.as_slice() || dtype != F::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} ({}, {shape:?}) does not match model tensor {} ({}, {:?})",
                    dtype.name(),
                    p.name,
                    F::DTYPE.name(),
                    p.value.shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * size;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| Error::Checkpoint("truncated tensor data".into()))?;
            let data = raw.chunks_exact(size).map(F::read_le).collect();
            p.value = Arc::new(Tensor::new(shape, data)?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

struct ParsedManifest {
    manifest: Vec<(String, DType, Vec<usize>)>,
    data_offset: usize,
}

fn parse_manifest(bytes: &[u8]) -> Result<ParsedManifest> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected SMAP1".into()));
    }
    let count = cur.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let dlen = cur.take(1)?[0] as usize;
        let dname = std::str::from_utf8(cur.take(dlen)?).unwrap_or("?");
        let dtype = DType::parse(dname)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype {dname:?}")))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, dtype, shape));
    }
    Ok(ParsedManifest {
        manifest,
        data_offset: cur.pos,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = store
            .params
            .iter()
            .map(|p| vec![F::zero(); p.value.numel()])
            .collect();
        Adam {
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: F) {
        self.step += 1;
        let bc1 = F::one() - self.beta1.powi(self.step);
        let bc2 = F::one() - self.beta2.powi(self.step);
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = Arc::make_mut(&mut p.value);
            for (j, (w, &g)) in value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (F::one() - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (F::one() - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64([2, 3], &[1., -2., 3.5, 0.25, 1e-300, -0.0]).unwrap());
        s.add("b", Tensor::from_f64([3], &[f64::MAX, f64::MIN_POSITIVE, 7.]).unwrap());
        s.add("beta", Tensor::scalar(2.0));
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..5], b"SMAP1");
        let mut t = store();
        for id in t.ids().collect::<Vec<_>>() {
            let shape = t.value(id).shape().to_vec();
            t.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        t.load_bytes(&bytes).unwrap();
        for id in s.ids() {
            let a: Vec<u64> = s.value(id).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = t.value(id).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(t.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let bytes = store().to_bytes();
        let mut other = ParamStore::<f64>::new();
        other.add("w", Tensor::zeros([3, 2]));
        assert!(other.load_bytes(&bytes).is_err());
        let mut f32s = ParamStore::<f32>::new();
        f32s.add("w", Tensor::zeros([2, 3]));
        f32s.add("b", Tensor::zeros([3]));
        f32s.add("beta", Tensor::zeros(Vec::<usize>::new()));
        assert!(f32s.load_bytes(&bytes).is_err());
        assert!(store().load_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(store().load_bytes(b"SMAP0").is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
        s.accumulate_grad(id, &[0.5, -3.0]);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, 0.1);
        // bias-corrected first step is lr * sign(g)
        let v = s.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clip_grad_norm_rescales() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::zeros([2]));
        s.accumulate_grad(id, &[3.0, 4.0]);
        let n = s.clip_grad_norm(1.0);
        assert_eq!(n, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
