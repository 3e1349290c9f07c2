//! Named parameter tensors, initialization, and checkpoint serialization.

use crate::{Error, Result, Scalar};
use ndarray::{ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::{Rng, RngCore};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Named, shaped parameter tensors. Iteration order is the sorted name order,
/// which fixes checkpoint layout and optimizer traversal.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// View a parameter as a matrix, flattening all but the last axis.
    pub fn mat(&self, name: &str) -> ArrayView2<'_, T> {
        let a = self.get(name);
        let d = a.ndim();
        let cols = a.shape()[d - 1];
        let rows: usize = a.shape()[..d - 1].iter().product();
        a.view()
            .into_shape_with_order((rows, cols))
            .expect("parameters are stored contiguously")
    }

    pub fn vec(&self, name: &str) -> ArrayView1<'_, T> {
        let a = self.get(name);
        a.view()
            .into_shape_with_order(a.len())
            .expect("parameters are stored contiguously")
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
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

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Check that `self` provides exactly the entries and shapes of `expected`.
    pub fn validate_against(&self, expected: &ParamStore<T>) -> Result<()> {
        for (name, arr) in expected.iter() {
            match self.entries.get(name) {
                None => return Err(Error::shape(format!("checkpoint is missing entry {name}"))),
                Some(got) if got.shape() != arr.shape() => {
                    return Err(Error::shape(format!(
                        "checkpoint entry {name} has shape {:?}, expected {:?}",
                        got.shape(),
                        arr.shape()
                    )))
                }
                _ => {}
            }
        }
        for name in self.names() {
            if !expected.contains(name) {
                return Err(Error::shape(format!("checkpoint has unexpected entry {name}")));
            }
        }
        Ok(())
    }
}

/// Gradient accumulators keyed like the [`ParamStore`] they mirror.
#[derive(Debug, Clone, Default)]
pub struct Grads<T: Scalar> {
    entries: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Accumulate a gradient contribution.
    pub fn add(&mut self, name: &str, grad: ArrayD<T>) {
        match self.entries.get_mut(name) {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), grad.shape(), "gradient shape for {name}");
                *acc += &grad;
            }
            None => {
                self.entries.insert(name.to_string(), grad);
            }
        }
    }

    /// Fold another gradient map into this one (fixed name order).
    pub fn merge(&mut self, other: Grads<T>) {
        for (name, grad) in other.entries {
            self.add(&name, grad);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.entries.iter_mut()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.entries.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Standard normal via Box-Muller, deterministic for a given RNG stream.
fn normal(rng: &mut impl RngCore) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Truncated normal: N(0, sigma^2) resampled until |z| <= 2 sigma.
pub fn trunc_normal<T: Scalar>(shape: &[usize], sigma: f64, rng: &mut impl RngCore) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        loop {
            let z = normal(rng);
            if z.abs() <= 2.0 {
                return T::of(z * sigma);
            }
        }
    })
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

// ---------------------------------------------------------------------------
// Checkpoint format: one JSON header line, then raw little-endian f32 payload
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptHeader {
    magic: String,
    version: u32,
    meta: serde_json::Value,
    entries: Vec<CkptEntry>,
}

const CKPT_MAGIC: &str = "SSR.CKPT";

/// Write all parameters with a JSON header describing name, shape and byte
/// offset of each tensor in the 32-bit little-endian payload that follows.
pub fn save_checkpoint<T: Scalar>(ps: &ParamStore<T>, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ps.len());
    let mut offset = 0usize;
    for (name, arr) in ps.iter() {
        entries.push(CkptEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
        });
        offset += 4 * arr.len();
    }
    let header = CkptHeader {
        magic: CKPT_MAGIC.to_string(),
        version: 1,
        meta: meta.clone(),
        entries,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header).map_err(|e| Error::format(e.to_string()))?;
    f.write_all(b"\n")?;
    for (_, arr) in ps.iter() {
        for v in arr.iter() {
            f.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint has no header line".to_string()))?;
    let header: CkptHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.magic != CKPT_MAGIC {
        return Err(Error::format("checkpoint magic mismatch".to_string()));
    }
    let payload = &bytes[nl + 1..];
    let mut ps = ParamStore::new();
    for e in &header.entries {
        if e.dtype != "f32" {
            return Err(Error::format(format!("entry {}: unsupported dtype {}", e.name, e.dtype)));
        }
        let len: usize = e.shape.iter().product();
        let end = e.offset + 4 * len;
        if end > payload.len() {
            return Err(Error::format(format!(
                "entry {}: payload truncated ({} bytes, need {end})",
                e.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let off = e.offset + 4 * i;
            let raw: [u8; 4] = payload[off..off + 4].try_into().expect("bounds checked");
            data.push(T::of(f32::from_le_bytes(raw) as f64));
        }
        ps.insert(
            e.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&e.shape), data).expect("length = product of shape"),
        );
    }
    Ok((ps, header.meta))
}
