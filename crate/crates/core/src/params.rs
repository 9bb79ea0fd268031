//! Named parameter storage, gradient buffers and the on-disk parameter blob.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{io_err, structural, Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

const BLOB_MAGIC: &[u8; 8] = b"STGPRM01";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Uniform initialization in `[-1/sqrt(rows), 1/sqrt(rows)]`, `rows` being the fan-in.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Mat::zeros((rows, cols)))
    }

    pub fn insert_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Mat::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.numel() * 8);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for (name, value) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for x in value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut cursor, &mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(structural("parameter blob has a bad header"));
        }
        let count = read_u64(&mut cursor)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u64(&mut cursor)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut cursor, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| structural("parameter name is not utf-8"))?;
            let rows = read_u64(&mut cursor)? as usize;
            let cols = read_u64(&mut cursor)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                read_exact(&mut cursor, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let value = Mat::from_shape_vec((rows, cols), data)
                .map_err(|e| structural(format!("parameter {name}: {e}")))?;
            store.insert(name, value);
        }
        if !cursor.is_empty() {
            return Err(structural("trailing bytes in parameter blob"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract(
                "parameter layout differs from the model configuration".into(),
            ));
        }
        for (name, (a, b)) in self.names.iter().zip(self.values.iter().zip(&other.values)) {
            if a.dim() != b.dim() {
                return Err(Error::Contract(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cursor
        .read_exact(buf)
        .map_err(|_| structural("parameter blob is truncated"))
}

fn read_u64(cursor: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cursor, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Gradient buffer aligned with a [`ParamStore`]. Parameters that received
/// no gradient stay `None`.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(len: usize) -> Self {
        Self {
            slots: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    /// Drops the gradient for `id`, excluding it from the next update.
    pub fn clear(&mut self, id: ParamId) {
        self.slots[id.0] = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blob_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert_uniform("a.w", 3, 4, &mut rng);
        store.insert_zeros("a.b", 1, 4);
        let back = ParamStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut store = ParamStore::new();
        store.insert_ones("x", 2, 2);
        let bytes = store.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ParamStore::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.insert_uniform("w", 16, 8, &mut rng);
        assert!(store.get(id).iter().all(|x| x.abs() <= 0.25));
    }
}
