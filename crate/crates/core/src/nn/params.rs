use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::blob::{self, BlobReader};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    frozen: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter `{name}`");
        self.names.push(name.to_string());
        self.values.push(value.as_standard_layout().into_owned());
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    /// Uniform init in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound));
        self.add(name, v)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(ArrayD::len).sum()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| ParamSpec {
                name: n.clone(),
                shape: v.shape().to_vec(),
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8 + 64 * self.len());
        for v in &self.values {
            blob::encode_ndarray(v, &mut out);
        }
        out
    }

    /// Overwrites every parameter from a blob written by [`Self::to_blob`];
    /// the blob must match `specs` exactly.
    pub fn load_blob(&mut self, specs: &[ParamSpec], bytes: &[u8]) -> Result<()> {
        if specs != self.specs().as_slice() {
            return Err(Error::Decode("parameter layout does not match the architecture".into()));
        }
        let mut rd = BlobReader::new(bytes);
        for (i, spec) in specs.iter().enumerate() {
            let a = rd.next_ndarray()?;
            if a.shape() != spec.shape.as_slice() {
                return Err(Error::Decode(format!(
                    "parameter `{}`: blob shape {:?}, expected {:?}",
                    spec.name,
                    a.shape(),
                    spec.shape
                )));
            }
            self.values[i] = a;
        }
        if !rd.is_empty() {
            return Err(Error::Decode("trailing bytes after parameter blob".into()));
        }
        Ok(())
    }
}
