use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter `{name}` data does not match its shape"
        );
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    /// He-style fan-in initialisation: `N(0, 2 / fan_in)`.
    pub fn push_he<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
        self.push(name, shape, data)
    }

    pub fn push_filled(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f32) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape, vec![value; n])
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    /// SHA-256 over names, shapes and little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.shape.len() as u64).to_le_bytes());
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same layout (names and shapes) as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert!(self.same_layout(other), "parameter layout mismatch");
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.data.copy_from_slice(&src.data);
        }
    }
}

/// Gradient buffers laid out like the [`ParamStore`] they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub(crate) Vec<Vec<f32>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.0[id.0]
    }

    pub fn tensors(&self) -> &[Vec<f32>] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in &mut self.0 {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|t| t.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
