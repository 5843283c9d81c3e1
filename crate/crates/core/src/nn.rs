//! Named parameters and the handful of layers the networks are built from.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gan::spectral;
use crate::rng::Rng64;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Standard deviation of the normal weight initialiser (DCGAN convention).
pub const INIT_STD: f64 = 0.02;

/// Named trainable parameters plus non-trainable buffers, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    params: BTreeMap<String, Tensor<S>>,
    buffers: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<S>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.buffers.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.buffers.iter()
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.buffers.iter_mut()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Binds store entries onto one graph, each name at most once.
pub struct Binder<'s, S: Scalar> {
    store: &'s ParamStore<S>,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl<'s, S: Scalar> Binder<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters under `prefix` are bound as constants (no gradient).
    pub fn freeze(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn store(&self) -> &'s ParamStore<S> {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            g.constant(t)
        } else {
            g.param(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound, trainable parameter that received one.
    pub fn grads(&self, g: &Graph<S>) -> BTreeMap<String, Tensor<S>> {
        grads_of(g, &self.bound)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Releases the store borrow, keeping the name → handle map.
    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }
}

/// Gradients of the handles in `bound` that received one.
pub fn grads_of<S: Scalar>(g: &Graph<S>, bound: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor<S>> {
    bound
        .iter()
        .filter_map(|(n, &v)| g.grad(v).map(|t| (n.clone(), t.clone())))
        .collect()
}

fn init_weight(store: &mut ParamStore<f32>, name: String, shape: &[usize], rng: &mut Rng64) {
    store.insert(name, Tensor::randn(shape, INIT_STD, rng));
}

/// Position-wise affine map `x·W + b` on `[rows, d_in]` inputs; a 1×1 convolution
/// when rows are pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            bias: true,
            spectral: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        init_weight(store, self.weight_name(), &[self.d_in, self.d_out], rng);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[1, self.d_out]));
        }
        if self.spectral {
            spectral::init_state(store, &self.weight_name(), self.d_in, rng);
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, x: Var) -> Result<Var> {
        let mut w = b.get(g, &self.weight_name())?;
        if self.spectral {
            w = spectral::normalized_weight(g, b, &self.weight_name(), w, self.d_in, self.d_out)?;
        }
        let y = g.matmul(x, w)?;
        if !self.bias {
            return Ok(y);
        }
        let bias = b.get(g, &self.bias_name())?;
        let rows = g.shape(y)[0];
        let bias = g.expand(bias, &[rows, self.d_out])?;
        g.add(y, bias)
    }
}

/// 3×3 convolution with zero padding 1 on `[C,H,W]` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub spectral: bool,
}

impl Conv3x3 {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            stride: 1,
            spectral: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut Rng64) {
        init_weight(store, self.weight_name(), &[self.c_out, self.c_in, 3, 3], rng);
        store.insert(self.bias_name(), Tensor::zeros(&[self.c_out]));
        if self.spectral {
            spectral::init_state(store, &self.weight_name(), self.c_out, rng);
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &mut Binder<S>, x: Var) -> Result<Var> {
        let mut w = b.get(g, &self.weight_name())?;
        if self.spectral {
            w = spectral::normalized_weight(g, b, &self.weight_name(), w, self.c_out, self.c_in * 9)?;
        }
        let bias = b.get(g, &self.bias_name())?;
        g.conv3x3_strided(x, w, bias, self.stride)
    }
}

/// `[C,H,W]` map to the `[H·W, C]` per-pixel feature matrix.
pub fn map_to_pixels<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `[H·W, C]` per-pixel features back to a `[C,H,W]` map.
pub fn pixels_to_map<S: Scalar>(g: &mut Graph<S>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.transpose(x)?;
    g.reshape(t, &[c, h, w])
}
