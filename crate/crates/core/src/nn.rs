//! Named parameters and the small layers the network is assembled from.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.values[id])
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        let shape = self.values[id].shape().to_vec();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {shape:?}, got {} values",
                data.len()
            )));
        }
        self.values[id] = Tensor::new(shape, data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            name.hash(&mut h);
            v.shape().hash(&mut h);
            for x in v.data() {
                x.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// A tape plus a read-only parameter store; parameters are loaded onto the
/// tape at most once per forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    loaded: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            loaded: vec![None; store.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.loaded[id] {
            return v;
        }
        let v = self.tape.param(id, self.store.get(id));
        self.loaded[id] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }
}

pub(crate) struct Init<'r, R> {
    pub rng: &'r mut R,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn xavier<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(dist.sample(self.rng)))
    }

    pub fn normal<T: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(self.rng);
            T::lit(z * std)
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub(crate) fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.tape.matmul(x, w);
        ctx.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![width], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.tape.layer_norm(x, g, b)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub(crate) fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        widths: &[usize],
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x);
            if i < last {
                x = ctx.tape.gelu(x);
            }
        }
        x
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub(crate) fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), width, width),
            k: Linear::new(store, init, &format!("{name}.k"), width, width),
            v: Linear::new(store, init, &format!("{name}.v"), width, width),
            out: Linear::new(store, init, &format!("{name}.out"), width, width),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (for inspection).
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        query: Var,
        key: Var,
        value: Var,
        allowed: Option<&[bool]>,
    ) -> (Var, Var) {
        let q = self.q.forward(ctx, query);
        let k = self.k.forward(ctx, key);
        let v = self.v.forward(ctx, value);
        let a = ctx.tape.attention(q, k, v, self.heads, allowed);
        (self.out.forward(ctx, a), a)
    }
}
