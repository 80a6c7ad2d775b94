//! Named parameter storage and the small layers the network is assembled from.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Adds the gradients from one backward sweep into each parameter.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) -> Result<()> {
        for (var, t) in bound.vars.iter().zip(self.tensors.iter_mut()) {
            grads.accumulate_into(*var, t)?;
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters of one store recorded on one tape.
pub struct Bound<'t, T: Float> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Float> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }
}

/// Forward-pass context: the tape, the bound parameters and, in training
/// mode, the dropout random stream.
pub struct Ctx<'t, T: Float> {
    pub tape: &'t Tape<T>,
    params: Bound<'t, T>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'t, T: Float> Ctx<'t, T> {
    pub fn eval(tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        Self {
            tape,
            params: store.bind(tape),
            dropout: None,
        }
    }

    pub fn train(tape: &'t Tape<T>, store: &ParamStore<T>, p: f64, rng: ChaCha8Rng) -> Self {
        Self {
            tape,
            params: store.bind(tape),
            dropout: Some((p, RefCell::new(rng))),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.params.var(id)
    }

    pub fn bound(&self) -> &Bound<'t, T> {
        &self.params
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn dropout(&self, x: Var<'t, T>) -> Var<'t, T> {
        match &self.dropout {
            Some((p, rng)) => x.dropout(*p, Some(&mut *rng.borrow_mut())),
            None => x,
        }
    }
}

pub fn xavier_uniform<T: Float>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

pub fn normal<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

/// Position-wise affine map `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(&[d_in, d_out], d_in, d_out, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(ctx.p(self.weight))?.add(ctx.p(self.bias))
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), LN_EPS)
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

/// Two-layer perceptron `Linear → GELU → dropout → Linear → dropout`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = ctx.dropout(self.fc1.forward(ctx, x)?.gelu());
        Ok(ctx.dropout(self.fc2.forward(ctx, h)?))
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
    }
}
