//! Named learnable tensors with their Adam moments, and the layer handles that
//! reference them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Index of a parameter inside a [`NetworkParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

#[derive(Clone, Debug, Default)]
pub struct NetworkParams<T> {
    params: Vec<Param<T>>,
}

/// Graph handles for every parameter, in registration order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles that follow the registration order of a parameter store.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> NetworkParams<T> {
    pub fn new() -> Self {
        NetworkParams { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    m: vec![U::zero(); p.m.len()],
                    v: vec![U::zero(); p.v.len()],
                })
                .collect(),
        }
    }

    /// Registers every parameter as a grad-requiring leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.leaf(p.value.clone(), true))
                .collect(),
        )
    }

    /// Copies gradients of a finished backward pass into the store.
    pub fn absorb_grads(&mut self, g: &Graph<T>, bound: &Bound) -> Result<()> {
        if bound.0.len() != self.params.len() {
            return Err(Error::invalid(
                "absorb_grads",
                format!(
                    "bound {} parameters, store has {}",
                    bound.0.len(),
                    self.params.len()
                ),
            ));
        }
        for (p, v) in self.params.iter_mut().zip(&bound.0) {
            p.grad = g.grad_tensor(*v).map(Tensor::into_data);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Convolution handle: weight `[C_out,C_in,k,k]` and bias `[C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Registers a conv layer with weights and biases uniform in `+-sqrt(1/(C_in k k))`.
    pub fn init<T: Real, R: Rng>(
        params: &mut NetworkParams<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let bound = (1.0 / (cin * k * k) as f64).sqrt();
        let mut draw = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
        };
        let w = draw(&[cout, cin, k, k]);
        let b = draw(&[cout]);
        Conv {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), b),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), b.var(self.bias), self.stride, self.pad)
    }
}

/// Instance-norm affine handle, initialized to `gamma = 1`, `beta = 0`.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const LEAKY_SLOPE: f64 = 0.2;

impl Norm {
    pub fn init<T: Real>(params: &mut NetworkParams<T>, name: &str, c: usize) -> Self {
        Norm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.instance_norm(x, b.var(self.gamma), b.var(self.beta), NORM_EPS)
    }
}

/// conv -> instance norm -> leaky ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng>(
        params: &mut NetworkParams<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv::init(params, rng, &format!("{name}.conv"), cin, cout, k, stride),
            norm: Norm::init(params, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        let y = self.norm.forward(g, b, y)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}
