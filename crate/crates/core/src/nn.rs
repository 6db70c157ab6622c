//! Parameter containers and the binding of networks onto a tape.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tape::{Tape, Tensor, Var};

/// Standard deviation of the zero-mean Gaussian used for conv weights.
pub const INIT_STD: f64 = 0.02;

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Layout descriptor: names and shapes, in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    }

    /// Places every tensor on the tape, either as gradient-receiving
    /// leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

/// Gaussian-initialized conv weight of shape (out, in, k, k).
pub fn init_conv_weight<T: Scalar, R: Rng + ?Sized>(out: usize, inp: usize, k: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    ArrayD::from_shape_fn(IxDyn(&[out, inp, k, k]), |_| T::lit(normal.sample(rng)))
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    ArrayD::zeros(IxDyn(shape))
}

/// A network whose forward pass is recorded on a [`Tape`].
pub trait Module<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;

    /// Records the forward pass using `params`, which must be the bound
    /// counterparts of [`Module::params`] in order.
    fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Var;
}

/// A module together with its parameters placed on a tape.
pub struct Bound<'m, M> {
    pub module: &'m M,
    pub vars: Vec<Var>,
}

impl<'m, M> Bound<'m, M> {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, module: &'m M, track: bool) -> Self
    where
        M: Module<T>,
    {
        let vars = module.params().bind(tape, track);
        Self { module, vars }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var
    where
        M: Module<T>,
    {
        self.module.forward(tape, &self.vars, x)
    }

    /// View of the same module whose parameters are severed from the
    /// gradient: the forward value is unchanged, the parameters act as
    /// constants.
    pub fn detached<T: Scalar>(&self, tape: &mut Tape<T>) -> Bound<'m, M>
    where
        M: Module<T>,
    {
        let vars = self.vars.iter().map(|&v| tape.stop_gradient(v)).collect();
        Bound { module: self.module, vars }
    }
}
