//! Parameters and network building blocks.

pub mod attention;
pub mod blocks;

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::{Gradients, NdTensor, Scalar, Tape, Var};

pub use attention::{AttentionOutput, SpatialAttention};
pub use blocks::{Activation, Backbone, BlockConfig, ConvUnit, DilatedBottleneck, Norm, Normalization, ResidualBlock};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<NdTensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: NdTensor<T>) -> Result<ParamId> {
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

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(NdTensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &NdTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdTensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [NdTensor<T>] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(NdTensor::zero_grad);
    }

    /// Adds the gradients of every parameter leaf on the tape into the grad slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (idx, g) in grads.param_grads() {
            self.tensors[idx].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Replaces the values of parameter `name`, keeping its shape.
    pub fn set(&mut self, name: &str, values: NdTensor<T>) -> Result<()> {
        let id = self
            .by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != values.shape() {
            return Err(Error::shape(
                "load parameter",
                format!("{name}: expected {:?}, got {:?}", slot.shape(), values.shape()),
            ));
        }
        *slot = values.with_requires_grad(true);
        Ok(())
    }

    /// Copies all values from a store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy parameters", format!("{:?} vs {:?}", dst.shape(), src.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(NdTensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Compares tape gradients of `loss` with central differences over every
    /// scalar of every parameter.
    pub fn finite_diff_check<F>(&mut self, loss: F, step: f64) -> Result<GradCheckReport>
    where
        F: Fn(&Forward<'_, T>) -> Result<Var>,
    {
        let analytic: Vec<Vec<T>> = {
            let tape = Tape::new();
            let fwd = Forward::new(&tape, self, true);
            let out = loss(&fwd)?;
            let grads = tape.backward(out)?;
            let mut per_param: Vec<Vec<T>> = self.tensors.iter().map(|t| vec![T::zero(); t.numel()]).collect();
            for (idx, g) in grads.param_grads() {
                per_param[idx].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            per_param
        };
        let eval = |store: &ParamStore<T>| -> Result<f64> {
            let tape = Tape::new();
            let fwd = Forward::new(&tape, store, false);
            let out = loss(&fwd)?;
            Ok(tape.item(out).as_f64())
        };
        let mut report = GradCheckReport::default();
        let h = T::of(step);
        for (i, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                let orig = self.tensors[i].data()[j];
                self.tensors[i].data_mut()[j] = orig + h;
                let plus = eval(self)?;
                self.tensors[i].data_mut()[j] = orig - h;
                let minus = eval(self)?;
                self.tensors[i].data_mut()[j] = orig;
                report.record(i, j, a.as_f64(), (plus - minus) / (2.0 * step));
            }
        }
        Ok(report)
    }
}

/// Parameters bound to one tape for one forward pass.
///
/// Each parameter is recorded at most once per tape. With `track_grads = false`
/// parameters are recorded as constants, which is what inference wants.
pub struct Forward<'a, T> {
    pub tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    track_grads: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>, track_grads: bool) -> Self {
        Forward {
            tape,
            params,
            bound: RefCell::new(vec![None; params.len()]),
            track_grads,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn p(&self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return Ok(v);
        }
        let t = self.params.get(id);
        let v = if self.track_grads {
            self.tape.param(id.0, t)?
        } else {
            self.tape.constant(t.shape().to_vec(), t.data().to_vec())?
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> NdTensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    NdTensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}

/// Conv weight `[cout, cin, kh, kw]` with He-uniform values.
pub fn conv_weight<T: Scalar, R: Rng>(cout: usize, cin: usize, kh: usize, kw: usize, rng: &mut R) -> NdTensor<T> {
    he_uniform(&[cout, cin, kh, kw], cin * kh * kw, rng)
}
