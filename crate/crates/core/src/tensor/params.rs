use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Parameter initializers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(tensor.shape());
        self.params.push(Parameter { name, tensor, grad });
        Ok(ParamId(id))
    }

    pub fn add_init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::Const(v) => vec![T::from_f64c(v); len],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (0..len)
                    .map(|_| loop {
                        let z: f64 = normal.sample(rng);
                        if z.abs() <= 2.0 {
                            break T::from_f64c(z * std);
                        }
                    })
                    .collect()
            }
        };
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Add a gradient set produced by [`super::Tape::backward`].
    pub fn accumulate(&mut self, grads: &super::Gradients<T>) {
        for (id, g) in grads.iter() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += *s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
