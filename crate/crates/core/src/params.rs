//! Named parameter collections and the Adam optimizer.

use indexmap::IndexMap;

use crate::error::{BatError, Result};
use crate::rng::{truncated_normal, BatRng};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ParamSet<T: Real> {
    tensors: IndexMap<String, Tensor<T>>,
    moments: Option<Vec<Moments<T>>>,
    step: u64,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
            moments: None,
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(BatError::usage(format!("duplicate parameter name {name}")));
        }
        if self.moments.is_some() {
            return Err(BatError::usage(
                "cannot add parameters after the optimizer is attached",
            ));
        }
        self.tensors.insert(name, tensor.with_grad());
        Ok(())
    }

    /// Truncated-normal (std 0.02) weight matrix.
    pub fn insert_weight(&mut self, name: &str, shape: &[usize], rng: &mut BatRng) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(truncated_normal(rng, 0.02))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| BatError::usage(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_optimizer(&self) -> bool {
        self.moments.is_some()
    }

    pub fn view(&self) -> ParamView<'_, T> {
        ParamView {
            params: self,
            detached: false,
        }
    }

    /// Constant view: same values, but tape leaves built from it never
    /// receive gradient.
    pub fn detached(&self) -> ParamView<'_, T> {
        ParamView {
            params: self,
            detached: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    pub fn any_grad(&self) -> bool {
        self.tensors.values().any(|t| t.grad().is_some())
    }

    /// Squared L2 norm of all populated gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.tensors
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    pub fn attach_adam(&mut self) {
        if self.moments.is_none() {
            self.moments = Some(
                self.tensors
                    .values()
                    .map(|t| Moments {
                        m: vec![T::zero(); t.len()],
                        v: vec![T::zero(); t.len()],
                    })
                    .collect(),
            );
        }
    }

    /// One bias-corrected Adam update over every parameter holding a
    /// gradient, then clears all gradients. Parameters without a gradient
    /// are left untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.any_grad() {
            return Err(BatError::usage("optimizer step without gradients"));
        }
        self.attach_adam();
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let c1 = one - T::lit(cfg.beta1.powi(t));
        let c2 = one - T::lit(cfg.beta2.powi(t));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let moments = self.moments.as_mut().expect("attached above");
        for (tensor, mom) in self.tensors.values_mut().zip(moments.iter_mut()) {
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                mom.m[i] = b1 * mom.m[i] + (one - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (one - b2) * g * g;
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.clear_grad();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            moments: None,
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a, T: Real> {
    pub params: &'a ParamSet<T>,
    pub detached: bool,
}
