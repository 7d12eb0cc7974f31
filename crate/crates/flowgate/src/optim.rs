//! Stochastic gradient descent over named parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Update rule selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Plain,
    /// Heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
    Momentum { mu: f64 },
}

/// One parameter's pending update.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a [f64],
}

/// SGD state. Velocity buffers are keyed by parameter name and created
/// lazily, so the same optimizer can drive any subset of a model.
pub struct Sgd {
    method: Method,
    lr: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(method: Method, lr: f64) -> Result<Sgd> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::contract("Sgd: learning rate must be positive"));
        }
        if let Method::Momentum { mu } = method {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::contract("Sgd: momentum must lie in [0, 1)"));
            }
        }
        Ok(Sgd {
            method,
            lr,
            velocity: HashMap::new(),
        })
    }

    /// Applies one step to every update in the batch.
    ///
    /// All gradients are validated first; a non-finite gradient rejects
    /// the whole step with the offending parameter named, leaving every
    /// parameter and velocity untouched.
    pub fn step(&mut self, updates: &mut [ParamUpdate<'_>]) -> Result<()> {
        for u in updates.iter() {
            if u.grad.len() != u.value.numel() {
                return Err(Error::shape(
                    "Sgd::step",
                    format!("gradient with {} elements for {}", u.value.numel(), u.name),
                    format!("{} elements", u.grad.len()),
                ));
            }
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", u.name)));
            }
        }
        for u in updates.iter_mut() {
            match self.method {
                Method::Plain => {
                    for (p, g) in u.value.data_mut().iter_mut().zip(u.grad) {
                        *p -= self.lr * g;
                    }
                }
                Method::Momentum { mu } => {
                    let v = self
                        .velocity
                        .entry(u.name.to_string())
                        .or_insert_with(|| vec![0.0; u.grad.len()]);
                    for ((p, g), vi) in u.value.data_mut().iter_mut().zip(u.grad).zip(v.iter_mut()) {
                        *vi = mu * *vi + g;
                        *p -= self.lr * *vi;
                    }
                }
            }
        }
        Ok(())
    }
}
