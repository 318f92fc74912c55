use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::{Scalar, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight decay {weight_decay} must be >= 0"
            )));
        }
        Ok(Sgd {
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
            velocity: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
        }
        if let Some(name) = params.keys().find(|k| !grads.contains_key(*k)) {
            return Err(Error::MissingGradient(name.clone()));
        }
        let lr = T::from_f64(lr);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One plain SGD step on named parameters.
pub fn sgd_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &Gradients<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    Sgd::new(momentum, weight_decay)?.step(params, grads, lr)
}
