//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates one gradient per
//! node, so a fixed forward pass always produces bitwise-identical gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        x: Var,
        window: (usize, usize),
    },
    Upsample {
        x: Var,
        factor: (usize, usize),
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Elementwise {
        a: Var,
        b: Var,
        kind: Elementwise,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: Option<u8>,
        probs: Tensor<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of every named parameter after a backward pass.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A named leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` registered twice")));
        }
        let v = self.push(value, Op::Param, true);
        self.params.insert(name, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.grad_of(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let value = kernels::avg_pool2d_forward(self.value(x), window.0, window.1)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::AvgPool { x, window }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: (usize, usize)) -> Result<Var> {
        let value = kernels::upsample_nearest_forward(self.value(x), factor.0, factor.1)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => self.value(x).map(kernels::sigmoid),
        };
        let rg = self.grad_of(&[x]);
        self.push(value, Op::Activation { x, kind }, rg)
    }

    /// Bit-packed `input > 0` of every ReLU in tape order. Two evaluations
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut word = 0u64;
        let mut used = 0;
        for node in &self.nodes {
            if let Op::Activation {
                x,
                kind: Activation::Relu,
            } = node.op
            {
                for &v in self.value(x).data() {
                    word = (word << 1) | u64::from(v > T::zero());
                    used += 1;
                    if used == 64 {
                        bits.push(word);
                        (word, used) = (0, 0);
                    }
                }
            }
        }
        bits.push(word);
        bits.push(used);
        bits
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: match kind {
                    Elementwise::Add => "add",
                    Elementwise::Mul => "mul",
                },
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                Elementwise::Add => x + y,
                Elementwise::Mul => x * y,
            })
            .collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Elementwise { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.grad_of(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.grad_of(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum { x }, rg)
    }

    /// Mean per-pixel cross-entropy of `logits` (n x K x h x w) against an
    /// `n x h x w` label map.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: Option<u8>) -> Result<Var> {
        let (loss, probs, count) = kernels::softmax_cross_entropy_forward(self.value(logits), labels, ignore)?;
        let rg = self.grad_of(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter. Unused
    /// parameters get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {shape}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let need = (
                        self.nodes[x.0].requires_grad,
                        self.nodes[weight.0].requires_grad,
                        bias.is_some_and(|b| self.nodes[b.0].requires_grad),
                    );
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*weight), &g, *stride, *pad, need)?;
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = cg.dweight {
                        accumulate(&mut grads, *weight, dw);
                    }
                    if let (Some(b), Some(db)) = (bias, cg.dbias) {
                        let db = db.reshape(self.shape(*b))?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AvgPool { x, window } => {
                    let dx = kernels::avg_pool2d_backward(self.shape(*x), &g, window.0, window.1)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x, factor } => {
                    let dx = kernels::upsample_nearest_backward(&g, factor.0, factor.1)?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Activation { x, kind } => {
                    let dx = match kind {
                        Activation::Relu => {
                            zip_map(&g, self.value(*x), |g, x| if x > T::zero() { g } else { T::zero() })
                        }
                        Activation::Sigmoid => zip_map(&g, &node.value, |g, s| g * s * (T::one() - s)),
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Elementwise { a, b, kind } => {
                    let (ra, rb) = (self.nodes[a.0].requires_grad, self.nodes[b.0].requires_grad);
                    match kind {
                        Elementwise::Add => {
                            if ra {
                                accumulate(&mut grads, *a, g.clone());
                            }
                            if rb {
                                accumulate(&mut grads, *b, g);
                            }
                        }
                        Elementwise::Mul => {
                            if ra {
                                accumulate(&mut grads, *a, zip_map(&g, self.value(*b), |g, y| g * y));
                            }
                            if rb {
                                accumulate(&mut grads, *b, zip_map(&g, self.value(*a), |g, x| g * x));
                            }
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Sum { x } => {
                    let gv = g.item()?;
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    ignore,
                    probs,
                    count,
                } => {
                    let dx = kernels::softmax_cross_entropy_backward(probs, labels, *ignore, *count, g.item()?);
                    accumulate(&mut grads, *logits, dx);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.shape(*v)),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shape")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_has_constant_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g
            .param("w", Tensor::from_fn([1, 2, 3, 3], |_, c, y, x| (c + y * x) as f64))
            .unwrap();
        let s = g.scale(w, 3.0);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads["w"].data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param("used", Tensor::ones([1, 1, 2, 2])).unwrap();
        g.param("unused", Tensor::ones([1, 3, 1, 1])).unwrap();
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["unused"], Tensor::zeros([1, 3, 1, 1]));
        assert_eq!(grads["used"], Tensor::ones([1, 1, 2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::ones([1, 1, 2, 2])).unwrap();
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut g = Graph::<f32>::new();
        g.param("w", Tensor::ones([1, 1, 1, 1])).unwrap();
        assert!(g.param("w", Tensor::ones([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        // loss = sum(w * w) => grad = 2w
        let mut g = Graph::<f64>::new();
        let w = g
            .param("w", Tensor::from_vec([1, 1, 1, 2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[3.0, -4.0]);
    }

    #[test]
    fn elementwise_without_broadcasting() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::ones([1, 2, 2, 2]));
        let b = g.input(Tensor::ones([1, 1, 2, 2]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }
}
