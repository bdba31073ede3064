//! Reverse-mode differentiation over the fixed primitive set.
//!
//! A [`Tape`] records every primitive applied during a forward pass.
//! [`Tape::backward`] replays the adjoints in reverse order. Leaves that
//! never feed the loss receive an exact zero gradient.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Silu(Var),
    Add(Var, Var),
    AddChannelBias { input: Var, bias: Var },
    Concat { lhs: Var, rhs: Var, lhs_channels: usize },
    Downsample2(Var),
    Upsample2(Var),
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = ops::silu(self.value(x));
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push(out, Op::AddChannelBias { input, bias }))
    }

    pub fn concat_channels(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(lhs), self.value(rhs))?;
        let lhs_channels = self.value(lhs).shape()[1];
        Ok(self.push(out, Op::Concat { lhs, rhs, lhs_channels }))
    }

    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let out = ops::downsample2(self.value(x))?;
        Ok(self.push(out, Op::Downsample2(x)))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2(self.value(x))?;
        Ok(self.push(out, Op::Upsample2(x)))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = ops::mse_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }))
    }

    /// Propagates adjoints from the scalar `loss` back to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, bias } => {
                    let cg = ops::conv2d_backward(self.value(input), self.value(weight), &g);
                    accumulate(&mut grads, input, cg.input);
                    accumulate(&mut grads, weight, cg.weight);
                    accumulate(&mut grads, bias, cg.bias);
                }
                Op::Linear { input, weight, bias } => {
                    let lg = ops::linear_backward(self.value(input), self.value(weight), &g);
                    accumulate(&mut grads, input, lg.input);
                    accumulate(&mut grads, weight, lg.weight);
                    accumulate(&mut grads, bias, lg.bias);
                }
                Op::Silu(x) => {
                    let gx = ops::silu_backward(self.value(x), &g);
                    accumulate(&mut grads, x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::AddChannelBias { input, bias } => {
                    accumulate(&mut grads, bias, ops::add_channel_bias_backward(&g));
                    accumulate(&mut grads, input, g);
                }
                Op::Concat { lhs, rhs, lhs_channels } => {
                    let (ga, gb) = ops::concat_channels_backward(&g, lhs_channels);
                    accumulate(&mut grads, lhs, ga);
                    accumulate(&mut grads, rhs, gb);
                }
                Op::Downsample2(x) => accumulate(&mut grads, x, ops::downsample2_backward(&g)),
                Op::Upsample2(x) => accumulate(&mut grads, x, ops::upsample2_backward(&g)),
                Op::Mse { pred, target } => {
                    let up = g.data()[0];
                    let gp = ops::mse_loss_backward(self.value(pred), self.value(target), up);
                    let gt = gp.map(|v| -v);
                    accumulate(&mut grads, pred, gp);
                    accumulate(&mut grads, target, gt);
                }
            }
        }
        // only leaf gradients are kept; intermediate adjoints were consumed above
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; exact zeros if the leaf did not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new([1, 2], vec![0.5, -0.5]).unwrap());
        let b = tape.leaf(Tensor::zeros([1]));
        let unused = tape.leaf(Tensor::full([3], 7.0));
        let y = tape.linear(x, w, b).unwrap();
        let t = tape.leaf(Tensor::zeros([1, 1]));
        let loss = tape.mse_loss(y, t).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
        // d/dw (x.w)^2 = 2 (x.w) x = 2 * (-0.5) * [1, 2]
        assert_eq!(g.get(w).data(), &[-1.0, -2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, -3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let zero = tape.leaf(Tensor::zeros([2]));
        let loss = tape.mse_loss(y, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        // loss = mean((2x)^2) = 2 x^2 summed / 1 -> d/dx = 4x
        assert_eq!(g.get(x).data(), &[4.0, -12.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }
}
