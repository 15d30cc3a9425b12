//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only arena: every operation pushes one node whose
//! inputs already live on the tape, so node order is a topological order and
//! [`Tape::backward`] simply walks it in reverse.

mod layers;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        pad: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Softmax(Var),
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        scores: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    ShannonInfo {
        probs: Var,
        labels: Vec<usize>,
    },
    IntraClassVariance {
        embeddings: Var,
        centers: Var,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) | Op::Reshape(a) | Op::Relu(a) => vec![*a],
            Op::Softmax(a) => vec![*a],
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::Dense {
                input,
                weights,
                bias,
            } => vec![*input, *weights, *bias],
            Op::MaxPool { input, .. }
            | Op::Dropout { input, .. }
            | Op::L2Normalize { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { scores, .. } => vec![*scores],
            Op::ShannonInfo { probs, .. } => vec![*probs],
            Op::IntraClassVariance {
                embeddings,
                centers,
                ..
            } => vec![*embeddings, *centers],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::Dense { .. } => "dense",
            Op::Relu(..) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Softmax(..) => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::ShannonInfo { .. } => "shannon_info_loss",
            Op::IntraClassVariance { .. } => "intra_class_variance_loss",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter. Gradients accumulate into leaves whose
    /// tensor has `requires_grad` set; any gradient the tensor carries is
    /// dropped.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.zero_grad();
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Takes the leaf tensor back out, leaving an empty placeholder.
    pub fn take_leaf(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].tensor, Tensor::scalar(T::zero()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    pub(crate) fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Result<Var> {
        if tensor.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            tensor: tensor.with_requires_grad(requires_grad),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: format!("{:?}", self.shape(a)),
                found: format!("{:?}", self.shape(b)),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s / n)), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Back-propagates from a scalar root. Gradients are added to the leaves'
    /// slots, so repeated calls accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        if !root_value.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].tensor.accumulate_grad(&g)?;
                continue;
            }
            for (input, contribution) in self.input_grads(i, &g) {
                if !self.requires_grad(input) {
                    continue;
                }
                if contribution.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: self.nodes[i].op.name(),
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(&g, &y)| g * y).collect()),
                    (*b, g.iter().zip(da).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.data(*a).len()])],
            Op::Mean(a) => {
                let n = self.data(*a).len();
                vec![(*a, vec![g[0] / T::of(n as f64); n])]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Conv2d {
                input,
                kernels,
                bias,
                pad,
            } => layers::conv2d_backward(self, *input, *kernels, *bias, *pad, g),
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.data(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                vec![(*input, dx)]
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => layers::dense_backward(self, *input, *weights, *bias, g),
            Op::Relu(a) => {
                let dx = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*a, dx)]
            }
            Op::Dropout { input, mask } => {
                vec![(*input, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())]
            }
            Op::Softmax(a) => vec![(*a, layers::softmax_backward(&node.tensor, g))],
            Op::L2Normalize { input, norms } => {
                vec![(
                    *input,
                    layers::l2_normalize_backward(&node.tensor, norms, g),
                )]
            }
            Op::SoftmaxCrossEntropy {
                scores,
                labels,
                probs,
            } => vec![(
                *scores,
                crate::losses::softmax_cross_entropy_backward(probs, labels, g[0]),
            )],
            Op::ShannonInfo { probs, labels } => vec![(
                *probs,
                crate::losses::shannon_info_backward(self.value(*probs), labels, g[0]),
            )],
            Op::IntraClassVariance {
                embeddings,
                centers,
                labels,
            } => crate::losses::intra_class_variance_backward(
                self,
                *embeddings,
                *centers,
                labels,
                g[0],
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, xs: &[f64]) -> Var {
        tape.leaf(
            Tensor::new([xs.len()], xs.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 3.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_squared_norm_is_twice_input() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let c = tape.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shared_input_gradients_add_up() {
        // f = sum(x + 2x) -> df/dx = 3
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.5, 1.5]);
        let two_x = tape.scale(x, 2.0).unwrap();
        let y = tape.add(x, two_x).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.5, 1.5]);
    }
}
