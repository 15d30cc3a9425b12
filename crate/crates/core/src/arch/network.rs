use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::shapes::{infer_shapes, LayerShape, Shape, ShapeBindings, ShapeError};
use super::{Activation, ArchGraph, LayerKind};
use crate::autodiff::{Tape, Var};
use crate::losses::CentroidBank;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("layer {layer} ({clause}): parse-only layer, batch normalization is not executable")]
    ParseOnly { layer: usize, clause: String },
    #[error("layer {layer} ({clause}): {message}")]
    Unsupported {
        layer: usize,
        clause: String,
        message: String,
    },
    #[error("the graph has no '{0}' tap")]
    MissingTap(&'static str),
    #[error("parameter '{name}': {message}")]
    Parameter { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("layer {layer} ({clause}): {source}")]
pub struct NetworkError {
    pub layer: usize,
    pub clause: String,
    pub source: TensorError,
}

#[derive(Debug, Clone)]
enum Step {
    Input,
    Conv {
        weight: usize,
        pad: usize,
        relu: bool,
    },
    Pool {
        block: usize,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        weight: usize,
        relu: bool,
    },
    Normalize,
    Centers,
    Ref {
        label: String,
    },
}

/// Parameters placed on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
    pub bank: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Outputs {
    pub taps: HashMap<String, Var>,
    /// `norm` when present, else `x`.
    pub embedding: Var,
    pub scores: Var,
    pub centers: Option<Var>,
}

/// A built graph: weights, the centroid bank, and an executable plan.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    graph: ArchGraph,
    bindings: ShapeBindings,
    shapes: Vec<LayerShape>,
    steps: Vec<Step>,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    bank: Option<CentroidBank<T>>,
    bank_name: String,
}

impl<T: Scalar> Network<T> {
    /// Checks shapes, then initializes weights Glorot-uniform from `seed`, biases
    /// and centroids at zero.
    pub fn build(
        graph: &ArchGraph,
        bindings: ShapeBindings,
        seed: u64,
    ) -> Result<Self, BuildError> {
        let shapes = infer_shapes(graph, &bindings)?;
        for tap in ["x", "scores"] {
            if !graph.has_tap(tap) {
                return Err(BuildError::MissingTap(tap));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = Vec::new();
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut bank = None;
        let mut bank_name = String::new();
        for (spec, shape) in graph.layers().iter().zip(&shapes) {
            let layer = shape.layer;
            let unsupported = |message: String| BuildError::Unsupported {
                layer,
                clause: spec.to_string(),
                message,
            };
            let relu_only = |acts: &[Activation]| {
                if acts.contains(&Activation::BatchNorm) {
                    Err(BuildError::ParseOnly {
                        layer,
                        clause: spec.to_string(),
                    })
                } else {
                    Ok(acts.contains(&Activation::Relu))
                }
            };
            let step = match &spec.kind {
                LayerKind::Input { .. } => Step::Input,
                LayerKind::Conv {
                    kernel,
                    padded,
                    activations,
                    ..
                } => {
                    let relu = relu_only(activations)?;
                    let (Shape::Spatial { c, .. }, Shape::Spatial { c: o, .. }) =
                        (shape.input, shape.output)
                    else {
                        unreachable!("shape inference admits spatial convolutions only")
                    };
                    let fan_in = c * kernel * kernel;
                    names.push(format!("{layer:02}.conv.w"));
                    params.push(glorot_uniform(
                        &mut rng,
                        vec![o, c, *kernel, *kernel],
                        fan_in,
                        o * kernel * kernel,
                    ));
                    names.push(format!("{layer:02}.conv.b"));
                    params.push(Tensor::zeros([o]).with_requires_grad(true));
                    Step::Conv {
                        weight: params.len() - 2,
                        pad: if *padded { kernel / 2 } else { 0 },
                        relu,
                    }
                }
                LayerKind::Pool { size, .. } => {
                    if let Shape::Spatial { h, w, .. } = shape.input {
                        if h % size != 0 || w % size != 0 {
                            return Err(unsupported(format!(
                                "pooling {h}x{w} in blocks of {size} drops trailing cells"
                            )));
                        }
                    }
                    Step::Pool { block: *size }
                }
                LayerKind::Dropout { percent } => Step::Dropout {
                    rate: percent / 100.0,
                },
                LayerKind::Dense { activations, .. } => {
                    let relu = relu_only(activations)?;
                    let m = shape.input.numel();
                    let p = shape.output.numel();
                    names.push(format!("{layer:02}.dense.w"));
                    params.push(glorot_uniform(&mut rng, vec![p, m], m, p));
                    names.push(format!("{layer:02}.dense.b"));
                    params.push(Tensor::zeros([p]).with_requires_grad(true));
                    Step::Dense {
                        weight: params.len() - 2,
                        relu,
                    }
                }
                LayerKind::Normalize => Step::Normalize,
                LayerKind::Centers { param } => {
                    if bank.is_some() {
                        return Err(unsupported("only one centroid layer is supported".into()));
                    }
                    let Shape::Centers { n, k } = shape.output else {
                        unreachable!("centers infer a centers shape")
                    };
                    bank = Some(CentroidBank::zeros(n, k));
                    bank_name = param.clone();
                    Step::Centers
                }
                LayerKind::LabelRef { label } => Step::Ref {
                    label: label.clone(),
                },
            };
            steps.push(step);
        }
        Ok(Self {
            graph: graph.clone(),
            bindings,
            shapes,
            steps,
            params,
            names,
            bank,
            bank_name,
        })
    }

    pub fn graph(&self) -> &ArchGraph {
        &self.graph
    }

    pub fn bindings(&self) -> &ShapeBindings {
        &self.bindings
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Shape of one input image, `[C, H, W]`.
    pub fn input_shape(&self) -> Vec<usize> {
        self.shapes[0].output.dims()
    }

    pub fn classes(&self) -> usize {
        self.bindings.classes
    }

    /// Width of the embedding tap.
    pub fn embed_dim(&self) -> usize {
        let tap = if self.graph.has_tap("norm") {
            "norm"
        } else {
            "x"
        };
        self.graph
            .layers()
            .iter()
            .zip(&self.shapes)
            .find(|(l, _)| l.label.as_deref() == Some(tap))
            .map_or(0, |(_, s)| s.output.numel())
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn bank(&self) -> Option<&CentroidBank<T>> {
        self.bank.as_ref()
    }

    pub fn bank_mut(&mut self) -> Option<&mut CentroidBank<T>> {
        self.bank.as_mut()
    }

    pub fn bank_name(&self) -> &str {
        &self.bank_name
    }

    /// Weight tensors followed by the centroid matrix, in optimizer order.
    pub fn trainable_mut(&mut self, include_bank: bool) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.params.iter_mut().collect();
        if include_bank {
            if let Some(bank) = self.bank.as_mut() {
                out.push(bank.tensor_mut());
            }
        }
        out
    }

    /// Replaces a weight (or the bank, by its name) keeping the shape.
    pub fn set_param(&mut self, name: &str, values: Tensor<T>) -> Result<(), BuildError> {
        let target = if name == self.bank_name && self.bank.is_some() {
            self.bank.as_mut().map(CentroidBank::tensor_mut)
        } else {
            self.names
                .iter()
                .position(|n| n == name)
                .map(|i| &mut self.params[i])
        };
        let Some(target) = target else {
            return Err(BuildError::Parameter {
                name: name.into(),
                message: "no such parameter".into(),
            });
        };
        if target.shape() != values.shape() {
            return Err(BuildError::Parameter {
                name: name.into(),
                message: format!(
                    "shape {:?} does not match {:?}",
                    values.shape(),
                    target.shape()
                ),
            });
        }
        *target = values.with_requires_grad(true);
        Ok(())
    }

    /// Places copies of the parameters on `tape`; with `trainable` false they
    /// are constants and no gradients are kept.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, bank_trainable: bool) -> Bound {
        let place = |tape: &mut Tape<T>, t: &Tensor<T>, grad: bool| {
            let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .expect("parameter shapes are valid");
            tape.leaf(copy.with_requires_grad(grad))
        };
        let params = self
            .params
            .iter()
            .map(|p| place(tape, p, trainable))
            .collect();
        let bank = self
            .bank
            .as_ref()
            .map(|b| place(tape, b.tensor(), bank_trainable));
        Bound { params, bank }
    }

    /// Copies leaf gradients from `tape` into the parameter slots,
    /// replacing what was there.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<(), TensorError> {
        for (p, &v) in self.params.iter_mut().zip(&bound.params) {
            p.zero_grad();
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        if let (Some(bank), Some(v)) = (self.bank.as_mut(), bound.bank) {
            let t = bank.tensor_mut();
            t.zero_grad();
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
        if let Some(bank) = self.bank.as_mut() {
            bank.tensor_mut().zero_grad();
        }
    }

    /// Runs the graph on `input` (`[B, C, H, W]` or `[C, H, W]`). Dropout is
    /// active only when `training`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Outputs, NetworkError> {
        let mut taps = HashMap::new();
        let mut current = input;
        let mut centers = None;
        for (index, (step, spec)) in self.steps.iter().zip(self.graph.layers()).enumerate() {
            let wrap = |source: TensorError| NetworkError {
                layer: index,
                clause: spec.to_string(),
                source,
            };
            current = match step {
                Step::Input => {
                    let expected = self.input_shape();
                    let shape = tape.shape(input);
                    let tail = &shape[shape.len().saturating_sub(3)..];
                    if tail != expected.as_slice() || !(3..=4).contains(&shape.len()) {
                        return Err(wrap(TensorError::ShapeMismatch {
                            op: "input",
                            expected: format!(
                                "[B, {}]",
                                expected
                                    .iter()
                                    .map(ToString::to_string)
                                    .collect::<Vec<_>>()
                                    .join(", ")
                            ),
                            found: format!("{shape:?}"),
                        }));
                    }
                    input
                }
                Step::Conv { weight, pad, relu } => {
                    let y = tape
                        .conv2d(
                            current,
                            bound.params[*weight],
                            bound.params[weight + 1],
                            *pad,
                        )
                        .map_err(wrap)?;
                    if *relu {
                        tape.relu(y).map_err(wrap)?
                    } else {
                        y
                    }
                }
                Step::Pool { block } => tape.maxpool(current, *block).map_err(wrap)?,
                Step::Dropout { rate } => {
                    tape.dropout(current, *rate, training, rng).map_err(wrap)?
                }
                Step::Dense { weight, relu } => {
                    let y = tape
                        .dense(current, bound.params[*weight], bound.params[weight + 1])
                        .map_err(wrap)?;
                    if *relu {
                        tape.relu(y).map_err(wrap)?
                    } else {
                        y
                    }
                }
                Step::Normalize => tape.l2_normalize(current).map_err(wrap)?,
                Step::Centers => {
                    let bank = bound.bank.expect("a centroid layer binds the bank");
                    let c = tape.hadamard_centers(bank).map_err(wrap)?;
                    centers = Some(c);
                    c
                }
                Step::Ref { label } => taps[label.as_str()],
            };
            if let Some(label) = &spec.label {
                taps.insert(label.clone(), current);
            }
        }
        let embedding = taps.get("norm").or_else(|| taps.get("x")).copied();
        let scores = taps.get("scores").copied();
        match (embedding, scores) {
            (Some(embedding), Some(scores)) => Ok(Outputs {
                taps,
                embedding,
                scores,
                centers,
            }),
            _ => unreachable!("build checks the x and scores taps"),
        }
    }
}

fn glorot_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data)
        .expect("initializer shapes are positive")
        .with_requires_grad(true)
}
