use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::{Activation, ArchGraph, Dim, LayerKind, PoolTechnique};

/// Signal shape between layers (batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial {
        c: usize,
        h: usize,
        w: usize,
    },
    Flat(usize),
    /// The `[n, K]` centroid matrix.
    Centers {
        n: usize,
        k: usize,
    },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
            Shape::Centers { n, k } => n * k,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Spatial { c, h, w } => vec![c, h, w],
            Shape::Flat(n) => vec![n],
            Shape::Centers { n, k } => vec![n, k],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Shape::Flat(n) => write!(f, "{n}"),
            Shape::Centers { n, k } => write!(f, "{n}x{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolRounding {
    /// Extents must be divisible by the block size.
    #[default]
    Exact,
    /// Trailing rows and columns that do not fill a block are dropped.
    Floor,
}

/// Values for the free quantities of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeBindings {
    /// Square input extent; overrides the one written in the input clause.
    pub input_extent: Option<usize>,
    /// Binds the symbol `n`.
    pub embed_dim: usize,
    /// Binds the symbols `K` and `P`.
    pub classes: usize,
    pub pool_rounding: PoolRounding,
}

impl ShapeBindings {
    pub fn new(embed_dim: usize, classes: usize) -> Self {
        Self {
            input_extent: None,
            embed_dim,
            classes,
            pool_rounding: PoolRounding::Exact,
        }
    }

    pub fn with_input(mut self, extent: usize) -> Self {
        self.input_extent = Some(extent);
        self
    }

    pub fn with_pool_rounding(mut self, rounding: PoolRounding) -> Self {
        self.pool_rounding = rounding;
        self
    }

    pub fn resolve(&self, dim: &Dim) -> Option<usize> {
        match dim {
            Dim::Lit(n) => Some(*n),
            Dim::Sym(s) if s == "n" => Some(self.embed_dim),
            Dim::Sym(s) if s == "K" || s == "P" => Some(self.classes),
            Dim::Sym(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("layer {layer} ({clause}): {message}")]
pub struct ShapeError {
    /// Clause index, the input being 0.
    pub layer: usize,
    pub clause: String,
    pub message: String,
}

/// Shapes around one clause.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub layer: usize,
    /// Short human-readable form with symbols resolved, e.g. `dense 2 r`.
    pub description: String,
    pub input: Shape,
    pub output: Shape,
}

fn acts_suffix(acts: &[Activation]) -> String {
    let codes: String = acts
        .iter()
        .map(|a| match a {
            Activation::BatchNorm => 'b',
            Activation::Relu => 'r',
        })
        .collect();
    if codes.is_empty() {
        codes
    } else {
        format!(" {codes}")
    }
}

/// Runs the shape chain through every clause.
pub fn infer_shapes(
    graph: &ArchGraph,
    bindings: &ShapeBindings,
) -> Result<Vec<LayerShape>, ShapeError> {
    let mut taps: HashMap<&str, Shape> = HashMap::new();
    let mut out = Vec::with_capacity(graph.node_count());
    let mut current = Shape::Flat(0);
    for (index, spec) in graph.layers().iter().enumerate() {
        let fail = |message: String| ShapeError {
            layer: index,
            clause: spec.to_string(),
            message,
        };
        let resolve = |dim: &Dim| {
            bindings
                .resolve(dim)
                .filter(|&v| v > 0)
                .ok_or_else(|| fail(format!("unbound or zero size '{dim}'")))
        };
        let input = current;
        let (description, output) = match &spec.kind {
            LayerKind::Input {
                features,
                name,
                extent,
                axes,
            } => {
                if axes.len() != 2 {
                    return Err(fail(format!(
                        "only 2 signal axes are supported, got '{axes}'"
                    )));
                }
                let e = bindings
                    .input_extent
                    .or(*extent)
                    .ok_or_else(|| fail("input extent is not bound".into()))?;
                let c = features.unwrap_or(1);
                (format!("in {name}"), Shape::Spatial { c, h: e, w: e })
            }
            LayerKind::Conv {
                kernel,
                count,
                padded,
                activations,
            } => {
                let Shape::Spatial { h, w, .. } = input else {
                    return Err(fail(format!(
                        "convolution needs a spatial input, got {input}"
                    )));
                };
                let count = resolve(count)?;
                let (oh, ow) = if *padded {
                    if kernel % 2 == 0 {
                        return Err(fail("padding keeps extents only for odd kernels".into()));
                    }
                    (h, w)
                } else {
                    if h < *kernel || w < *kernel {
                        return Err(fail(format!("kernel {kernel} exceeds input {input}")));
                    }
                    (h - kernel + 1, w - kernel + 1)
                };
                let pad = if *padded { " p" } else { "" };
                (
                    format!("conv {kernel}x{count}{pad}{}", acts_suffix(activations)),
                    Shape::Spatial {
                        c: count,
                        h: oh,
                        w: ow,
                    },
                )
            }
            LayerKind::Pool { size, technique } => {
                let Shape::Spatial { c, h, w } = input else {
                    return Err(fail(format!("pooling needs a spatial input, got {input}")));
                };
                if h < *size || w < *size {
                    return Err(fail(format!("block {size} exceeds input {input}")));
                }
                if bindings.pool_rounding == PoolRounding::Exact && (h % size != 0 || w % size != 0)
                {
                    return Err(fail(format!(
                        "extent {h}x{w} is not divisible by block {size}"
                    )));
                }
                let t = match technique {
                    PoolTechnique::Max => "m",
                };
                (
                    format!("pool {size} {t}"),
                    Shape::Spatial {
                        c,
                        h: h / size,
                        w: w / size,
                    },
                )
            }
            LayerKind::Dropout { percent } => {
                if matches!(input, Shape::Centers { .. }) {
                    return Err(fail("dropout cannot follow the centroid layer".into()));
                }
                (format!("drop {percent}"), input)
            }
            LayerKind::Dense { count, activations } => {
                if matches!(input, Shape::Centers { .. }) {
                    return Err(fail("dense layer cannot follow the centroid layer".into()));
                }
                let count = resolve(count)?;
                let flatten = match input {
                    Shape::Spatial { .. } => format!(" (flatten {})", input.numel()),
                    _ => String::new(),
                };
                (
                    format!("dense {count}{}{flatten}", acts_suffix(activations)),
                    Shape::Flat(count),
                )
            }
            LayerKind::Normalize => {
                let Shape::Flat(_) = input else {
                    return Err(fail(format!(
                        "normalization needs a flat input, got {input}"
                    )));
                };
                ("norm".into(), input)
            }
            LayerKind::Centers { param } => {
                let Some(&Shape::Flat(n)) = taps.get("x") else {
                    return Err(fail("centroid layer needs a flat embedding tap 'x'".into()));
                };
                (
                    format!("centers {param}"),
                    Shape::Centers {
                        n,
                        k: bindings.classes,
                    },
                )
            }
            LayerKind::LabelRef { label } => {
                let shape = *taps
                    .get(label.as_str())
                    .ok_or_else(|| fail(format!("unresolved reference '{label}'")))?;
                (format!("<- {label}"), shape)
            }
        };
        if let Some(label) = &spec.label {
            taps.insert(label, output);
        }
        current = output;
        out.push(LayerShape {
            layer: index,
            description,
            input,
            output,
        });
    }
    Ok(out)
}
