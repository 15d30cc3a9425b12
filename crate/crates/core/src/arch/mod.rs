//! Text notation for layer-sequential networks with labeled taps.
//!
//! One clause per layer, terminated by `;`. Fields are separated by `:` and
//! trailing empty fields may be dropped. `#` starts a comment.
//!
//! ```text
//! in:yx:image(28);              input with signal axes yx, 1 feature, extent 28
//! in:yx:3:image(112);           same with 3 input features
//! conv:3x16::r;                 16 kernels of 3x3, options, activations
//! conv:5x64:p:br;               zero padding, batch-norm then ReLU
//! pool:2:m;                     max pooling in 2x2 blocks
//! drop:50;                      dropout of 50 percent
//! dense:n::r ->x;               n output features, ReLU, tapped as `x`
//! norm ->norm;                  x / |x|
//! <-x;                          continue from tap `x`
//! centers(C) ->centers;         Hadamard layer 1·C holding the class centers
//! ```
//!
//! Counts may be symbols bound at shape inference: `n` is the embedding
//! dimension, `K` and `P` the class count.

mod network;
mod parse;
mod shapes;

use std::fmt;

pub use network::{Bound, BuildError, Network, NetworkError, Outputs};
pub use parse::{parse, ParseError, ParseErrorKind};
pub use shapes::{infer_shapes, LayerShape, PoolRounding, Shape, ShapeBindings, ShapeError};

/// Feature count: literal or symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dim {
    Lit(usize),
    Sym(String),
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Lit(n) => write!(f, "{n}"),
            Dim::Sym(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    BatchNorm,
    Relu,
}

impl Activation {
    fn code(self) -> char {
        match self {
            Activation::BatchNorm => 'b',
            Activation::Relu => 'r',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolTechnique {
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input {
        axes: String,
        features: Option<usize>,
        name: String,
        extent: Option<usize>,
    },
    Conv {
        kernel: usize,
        count: Dim,
        padded: bool,
        activations: Vec<Activation>,
    },
    Pool {
        size: usize,
        technique: PoolTechnique,
    },
    Dense {
        count: Dim,
        activations: Vec<Activation>,
    },
    Dropout {
        percent: f64,
    },
    Normalize,
    Centers {
        param: String,
    },
    LabelRef {
        label: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Tap name assigned with `->label`.
    pub label: Option<String>,
}

/// Parsed architecture: an input clause followed by the layer clauses.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchGraph {
    layers: Vec<LayerSpec>,
}

impl ArchGraph {
    pub(crate) fn from_layers(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    /// Every clause, input first.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of clauses including the input.
    pub fn node_count(&self) -> usize {
        self.layers.len()
    }

    /// Clauses that compute something: everything except the input and
    /// `<-label` references.
    pub fn compute_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers
            .iter()
            .filter(|l| !matches!(l.kind, LayerKind::Input { .. } | LayerKind::LabelRef { .. }))
    }

    pub fn input(&self) -> &LayerSpec {
        &self.layers[0]
    }

    pub fn has_tap(&self, label: &str) -> bool {
        self.layers
            .iter()
            .any(|l| l.label.as_deref() == Some(label))
    }

    /// Canonical text; parsing it yields an equal graph.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

fn write_trailing(
    f: &mut fmt::Formatter<'_>,
    options: &str,
    activations: &[Activation],
) -> fmt::Result {
    let acts: String = activations.iter().map(|a| a.code()).collect();
    if !acts.is_empty() {
        write!(f, ":{options}:{acts}")
    } else if !options.is_empty() {
        write!(f, ":{options}")
    } else {
        Ok(())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            LayerKind::Input {
                axes,
                features,
                name,
                extent,
            } => {
                write!(f, "in:{axes}:")?;
                if let Some(c) = features {
                    write!(f, "{c}:")?;
                }
                f.write_str(name)?;
                if let Some(e) = extent {
                    write!(f, "({e})")?;
                }
            }
            LayerKind::Conv {
                kernel,
                count,
                padded,
                activations,
            } => {
                write!(f, "conv:{kernel}x{count}")?;
                write_trailing(f, if *padded { "p" } else { "" }, activations)?;
            }
            LayerKind::Pool { size, technique } => {
                let t = match technique {
                    PoolTechnique::Max => "m",
                };
                write!(f, "pool:{size}:{t}")?;
            }
            LayerKind::Dense { count, activations } => {
                write!(f, "dense:{count}")?;
                write_trailing(f, "", activations)?;
            }
            LayerKind::Dropout { percent } => write!(f, "drop:{percent}")?,
            LayerKind::Normalize => f.write_str("norm")?,
            LayerKind::Centers { param } => write!(f, "centers({param})")?,
            LayerKind::LabelRef { label } => write!(f, "<-{label}")?,
        }
        if let Some(label) = &self.label {
            write!(f, " ->{label}")?;
        }
        f.write_str(";")
    }
}

impl fmt::Display for ArchGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for layer in &self.layers {
            writeln!(f, "{layer}")?;
        }
        Ok(())
    }
}

/// The MNIST embedding network; `normalize` inserts `x/|x|` after the
/// embedding tap.
pub fn mnist_arch_text(normalize: bool) -> String {
    let mut text = String::from(
        "in:yx:image(28);\n\
         conv:3x16::r;\n\
         conv:3x32::r;\n\
         pool:2:m;\n\
         drop:50;\n\
         conv:3x64::r;\n\
         conv:3x64::r;\n\
         pool:2:m;\n\
         drop:50;\n\
         dense:n::r ->x;\n",
    );
    if normalize {
        text.push_str("norm ->norm;\n");
    } else {
        text.push_str("<-x;\n");
    }
    text.push_str("dense:10 ->scores;\ncenters(C) ->centers;\n");
    text
}

/// The face descriptor network (shape-checked only; it uses batch-norm).
pub const FACE_ARCH_TEXT: &str = "\
in:yx:1:image(112);
conv:5x64:p:br;
conv:5x64:p:br;
conv:5x64:p:br;
pool:2:m;
conv:5x128:p:br;
conv:5x128:p:br;
conv:5x128:p:br;
pool:2:m;
conv:5x256:p:br;
conv:5x256:p:br;
conv:5x256:p:br;
conv:5x256:p:br;
pool:2:m;
conv:5x512:p:br;
conv:5x512:p:br;
conv:5x512:p:br;
conv:5x512:p:br;
pool:2:m;
conv:5x512:p:br;
conv:5x512:p:br;
conv:5x512:p:br;
conv:5x512:p:br;
pool:2:m;
dense:4096::br;
dense:1024 ->x;
norm ->norm;
dense:P ->scores;
centers(C) ->centers;
";
