//! Layers, models and the prunable-parameter registry.
//!
//! A [`Model`] keeps every conv/linear weight that takes part in pruning in
//! its registry ([`Model::prunable`]); the registry index is the layer id `l`
//! used throughout pruning, logging and artifacts. Biases, batch-norm affine
//! parameters and exempted weights live in [`Model::dense`].

mod zoo;

use crate::pruning::{soft_prune_node, DerivativeVariant, PrunableParam, PruneMode};
use crate::tensor::{BatchNormStats, Graph, NodeId, Real, Tensor, TensorError};

pub use zoo::{build, ModelKind};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prune(#[from] crate::pruning::PruneError),
    #[error("unknown model {0:?} (expected mlp3, convbn6 or resnet-lite)")]
    UnknownModel(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("model {model} cannot take input {shape:?}: {reason}")]
    UnsupportedInput {
        model: String,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("exempted layer {0:?} does not exist")]
    UnknownExemption(String),
}

impl From<crate::pruning::SoftPruneNodeError> for ModelError {
    fn from(e: crate::pruning::SoftPruneNodeError) -> Self {
        match e {
            crate::pruning::SoftPruneNodeError::Prune(e) => ModelError::Prune(e),
            crate::pruning::SoftPruneNodeError::Tensor(e) => ModelError::Tensor(e),
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Where a layer's weight is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSlot {
    /// Index into the prunable registry.
    Prunable(usize),
    /// Index into the dense parameter list (exempted layers).
    Dense(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<F = f64> {
    pub name: String,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d,
    BatchNorm2d,
    Relu,
    AvgPool,
    Flatten,
    ResidualBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<F = f64> {
    Linear {
        name: String,
        weight: WeightSlot,
        bias: usize,
    },
    Conv2d {
        name: String,
        weight: WeightSlot,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        name: String,
        gamma: usize,
        beta: usize,
        stats: BatchNormStats<F>,
    },
    Relu,
    /// `k×k` average pooling; `None` pools the whole feature map.
    AvgPool { k: Option<usize> },
    Flatten,
    /// `relu(body(x) + x)`.
    Residual { name: String, body: Vec<Layer<F>> },
}

impl<F> Layer<F> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::BatchNorm2d { .. } => LayerKind::BatchNorm2d,
            Layer::Relu => LayerKind::Relu,
            Layer::AvgPool { .. } => LayerKind::AvgPool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Residual { .. } => LayerKind::ResidualBlock,
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Linear { name, .. }
            | Layer::Conv2d { name, .. }
            | Layer::BatchNorm2d { name, .. }
            | Layer::Residual { name, .. } => Some(name),
            _ => None,
        }
    }
}

impl<F: Real> Layer<F> {
    pub fn cast<G: Real>(&self) -> Layer<G> {
        match self {
            Layer::Linear { name, weight, bias } => Layer::Linear {
                name: name.clone(),
                weight: *weight,
                bias: *bias,
            },
            Layer::Conv2d {
                name,
                weight,
                stride,
                pad,
            } => Layer::Conv2d {
                name: name.clone(),
                weight: *weight,
                stride: *stride,
                pad: *pad,
            },
            Layer::BatchNorm2d {
                name,
                gamma,
                beta,
                stats,
            } => Layer::BatchNorm2d {
                name: name.clone(),
                gamma: *gamma,
                beta: *beta,
                stats: stats.cast(),
            },
            Layer::Relu => Layer::Relu,
            Layer::AvgPool { k } => Layer::AvgPool { k: *k },
            Layer::Flatten => Layer::Flatten,
            Layer::Residual { name, body } => Layer::Residual {
                name: name.clone(),
                body: body.iter().map(Layer::cast).collect(),
            },
        }
    }
}

fn visit_bn<'a, F>(layers: &'a [Layer<F>], out: &mut Vec<(&'a str, &'a BatchNormStats<F>)>) {
    for l in layers {
        match l {
            Layer::BatchNorm2d { name, stats, .. } => out.push((name, stats)),
            Layer::Residual { body, .. } => visit_bn(body, out),
            _ => {}
        }
    }
}

fn visit_bn_mut<'a, F>(
    layers: &'a mut [Layer<F>],
    out: &mut Vec<(&'a str, &'a mut BatchNormStats<F>)>,
) {
    for l in layers {
        match l {
            Layer::BatchNorm2d { name, stats, .. } => out.push((name, stats)),
            Layer::Residual { body, .. } => visit_bn_mut(body, out),
            _ => {}
        }
    }
}

/// Graph handles for one prunable parameter after a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PrunableNodes {
    /// The raw weights `w`.
    pub w: NodeId,
    /// What the layer consumed (`v`, or `w` itself when pruning is off).
    pub v: NodeId,
    /// Threshold node, present in soft mode.
    pub tau: Option<NodeId>,
}

/// Handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: NodeId,
    pub prunable: Vec<PrunableNodes>,
    pub dense: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f64> {
    pub name: String,
    /// Per-sample input shape (no batch dimension).
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<Layer<F>>,
    pub prunable: Vec<PrunableParam<F>>,
    pub dense: Vec<NamedTensor<F>>,
    pub exempt: Vec<String>,
}

impl<F: Real> Model<F> {
    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.prunable.iter().map(|p| p.numel()).sum::<usize>()
            + self.dense.iter().map(|d| d.value.numel()).sum::<usize>()
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable.iter().map(|p| p.numel()).sum()
    }

    pub fn kept_count(&self) -> usize {
        self.prunable.iter().map(|p| p.kept_count()).sum()
    }

    /// Fraction of registry weights with `w^2 > tau`, recomputed from weights.
    pub fn keep_ratio(&self) -> f64 {
        let total = self.prunable_count();
        if total == 0 {
            return 1.0;
        }
        self.kept_count() as f64 / total as f64
    }

    /// Fraction of registry weights inside their layer's transitional band.
    pub fn transitional_occupancy(&self) -> f64 {
        let total = self.prunable_count();
        if total == 0 {
            return 0.0;
        }
        let n: usize = self.prunable.iter().map(|p| p.transitional_count()).sum();
        n as f64 / total as f64
    }

    pub fn soft_l0_total(&self) -> f64 {
        self.prunable.iter().map(|p| p.soft_l0()).sum()
    }

    pub fn set_prune_mode(&mut self, mode: PruneMode) {
        for p in &mut self.prunable {
            p.mode = mode;
        }
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            layers: self.layers.iter().map(Layer::cast).collect(),
            prunable: self.prunable.iter().map(PrunableParam::cast).collect(),
            dense: self
                .dense
                .iter()
                .map(|d| NamedTensor {
                    name: d.name.clone(),
                    value: d.value.cast(),
                })
                .collect(),
            exempt: self.exempt.clone(),
        }
    }

    /// Batch-norm running statistics in layer order, nested blocks included.
    pub fn batchnorm_stats(&self) -> Vec<(&str, &BatchNormStats<F>)> {
        let mut out = Vec::new();
        visit_bn(&self.layers, &mut out);
        out
    }

    pub fn batchnorm_stats_mut(&mut self) -> Vec<(&str, &mut BatchNormStats<F>)> {
        let mut out = Vec::new();
        visit_bn_mut(&mut self.layers, &mut out);
        out
    }

    pub fn prunable_index(&self, name: &str) -> Option<usize> {
        self.prunable.iter().position(|p| p.name == name)
    }

    /// Records a forward pass on `graph` for an input batch `[B, ...input_shape]`.
    ///
    /// Prunable weights enter through their surrogate: soft mode records the
    /// soft-prune op (with the given derivative variant), hard mode multiplies
    /// by the fixed mask, off mode uses `w` directly.
    pub fn forward(
        &mut self,
        graph: &mut Graph<F>,
        input: NodeId,
        training: bool,
        variant: DerivativeVariant,
    ) -> Result<ForwardPass> {
        let shape = graph.shape(input);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(ModelError::InputShape {
                expected: self.input_shape.clone(),
                got: shape.to_vec(),
            });
        }
        let mut prunable = Vec::with_capacity(self.prunable.len());
        for p in &self.prunable {
            prunable.push(register_prunable(graph, p, variant)?);
        }
        let dense: Vec<NodeId> = self
            .dense
            .iter()
            .map(|d| graph.param(d.value.clone()))
            .collect();
        let weight = |slot: WeightSlot| match slot {
            WeightSlot::Prunable(l) => prunable[l].v,
            WeightSlot::Dense(i) => dense[i],
        };
        let logits = run_layers(graph, &mut self.layers, input, training, &weight, &dense)?;
        Ok(ForwardPass {
            logits,
            prunable,
            dense,
        })
    }

    /// Eval-mode logits for a batch, without gradient tracking.
    pub fn predict(&mut self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let pass = self.forward(&mut g, x, false, DerivativeVariant::Approx)?;
        Ok(g.value(pass.logits).clone())
    }
}

fn register_prunable<F: Real>(
    graph: &mut Graph<F>,
    p: &PrunableParam<F>,
    variant: DerivativeVariant,
) -> Result<PrunableNodes> {
    let w = graph.param(p.w.clone());
    Ok(match p.mode {
        PruneMode::Off => PrunableNodes { w, v: w, tau: None },
        PruneMode::Soft => {
            let tau = graph.param(Tensor::scalar(F::of(p.tau)));
            let v = soft_prune_node(graph, w, tau, p.temp(), variant)?;
            PrunableNodes {
                w,
                v,
                tau: Some(tau),
            }
        }
        PruneMode::Hard => {
            let mask = match p.mask() {
                Some(m) => m.to_vec(),
                None => p.threshold_mask(),
            };
            let m = graph.constant(Tensor::from_fn(p.w.shape(), |i| {
                if mask[i] {
                    F::one()
                } else {
                    F::zero()
                }
            }));
            let v = graph.mul(w, m)?;
            PrunableNodes { w, v, tau: None }
        }
    })
}

fn run_layers<F: Real>(
    graph: &mut Graph<F>,
    layers: &mut [Layer<F>],
    mut x: NodeId,
    training: bool,
    weight: &dyn Fn(WeightSlot) -> NodeId,
    dense: &[NodeId],
) -> Result<NodeId> {
    for layer in layers {
        x = match layer {
            Layer::Linear { weight: w, bias, .. } => {
                let y = graph.matmul_t(x, weight(*w))?;
                graph.add(y, dense[*bias])?
            }
            Layer::Conv2d {
                weight: w,
                stride,
                pad,
                ..
            } => graph.conv2d(x, weight(*w), *stride, *pad)?,
            Layer::BatchNorm2d {
                gamma, beta, stats, ..
            } => graph.batchnorm2d(x, dense[*gamma], dense[*beta], stats, training)?,
            Layer::Relu => graph.relu(x)?,
            Layer::AvgPool { k } => {
                let k = match k {
                    Some(k) => *k,
                    None => {
                        let s = graph.shape(x);
                        if s.len() != 4 || s[2] != s[3] {
                            return Err(TensorError::ShapeMismatch {
                                op: "global_avgpool",
                                lhs: s.to_vec(),
                                rhs: vec![],
                            }
                            .into());
                        }
                        s[2]
                    }
                };
                graph.avgpool2d(x, k)?
            }
            Layer::Flatten => graph.flatten(x)?,
            Layer::Residual { body, .. } => {
                let y = run_layers(graph, body, x, training, weight, dense)?;
                let sum = graph.add(y, x)?;
                graph.relu(sum)?
            }
        };
    }
    Ok(x)
}

/// `sum w^2` over registry weights, in registry order.
pub fn l2_penalty<F: Real>(model: &Model<F>) -> Tensor<F> {
    let mut acc = F::zero();
    for p in &model.prunable {
        for &x in p.w.data() {
            acc += x * x;
        }
    }
    Tensor::scalar(acc)
}

/// `sum |w|` over registry weights, in registry order.
pub fn l1_penalty<F: Real>(model: &Model<F>) -> Tensor<F> {
    let mut acc = F::zero();
    for p in &model.prunable {
        for &x in p.w.data() {
            acc += x.abs();
        }
    }
    Tensor::scalar(acc)
}
