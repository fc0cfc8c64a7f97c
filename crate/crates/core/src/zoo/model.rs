use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use super::checkpoint::{Checkpoint, CheckpointDescriptor, TrainingMetadata};
use super::stack::LayerStack;
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, softmax, Rng, Tape, Tensor, Var};

/// One of the classifiers being multiplexed.
///
/// The last layer must be dense; its (flattened) input is the model's embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    stack: LayerStack,
}

/// Tape handles produced by [`ClassifierModel::forward_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub embedding: Var,
}

impl ClassifierModel {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        Self::validate(&arch)?;
        Ok(Self {
            stack: LayerStack::new(arch, rng)?,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        Self::validate(&arch)?;
        Ok(Self {
            stack: LayerStack::from_params(arch, params)?,
        })
    }

    fn validate(arch: &Architecture) -> Result<()> {
        match arch.layers.last() {
            Some(LayerSpec::Dense { .. }) => Ok(()),
            _ => Err(Error::Config(format!(
                "model '{}' must end with a dense classification layer",
                arch.id
            ))),
        }
    }

    pub fn id(&self) -> &str {
        &self.stack.architecture().id
    }

    pub fn architecture(&self) -> &Architecture {
        self.stack.architecture()
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn params(&self) -> &[Tensor] {
        self.stack.params()
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.stack.params_mut()
    }

    pub fn num_classes(&self) -> usize {
        self.stack.output_shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        let last = self.stack.layers().last().expect("validated non-empty");
        last.input.iter().product()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.stack.input_shape()
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<Var> {
        self.stack.register(tape, trainable)
    }

    /// Records the forward pass of `x` (already on the tape) using `params`.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, params: &[Var], x: Var) -> Result<ForwardVars> {
        let n = self.stack.layers().len();
        let body = self.stack.run(tape, params, x, 0..n - 1)?;
        let embedding = tape.flatten(body)?;
        let logits = self.stack.run(tape, params, embedding, n - 1..n)?;
        Ok(ForwardVars { logits, embedding })
    }

    /// Logits and embedding for one input.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.stack.check_input(x)?;
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let xv = tape.constant_ref(x);
        let out = self.forward_tape(&mut tape, &params, xv)?;
        Ok((tape.value(out.logits)?.clone(), tape.value(out.embedding)?.clone()))
    }
}

/// FLOPs of one forward pass through the backbone.
pub fn count_flops(model: &ClassifierModel) -> u64 {
    model.stack.flops()
}

/// Linear map `h[embedding_dim × shared_dim]` into the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    matrix: Tensor,
}

impl ProjectionHead {
    pub fn new(embedding_dim: usize, shared_dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (embedding_dim + shared_dim) as f64).sqrt() as f32;
        Self {
            matrix: Tensor::uniform(&[embedding_dim, shared_dim], bound, rng),
        }
    }

    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::invalid(
                "projection head",
                format!("expected a matrix, got {:?}", matrix.shape()),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor {
        &mut self.matrix
    }

    pub fn embedding_dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn shared_dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// `normalize(hᵀ g)`; a zero projection is an error.
    pub fn project(&self, g: &Tensor) -> Result<Tensor> {
        if g.rank() != 1 || g.len() != self.embedding_dim() {
            return Err(Error::shape("project", self.matrix.shape(), g.shape()));
        }
        let (rows, cols) = (self.embedding_dim(), self.shared_dim());
        let m = self.matrix.data();
        let raw: Vec<f32> = (0..cols)
            .map(|j| {
                (0..rows)
                    .map(|i| f64::from(m[i * cols + j]) * f64::from(g.data()[i]))
                    .sum::<f64>() as f32
            })
            .collect();
        l2_normalize(&Tensor::vector(raw)?)
    }

    pub fn project_tape(tape: &mut Tape<'_>, head: Var, g: Var) -> Result<Var> {
        let raw = tape.matvec(head, g, true)?;
        tape.l2_normalize(raw)
    }
}

/// A classifier with its projection head and per-inference compute cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostedModel {
    pub model: ClassifierModel,
    pub head: ProjectionHead,
    /// Backbone FLOPs; the projection head is excluded.
    pub flops: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierDescriptor {
    model: Architecture,
    shared_dim: usize,
}

pub const CLASSIFIER_KIND: &str = "classifier";

/// Outputs of a frozen model on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Tensor,
    pub embedding: Tensor,
    pub projected: Tensor,
}

impl CostedModel {
    pub fn new(arch: Architecture, shared_dim: usize, rng: &mut Rng) -> Result<Self> {
        let model = ClassifierModel::new(arch, rng)?;
        let head = ProjectionHead::new(model.embedding_dim(), shared_dim, rng);
        Ok(Self::from_parts(model, head))
    }

    pub fn from_parts(model: ClassifierModel, head: ProjectionHead) -> Self {
        let flops = count_flops(&model);
        Self { model, head, flops }
    }

    pub fn id(&self) -> &str {
        self.model.id()
    }

    /// Class probabilities, raw embedding and projected embedding.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        let (logits, embedding) = self.model.forward(x)?;
        let projected = self.head.project(&embedding)?;
        Ok(Inference {
            probs: softmax(&logits)?,
            embedding,
            projected,
        })
    }

    pub fn to_checkpoint(&self, seed: u64, metadata: TrainingMetadata) -> Result<Checkpoint> {
        let descriptor = ClassifierDescriptor {
            model: self.model.architecture().clone(),
            shared_dim: self.head.shared_dim(),
        };
        let mut names = self.model.stack().param_names().to_vec();
        names.push("head".into());
        let mut tensors = self.model.params().to_vec();
        tensors.push(self.head.matrix().clone());
        Ok(Checkpoint {
            descriptor: CheckpointDescriptor {
                kind: CLASSIFIER_KIND.into(),
                architecture: serde_json::to_value(descriptor).map_err(|e| Error::Format {
                    kind: "checkpoint",
                    detail: e.to_string(),
                })?,
                tensor_names: names,
                seed,
                metadata,
            },
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.descriptor.kind != CLASSIFIER_KIND {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: format!(
                    "expected a {CLASSIFIER_KIND} checkpoint, found '{}'",
                    ckpt.descriptor.kind
                ),
            });
        }
        let desc: ClassifierDescriptor =
            serde_json::from_value(ckpt.descriptor.architecture.clone()).map_err(|e| Error::Format {
                kind: "checkpoint",
                detail: e.to_string(),
            })?;
        let (head, params) = ckpt.tensors.split_last().ok_or_else(|| Error::Format {
            kind: "checkpoint",
            detail: "no tensors".into(),
        })?;
        let model = ClassifierModel::from_params(desc.model, params.to_vec())?;
        let head = ProjectionHead::from_matrix(head.clone())?;
        if head.embedding_dim() != model.embedding_dim() || head.shared_dim() != desc.shared_dim {
            return Err(Error::shape(
                "checkpoint head",
                head.matrix().shape(),
                &[model.embedding_dim(), desc.shared_dim],
            ));
        }
        Ok(Self::from_parts(model, head))
    }
}
