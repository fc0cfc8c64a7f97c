//! The neural multiplexer: a small convolutional meta-feature network plus
//! a stacking matrix whose per-model scores are discounted by compute cost
//! and softmax-normalized into routing weights.

use serde::{Deserialize, Serialize};

use crate::contrastive::LOG_EPS;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{sgd_step, softmax, Rng, Tape, Tensor, Var};
use crate::zoo::{
    Architecture, Checkpoint, CheckpointDescriptor, CostedModel, LayerSpec, LayerStack, TrainingMetadata,
};

pub const MULTIPLEXER_KIND: &str = "multiplexer";

/// Serializable description of a [`MuxNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuxArchitecture {
    pub input_shape: Vec<usize>,
    /// Convolution / ReLU stack producing the meta-features.
    pub layers: Vec<LayerSpec>,
    /// Width of the projected embeddings the meta-features are distilled towards.
    pub shared_dim: usize,
    /// Ids of the multiplexed models, in weight order.
    pub model_ids: Vec<String>,
    /// Per-model compute cost (FLOPs), in weight order.
    pub costs: Vec<f64>,
}

impl MuxArchitecture {
    /// Four convolutions over a 1×16×16 input, spatial size 16→4→2→1→1.
    pub fn default_layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv {
                filters: 4,
                kernel: 4,
                stride: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                filters: 8,
                kernel: 2,
                stride: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                filters: 16,
                kernel: 2,
                stride: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                filters: 16,
                kernel: 1,
                stride: 1,
            },
        ]
    }

    fn stack_arch(&self) -> Architecture {
        Architecture {
            id: "mux".into(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
        }
    }
}

/// Routing weights for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct MuxOutput {
    /// Probability vector over models.
    pub weights: Tensor,
    pub meta: Tensor,
    /// Pre-softmax, cost-discounted scores.
    pub logits: Tensor,
}

impl MuxOutput {
    /// Weight of the cloud model in a two-model mobile/cloud setup.
    pub fn w_cloud(&self, cloud: usize) -> f32 {
        self.weights.data()[cloud]
    }
}

/// Cost-discounted stacking weights: `softmax_i((Σ_j v_ij m_j) / c_i)`.
pub fn mux_weights(m: &Tensor, v: &Tensor, costs: &[f32]) -> Result<MuxOutput> {
    let (n, width) = match v.shape() {
        [n, w] => (*n, *w),
        s => return Err(Error::invalid("mux_weights", format!("v must be a matrix, got {s:?}"))),
    };
    if m.len() != width || costs.len() != n {
        return Err(Error::shape("mux_weights", v.shape(), &[m.len(), costs.len()]));
    }
    if let Some(c) = costs.iter().find(|&&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::invalid(
            "mux_weights",
            format!("costs must be positive, got {c}"),
        ));
    }
    let mut tape = Tape::new();
    let mv = tape.constant_ref(m);
    let vv = tape.constant_ref(v);
    let inv: Vec<f32> = costs.iter().map(|c| 1.0 / c).collect();
    let (logits, weights) = weights_tape(&mut tape, vv, mv, &inv)?;
    Ok(MuxOutput {
        weights: tape.value(weights)?.clone(),
        meta: m.clone(),
        logits: tape.value(logits)?.clone(),
    })
}

fn weights_tape(tape: &mut Tape<'_>, v: Var, m: Var, inv_costs: &[f32]) -> Result<(Var, Var)> {
    let scores = tape.matvec(v, m, false)?;
    let logits = tape.mul_const(scores, inv_costs)?;
    let weights = tape.softmax(logits)?;
    Ok((logits, weights))
}

/// `Σ_i w_i p_i` where each `p_i` is a class-probability vector.
pub fn ensemble_predict(w: &Tensor, probs: &[Tensor]) -> Result<Tensor> {
    if w.len() != probs.len() || probs.is_empty() {
        return Err(Error::invalid(
            "ensemble_predict",
            format!("{} weights for {} models", w.len(), probs.len()),
        ));
    }
    let classes = probs[0].len();
    if probs.iter().any(|p| p.len() != classes) {
        return Err(Error::invalid("ensemble_predict", "models disagree on class count"));
    }
    let mut out = vec![0.0f64; classes];
    for (&wi, p) in w.data().iter().zip(probs) {
        for (o, &pv) in out.iter_mut().zip(p.data()) {
            *o += f64::from(wi) * f64::from(pv);
        }
    }
    Tensor::vector(out.into_iter().map(|v| v as f32).collect())
}

/// Negative log-likelihood of the true class, `-log((p+ε)/(1+ε))`.
pub fn mux_loss(y_ens: &Tensor, y: usize) -> Result<f32> {
    let p = *y_ens.data().get(y).ok_or(Error::LabelOutOfRange {
        label: y,
        classes: y_ens.len(),
    })?;
    let loss = -((f64::from(p) + f64::from(LOG_EPS)) / (1.0 + f64::from(LOG_EPS))).ln();
    Ok((loss as f32).max(0.0))
}

/// `Σ_i (1 - d(m̃, e_i))` with `m̃ = normalize(bridge · m)`.
pub fn distill_loss(bridge: &Tensor, m: &Tensor, embeddings: &[Tensor]) -> Result<f32> {
    let mut tape = Tape::new();
    let b = tape.constant_ref(bridge);
    let mv = tape.constant_ref(m);
    let es: Vec<Var> = embeddings.iter().map(|e| tape.constant_ref(e)).collect();
    let l = distill_tape(&mut tape, b, mv, &es)?;
    Ok(tape.value(l)?.item()?.max(0.0))
}

fn distill_tape(tape: &mut Tape<'_>, bridge: Var, m: Var, embeddings: &[Var]) -> Result<Var> {
    let mapped = tape.matvec(bridge, m, false)?;
    let unit = tape.l2_normalize(mapped)?;
    let mut terms = Vec::with_capacity(embeddings.len());
    for &e in embeddings {
        let dot = tape.dot(unit, e)?;
        // 1 - (1 + dot)/2
        terms.push(tape.affine(dot, -0.5, 0.5)?);
    }
    tape.sum(&terms)
}

/// Meta-feature network, stacking matrix `v[N×M]`, and distillation bridge `[shared_dim×M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MuxNet {
    arch: MuxArchitecture,
    stack: LayerStack,
    v: Tensor,
    bridge: Tensor,
    inv_costs: Vec<f32>,
}

/// Tape handles of a registered [`MuxNet`].
#[derive(Debug, Clone)]
pub struct MuxVars {
    pub stack: Vec<Var>,
    pub v: Var,
    pub bridge: Var,
}

/// Frozen-model outputs the multiplexer trains against for one sample.
#[derive(Debug, Clone)]
pub struct MuxTarget {
    /// `[N × classes]`, row `i` is model `i`'s class probabilities.
    pub probs: Tensor,
    /// Projected embeddings, one per model.
    pub embeddings: Vec<Tensor>,
}

impl MuxTarget {
    pub fn from_models(zoo: &[CostedModel], x: &Tensor) -> Result<Self> {
        let mut rows = Vec::with_capacity(zoo.len());
        let mut embeddings = Vec::with_capacity(zoo.len());
        for m in zoo {
            let inf = m.infer(x)?;
            rows.push(inf.probs.into_data());
            embeddings.push(inf.projected);
        }
        Ok(Self {
            probs: Tensor::from_rows(&rows)?,
            embeddings,
        })
    }
}

/// Losses of one [`mux_train_step`], batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuxStepResult {
    pub loss: f32,
    pub mux_loss: f32,
    pub distill_loss: f32,
}

impl MuxNet {
    pub fn new(arch: MuxArchitecture, rng: &mut Rng) -> Result<Self> {
        let stack = LayerStack::new(arch.stack_arch(), rng)?;
        let meta_dim = stack.output_shape().iter().product::<usize>();
        let n = arch.model_ids.len();
        let bound_v = (6.0 / (n + meta_dim) as f64).sqrt() as f32;
        let bound_b = (6.0 / (arch.shared_dim + meta_dim) as f64).sqrt() as f32;
        let v = Tensor::uniform(&[n, meta_dim], bound_v, rng);
        let bridge = Tensor::uniform(&[arch.shared_dim, meta_dim], bound_b, rng);
        Self::from_parts(arch, stack.params().to_vec(), v, bridge)
    }

    pub fn from_parts(arch: MuxArchitecture, params: Vec<Tensor>, v: Tensor, bridge: Tensor) -> Result<Self> {
        if arch
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Crop { .. }))
        {
            return Err(Error::Config(
                "multiplexer layers must be convolutions and ReLUs".into(),
            ));
        }
        let n = arch.model_ids.len();
        if n == 0 || arch.costs.len() != n {
            return Err(Error::Config(format!(
                "multiplexer needs one cost per model ({} ids, {} costs)",
                n,
                arch.costs.len()
            )));
        }
        let max = arch.costs.iter().copied().fold(0.0f64, f64::max);
        if arch.costs.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::Config("multiplexer costs must be positive".into()));
        }
        let stack = LayerStack::from_params(arch.stack_arch(), params)?;
        let meta_dim = stack.output_shape().iter().product::<usize>();
        if v.shape() != [n, meta_dim] {
            return Err(Error::shape("multiplexer v", v.shape(), &[n, meta_dim]));
        }
        if bridge.shape() != [arch.shared_dim, meta_dim] {
            return Err(Error::shape(
                "multiplexer bridge",
                bridge.shape(),
                &[arch.shared_dim, meta_dim],
            ));
        }
        // Costs are rescaled by the largest one; the argmax of the weights is unaffected.
        let inv_costs = arch.costs.iter().map(|&c| (max / c) as f32).collect();
        Ok(Self {
            arch,
            stack,
            v,
            bridge,
            inv_costs,
        })
    }

    pub fn architecture(&self) -> &MuxArchitecture {
        &self.arch
    }

    pub fn num_models(&self) -> usize {
        self.arch.model_ids.len()
    }

    pub fn meta_dim(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn bridge(&self) -> &Tensor {
        &self.bridge
    }

    /// Costs after division by the largest cost.
    pub fn normalized_costs(&self) -> Vec<f32> {
        self.inv_costs.iter().map(|c| 1.0 / c).collect()
    }

    pub fn stack_params_mut(&mut self) -> &mut [Tensor] {
        self.stack.params_mut()
    }

    pub fn v_mut(&mut self) -> &mut Tensor {
        &mut self.v
    }

    /// FLOPs of one routing decision: the meta-feature stack plus the stacking product.
    /// The distillation bridge is used only in training.
    pub fn flops(&self) -> u64 {
        self.stack.flops() + 2 * (self.num_models() * self.meta_dim()) as u64
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> MuxVars {
        let stack = self.stack.register(tape, trainable);
        let (v, bridge) = if trainable {
            (tape.param(&self.v), tape.param(&self.bridge))
        } else {
            (tape.constant_ref(&self.v), tape.constant_ref(&self.bridge))
        };
        MuxVars { stack, v, bridge }
    }

    fn meta_tape(&self, tape: &mut Tape<'_>, vars: &MuxVars, x: Var) -> Result<Var> {
        let n = self.stack.layers().len();
        let out = self.stack.run(tape, &vars.stack, x, 0..n)?;
        tape.flatten(out)
    }

    pub fn meta_features(&self, x: &Tensor) -> Result<Tensor> {
        self.stack.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant_ref(x);
        let m = self.meta_tape(&mut tape, &vars, xv)?;
        Ok(tape.value(m)?.clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<MuxOutput> {
        let m = self.meta_features(x)?;
        mux_weights(&m, &self.v, &self.normalized_costs())
    }

    /// Records `L_mux + λ·L_distill` for one sample.
    pub fn loss_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &MuxVars,
        x: Var,
        target: &MuxTarget,
        y: usize,
        lambda_distill: f32,
    ) -> Result<(Var, Var, Option<Var>)> {
        let m = self.meta_tape(tape, vars, x)?;
        let (_, w) = weights_tape(tape, vars.v, m, &self.inv_costs)?;
        let probs = tape.constant(target.probs.clone());
        let y_ens = tape.matvec(probs, w, true)?;
        let p = tape.index(y_ens, y)?;
        let shifted = tape.affine(p, 1.0 / (1.0 + LOG_EPS), LOG_EPS / (1.0 + LOG_EPS))?;
        let log = tape.log(shifted)?;
        let nll = tape.scale(log, -1.0)?;
        if lambda_distill == 0.0 {
            return Ok((nll, nll, None));
        }
        let es: Vec<Var> = target.embeddings.iter().map(|e| tape.constant(e.clone())).collect();
        let distill = distill_tape(tape, vars.bridge, m, &es)?;
        let weighted = tape.scale(distill, lambda_distill)?;
        let total = tape.add(nll, weighted)?;
        Ok((total, nll, Some(distill)))
    }

    pub fn to_checkpoint(&self, seed: u64, metadata: TrainingMetadata) -> Result<Checkpoint> {
        let mut names = self.stack.param_names().to_vec();
        names.push("v".into());
        names.push("bridge".into());
        let mut tensors = self.stack.params().to_vec();
        tensors.push(self.v.clone());
        tensors.push(self.bridge.clone());
        Ok(Checkpoint {
            descriptor: CheckpointDescriptor {
                kind: MULTIPLEXER_KIND.into(),
                architecture: serde_json::to_value(&self.arch).map_err(|e| Error::Format {
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
        if ckpt.descriptor.kind != MULTIPLEXER_KIND {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: format!(
                    "expected a {MULTIPLEXER_KIND} checkpoint, found '{}'",
                    ckpt.descriptor.kind
                ),
            });
        }
        let arch: MuxArchitecture =
            serde_json::from_value(ckpt.descriptor.architecture.clone()).map_err(|e| Error::Format {
                kind: "checkpoint",
                detail: e.to_string(),
            })?;
        let mut tensors = ckpt.tensors.clone();
        let (bridge, v) = match (tensors.pop(), tensors.pop()) {
            (Some(b), Some(v)) => (b, v),
            _ => {
                return Err(Error::Format {
                    kind: "checkpoint",
                    detail: "multiplexer checkpoint lacks v/bridge".into(),
                })
            }
        };
        Self::from_parts(arch, tensors, v, bridge)
    }
}

/// One SGD step on `Θ` and `v` against frozen models.
pub fn mux_train_step(
    mux: &mut MuxNet,
    zoo: &[CostedModel],
    batch: &Batch,
    alpha: f32,
    lambda_distill: f32,
) -> Result<MuxStepResult> {
    let targets = batch
        .inputs
        .iter()
        .map(|x| MuxTarget::from_models(zoo, x))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MuxTarget> = targets.iter().collect();
    mux_train_step_targets(
        mux,
        &batch.inputs.iter().collect::<Vec<_>>(),
        &refs,
        &batch.labels,
        alpha,
        lambda_distill,
    )
}

/// [`mux_train_step`] with precomputed frozen-model outputs.
pub fn mux_train_step_targets(
    mux: &mut MuxNet,
    inputs: &[&Tensor],
    targets: &[&MuxTarget],
    labels: &[usize],
    alpha: f32,
    lambda_distill: f32,
) -> Result<MuxStepResult> {
    if inputs.is_empty() || inputs.len() != targets.len() || inputs.len() != labels.len() {
        return Err(Error::invalid("mux_train_step", "empty or inconsistent batch"));
    }
    let mut acc: Option<Vec<Tensor>> = None;
    let (mut total, mut nll_sum, mut distill_sum) = (0.0f64, 0.0f64, 0.0f64);
    for ((x, target), &y) in inputs.iter().zip(targets).zip(labels) {
        let mut tape = Tape::new();
        let vars = mux.register(&mut tape, true);
        let xv = tape.constant_ref(x);
        let (loss, nll, distill) =
            mux.loss_tape(&mut tape, &vars, xv, target, y, lambda_distill)
                .map_err(|e| match e {
                    Error::NonFinite(op) => Error::Divergence(format!("non-finite value in {op}")),
                    other => other,
                })?;
        let value = tape.value(loss)?.item()?;
        if !value.is_finite() {
            return Err(Error::Divergence("non-finite multiplexer loss".into()));
        }
        total += f64::from(value);
        nll_sum += f64::from(tape.value(nll)?.item()?);
        if let Some(d) = distill {
            distill_sum += f64::from(tape.value(d)?.item()?);
        }
        let g = tape.backward(loss)?;
        let mut grads = g.wrt_all(&vars.stack)?;
        grads.push(g.wrt(vars.v)?);
        grads.push(g.wrt(vars.bridge)?);
        match &mut acc {
            None => acc = Some(grads),
            Some(sum) => {
                for (s, gi) in sum.iter_mut().zip(&grads) {
                    for (a, b) in s.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    let n = inputs.len() as f32;
    let mut grads = acc.expect("non-empty batch");
    for t in &mut grads {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    let bridge_grad = grads.pop().expect("bridge");
    let v_grad = grads.pop().expect("v");
    let step = |e: Error| match e {
        Error::NonFinite(_) => Error::Divergence("non-finite multiplexer update".into()),
        other => other,
    };
    sgd_step(mux.stack.params_mut(), &grads, alpha).map_err(step)?;
    sgd_step(std::slice::from_mut(&mut mux.v), &[v_grad], alpha).map_err(step)?;
    sgd_step(std::slice::from_mut(&mut mux.bridge), &[bridge_grad], alpha).map_err(step)?;
    let nf = f64::from(n);
    Ok(MuxStepResult {
        loss: (total / nf) as f32,
        mux_loss: (nll_sum / nf) as f32,
        distill_loss: (distill_sum / nf) as f32,
    })
}

/// Probability vectors and weights for every model, convenience for evaluation.
pub fn model_probabilities(zoo: &[CostedModel], x: &Tensor) -> Result<Vec<Tensor>> {
    zoo.iter().map(|m| softmax(&m.model.forward(x)?.0)).collect()
}
