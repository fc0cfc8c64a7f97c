//! Pairwise contrastive loss over projected embeddings and the joint
//! zoo training step.
//!
//! For a pair of models on one sample, both correct pulls their projected
//! embeddings together, exactly one correct pushes them apart, and both
//! wrong leaves the pair to cross-entropy alone.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{sgd_step, Tape, Tensor, Var};
use crate::zoo::{CostedModel, ProjectionHead};

/// Added inside every log so that `d ∈ {0, 1}` stays finite.
pub const LOG_EPS: f32 = 1e-6;

/// Allowed deviation from unit norm for inputs to [`cosine_distance`].
pub const UNIT_TOLERANCE: f32 = 1e-4;

/// Cosine similarity of two unit vectors remapped to `[0, 1]`:
/// 1 for identical directions, 0 for opposite ones.
pub fn cosine_distance(e1: &Tensor, e2: &Tensor) -> Result<f32> {
    if e1.len() != e2.len() {
        return Err(Error::shape("cosine_distance", e1.shape(), e2.shape()));
    }
    for e in [e1, e2] {
        let n = e.l2_norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid("cosine_distance", format!("input norm {n} is not 1")));
        }
    }
    Ok(((1.0 + e1.dot(e2)?) / 2.0).clamp(0.0, 1.0))
}

/// Indicator weight of an (i, j) model pair on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairCoefficient {
    BothCorrect,
    OneCorrect,
    NoneCorrect,
}

impl PairCoefficient {
    pub fn value(self) -> i8 {
        match self {
            PairCoefficient::BothCorrect => 1,
            PairCoefficient::OneCorrect => -1,
            PairCoefficient::NoneCorrect => 0,
        }
    }
}

pub fn pair_coefficient(pred_i: usize, pred_j: usize, y: usize) -> PairCoefficient {
    match (pred_i == y, pred_j == y) {
        (true, true) => PairCoefficient::BothCorrect,
        (false, false) => PairCoefficient::NoneCorrect,
        _ => PairCoefficient::OneCorrect,
    }
}

/// How the log of the pair distance is signed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `-log(d+ε)` for both-correct pairs, `-log(1-d+ε)` for one-correct pairs,
    /// each offset by `log(1+ε)` so a perfectly placed pair costs exactly 0.
    #[default]
    PullPush,
    /// `coeff · log(d+ε)` with the indicator signs taken literally. Kept for
    /// comparison only; minimizing it pushes agreeing pairs apart.
    Literal,
}

/// Records the contrastive loss of one sample on the tape.
///
/// `embeddings` must be unit vectors. Each unordered pair is evaluated once
/// and counted twice, matching a double sum over ordered pairs `i ≠ j`.
pub fn contrastive_loss_tape(
    tape: &mut Tape<'_>,
    embeddings: &[Var],
    preds: &[usize],
    y: usize,
    convention: SignConvention,
) -> Result<Var> {
    if embeddings.len() != preds.len() {
        return Err(Error::invalid(
            "contrastive_loss",
            format!("{} embeddings for {} predictions", embeddings.len(), preds.len()),
        ));
    }
    let mut terms = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let coeff = pair_coefficient(preds[i], preds[j], y);
            if coeff == PairCoefficient::NoneCorrect {
                continue;
            }
            let dot = tape.dot(embeddings[i], embeddings[j])?;
            let d = tape.affine(dot, 0.5, 0.5)?;
            let term = match (convention, coeff) {
                (SignConvention::PullPush, PairCoefficient::BothCorrect) => {
                    let shifted = tape.affine(d, 1.0 / (1.0 + LOG_EPS), LOG_EPS / (1.0 + LOG_EPS))?;
                    let l = tape.log(shifted)?;
                    tape.scale(l, -2.0)?
                }
                (SignConvention::PullPush, _) => {
                    let shifted = tape.affine(d, -1.0 / (1.0 + LOG_EPS), 1.0)?;
                    let l = tape.log(shifted)?;
                    tape.scale(l, -2.0)?
                }
                (SignConvention::Literal, c) => {
                    let shifted = tape.affine(d, 1.0, LOG_EPS)?;
                    let l = tape.log(shifted)?;
                    tape.scale(l, 2.0 * f32::from(c.value()))?
                }
            };
            terms.push(term);
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)?));
    }
    tape.sum(&terms)
}

/// Contrastive loss of one sample. Returns 0 for fewer than two models.
pub fn contrastive_loss(embeddings: &[Tensor], preds: &[usize], y: usize, convention: SignConvention) -> Result<f32> {
    for e in embeddings {
        let n = e.l2_norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(
                "contrastive_loss",
                format!("embedding norm {n} is not 1"),
            ));
        }
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = embeddings.iter().map(|e| tape.constant_ref(e)).collect();
    let loss = contrastive_loss_tape(&mut tape, &vars, preds, y, convention)?;
    let value = tape.value(loss)?.item()?;
    Ok(match convention {
        // A unit dot product may round a hair above 1.
        SignConvention::PullPush => value.max(0.0),
        SignConvention::Literal => value,
    })
}

/// Outcome of one [`joint_train_step`].
#[derive(Debug, Clone)]
pub struct ContrastiveBatchResult {
    /// Batch mean of the contrastive term.
    pub loss: f32,
    /// Batch mean of `L_cnt + L_ce(model i)` for each model.
    pub model_losses: Vec<f32>,
    /// Per-sample `N×N` matrix of pair distances (diagonal 1), measured before the update.
    pub distances: Vec<Tensor>,
    /// Per-sample, per-model correctness before the update.
    pub correct: Vec<Vec<bool>>,
}

struct SampleGrads {
    /// Per model: backbone parameter gradients followed by the head gradient.
    grads: Vec<Vec<Tensor>>,
    contrastive: f32,
    ce: Vec<f32>,
    distances: Tensor,
    correct: Vec<bool>,
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence(format!("non-finite value in {op}")),
        other => other,
    }
}

fn sample_grads(zoo: &[CostedModel], x: &Tensor, y: usize, convention: SignConvention) -> Result<SampleGrads> {
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let mut params = Vec::with_capacity(zoo.len());
    let mut heads = Vec::with_capacity(zoo.len());
    let mut es = Vec::with_capacity(zoo.len());
    let mut ces = Vec::with_capacity(zoo.len());
    let mut preds = Vec::with_capacity(zoo.len());
    for m in zoo {
        let p = m.model.register(&mut tape, true);
        let h = tape.param(m.head.matrix());
        let out = m.model.forward_tape(&mut tape, &p, xv)?;
        preds.push(tape.value(out.logits)?.argmax());
        es.push(ProjectionHead::project_tape(&mut tape, h, out.embedding)?);
        ces.push(tape.cross_entropy(out.logits, y)?);
        params.push(p);
        heads.push(h);
    }
    let cnt = contrastive_loss_tape(&mut tape, &es, &preds, y, convention)?;
    let mut parts = vec![cnt];
    parts.extend(&ces);
    let total = tape.sum(&parts)?;
    let total_value = tape.value(total)?.item()?;
    if !total_value.is_finite() {
        return Err(Error::Divergence("non-finite joint loss".into()));
    }
    let g = tape.backward(total)?;

    let n = zoo.len();
    let mut distances = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (1.0 + tape.value(es[i])?.dot(tape.value(es[j])?)?) / 2.0;
                distances.data_mut()[i * n + j] = d.clamp(0.0, 1.0);
            }
        }
    }
    let grads = params
        .iter()
        .zip(&heads)
        .map(|(p, &h)| {
            let mut v = g.wrt_all(p)?;
            v.push(g.wrt(h)?);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleGrads {
        grads,
        contrastive: tape.value(cnt)?.item()?,
        ce: ces
            .iter()
            .map(|&c| tape.value(c).and_then(Tensor::item))
            .collect::<Result<_>>()?,
        distances,
        correct: preds.iter().map(|&p| p == y).collect(),
    })
}

/// One SGD step on every model and head over a batch.
///
/// Model `i` descends `L_cnt + L_ce(ŷ_i, y)` averaged over the batch. Since
/// `L_ce` of other models does not depend on model `i`, this equals the
/// gradient of `L_cnt + Σ_j L_ce(ŷ_j, y)`, computed in a single backward pass.
pub fn joint_train_step(
    zoo: &mut [CostedModel],
    batch: &Batch,
    alpha: f32,
    convention: SignConvention,
) -> Result<ContrastiveBatchResult> {
    if batch.is_empty() {
        return Err(Error::invalid("joint_train_step", "empty batch"));
    }
    if zoo.is_empty() {
        return Err(Error::invalid("joint_train_step", "no models"));
    }
    let classes = zoo[0].model.num_classes();
    if zoo.iter().any(|m| m.model.num_classes() != classes) {
        return Err(Error::invalid("joint_train_step", "models disagree on class count"));
    }

    let mut acc: Option<Vec<Vec<Tensor>>> = None;
    let mut cnt_sum = 0.0f64;
    let mut ce_sum = vec![0.0f64; zoo.len()];
    let mut distances = Vec::with_capacity(batch.len());
    let mut correct = Vec::with_capacity(batch.len());
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let s = sample_grads(zoo, x, y, convention).map_err(divergence)?;
        cnt_sum += f64::from(s.contrastive);
        for (a, c) in ce_sum.iter_mut().zip(&s.ce) {
            *a += f64::from(*c);
        }
        distances.push(s.distances);
        correct.push(s.correct);
        match &mut acc {
            None => acc = Some(s.grads),
            Some(total) => {
                for (tm, sm) in total.iter_mut().zip(&s.grads) {
                    for (t, g) in tm.iter_mut().zip(sm) {
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }

    let n = batch.len() as f32;
    let mut grads = acc.expect("non-empty batch");
    for t in grads.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    if grads.iter().flatten().any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    for (m, mut g) in zoo.iter_mut().zip(grads) {
        let head_grad = g.pop().expect("head gradient");
        sgd_step(m.model.params_mut(), &g, alpha).map_err(divergence)?;
        sgd_step(std::slice::from_mut(m.head.matrix_mut()), &[head_grad], alpha).map_err(divergence)?;
    }

    let loss = (cnt_sum / f64::from(n)) as f32;
    Ok(ContrastiveBatchResult {
        loss,
        model_losses: ce_sum.iter().map(|c| ((cnt_sum + c) / f64::from(n)) as f32).collect(),
        distances,
        correct,
    })
}

/// Mean pair distance for both-correct versus exactly-one-correct pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub mean_both_correct: f64,
    pub mean_one_correct: f64,
    /// `mean_both_correct - mean_one_correct`.
    pub gap: f64,
    pub both_correct_pairs: usize,
    pub one_correct_pairs: usize,
}

/// Distance statistics over unordered model pairs, one entry per sample.
///
/// `embeddings[s][i]` is model `i`'s projected embedding of sample `s`.
pub fn embedding_separation(embeddings: &[Vec<Tensor>], correct: &[Vec<bool>]) -> Result<Separation> {
    if embeddings.len() != correct.len() {
        return Err(Error::invalid("embedding_separation", "sample count mismatch"));
    }
    let (mut both, mut one) = (0.0f64, 0.0f64);
    let (mut nb, mut no) = (0usize, 0usize);
    for (es, cs) in embeddings.iter().zip(correct) {
        for i in 0..es.len() {
            for j in i + 1..es.len() {
                let d = f64::from(cosine_distance(&es[i], &es[j])?);
                match (cs[i], cs[j]) {
                    (true, true) => {
                        both += d;
                        nb += 1;
                    }
                    (true, false) | (false, true) => {
                        one += d;
                        no += 1;
                    }
                    _ => {}
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    let (mb, mo) = (mean(both, nb), mean(one, no));
    Ok(Separation {
        mean_both_correct: mb,
        mean_one_correct: mo,
        gap: mb - mo,
        both_correct_pairs: nb,
        one_correct_pairs: no,
    })
}
