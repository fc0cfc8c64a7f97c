//! Runtime multiplexing: pick models from the multiplexer's weights, run
//! only those, and combine their predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiplexer::MuxNet;
use crate::tensor::{softmax, Tensor};
use crate::zoo::CostedModel;

/// How the selected set is chosen from the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RouteMode {
    /// The single highest-weight model.
    Single,
    /// Every model whose weight exceeds `threshold`, else the argmax.
    Ensemble { threshold: f32 },
    /// Two-model mobile/cloud split: model 1 (cloud) iff its weight exceeds `threshold`, else model 0.
    BinaryOffload { threshold: f32 },
    /// Always the given model; the multiplexer is not consulted.
    Fixed { model: usize },
}

/// How the selected models' probability vectors are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Uniform,
    /// Weights renormalized over the selected set.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutePolicy {
    pub mode: RouteMode,
    #[serde(default)]
    pub averaging: Averaging,
}

impl RoutePolicy {
    pub fn new(mode: RouteMode) -> Result<Self> {
        let policy = Self {
            mode,
            averaging: Averaging::Uniform,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn with_averaging(self, averaging: Averaging) -> Self {
        Self { averaging, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            RouteMode::Ensemble { threshold } | RouteMode::BinaryOffload { threshold }
                if !(threshold > 0.0 && threshold < 1.0) =>
            {
                Err(Error::Config(format!(
                    "router threshold must lie in (0, 1), got {threshold}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn uses_mux(&self) -> bool {
        !matches!(self.mode, RouteMode::Fixed { .. })
    }
}

/// Index of the largest weight; exact ties go to the cheaper model, then the lower index.
pub fn select_single(w: &[f32], costs: &[f64]) -> Result<usize> {
    if w.is_empty() {
        return Err(Error::invalid("select_single", "empty weight vector"));
    }
    if costs.len() != w.len() {
        return Err(Error::shape("select_single", &[w.len()], &[costs.len()]));
    }
    let mut best = 0;
    for i in 1..w.len() {
        if w[i] > w[best] || (w[i] == w[best] && costs[i] < costs[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// Indices with `w_i > threshold`, or the [`select_single`] choice when none qualify.
pub fn select_ensemble(w: &[f32], threshold: f32, costs: &[f64]) -> Result<Vec<usize>> {
    let above: Vec<usize> = (0..w.len()).filter(|&i| w[i] > threshold).collect();
    if above.is_empty() {
        Ok(vec![select_single(w, costs)?])
    } else {
        Ok(above)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Local,
    Cloud,
}

/// Cloud iff `w_cloud > threshold`.
pub fn offload_decision(w_cloud: f32, threshold: f32) -> Placement {
    if w_cloud > threshold {
        Placement::Cloud
    } else {
        Placement::Local
    }
}

/// Model indices selected by `policy` for weights `w`.
pub fn select(w: &[f32], policy: &RoutePolicy, costs: &[f64]) -> Result<Vec<usize>> {
    match policy.mode {
        RouteMode::Single => Ok(vec![select_single(w, costs)?]),
        RouteMode::Ensemble { threshold } => select_ensemble(w, threshold, costs),
        RouteMode::BinaryOffload { threshold } => {
            if w.len() != 2 {
                return Err(Error::Config(format!(
                    "binary offload needs exactly 2 models, got {}",
                    w.len()
                )));
            }
            Ok(vec![match offload_decision(w[1], threshold) {
                Placement::Local => 0,
                Placement::Cloud => 1,
            }])
        }
        RouteMode::Fixed { model } if model < costs.len() => Ok(vec![model]),
        RouteMode::Fixed { model } => Err(Error::Config(format!(
            "fixed route to model {model} but only {} models loaded",
            costs.len()
        ))),
    }
}

/// Combines the selected models' probability vectors.
pub fn combine(selected: &[usize], probs: &[&Tensor], w: Option<&[f32]>, averaging: Averaging) -> Result<Tensor> {
    if selected.is_empty() || selected.len() != probs.len() {
        return Err(Error::invalid("combine", "selection and outputs disagree"));
    }
    let classes = probs[0].len();
    if probs.iter().any(|p| p.len() != classes) {
        return Err(Error::invalid("combine", "selected models disagree on class count"));
    }
    let coeffs: Vec<f64> = match (averaging, w) {
        (Averaging::Weighted, Some(w)) => {
            let total: f64 = selected.iter().map(|&s| f64::from(w[s])).sum();
            if total > 0.0 {
                selected.iter().map(|&s| f64::from(w[s]) / total).collect()
            } else {
                vec![1.0 / selected.len() as f64; selected.len()]
            }
        }
        _ => vec![1.0 / selected.len() as f64; selected.len()],
    };
    let mut out = vec![0.0f64; classes];
    for (c, p) in coeffs.iter().zip(probs) {
        for (o, &v) in out.iter_mut().zip(p.data()) {
            *o += c * f64::from(v);
        }
    }
    Tensor::vector(out.into_iter().map(|v| v as f32).collect())
}

/// Something the router can execute.
pub trait Classifier {
    fn id(&self) -> &str;
    fn flops(&self) -> u64;
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for CostedModel {
    fn id(&self) -> &str {
        CostedModel::id(self)
    }

    fn flops(&self) -> u64 {
        self.flops
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        softmax(&self.model.forward(x)?.0)
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn flops(&self) -> u64 {
        (**self).flops()
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        (**self).probabilities(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub selected: Vec<usize>,
    pub probs: Tensor,
    /// `None` when the policy bypasses the multiplexer.
    pub weights: Option<Tensor>,
    /// Multiplexer FLOPs (if consulted) plus those of every selected model.
    pub flops: u64,
}

/// Runs the multiplexer, then only the models it selects.
pub fn route_and_predict<C: Classifier>(
    x: &Tensor,
    models: &[C],
    mux: Option<&MuxNet>,
    policy: &RoutePolicy,
) -> Result<RouteDecision> {
    let costs: Vec<f64> = models.iter().map(|m| m.flops() as f64).collect();
    let (weights, mux_flops) = if policy.uses_mux() {
        let mux = mux.ok_or_else(|| Error::Config("routing policy needs a multiplexer".into()))?;
        if mux.num_models() != models.len() {
            return Err(Error::Config(format!(
                "multiplexer routes {} models but {} are loaded",
                mux.num_models(),
                models.len()
            )));
        }
        (Some(mux.forward(x)?.weights), mux.flops())
    } else {
        (None, 0)
    };
    let selected = match &weights {
        Some(w) => select(w.data(), policy, &costs)?,
        None => select(&[], policy, &costs)?,
    };
    let outputs = selected
        .iter()
        .map(|&s| models[s].probabilities(x))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = outputs.iter().collect();
    let probs = combine(&selected, &refs, weights.as_ref().map(|w| w.data()), policy.averaging)?;
    let flops = mux_flops + selected.iter().map(|&s| models[s].flops()).sum::<u64>();
    Ok(RouteDecision {
        selected,
        probs,
        weights,
        flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_examples() {
        assert_eq!(select_single(&[0.2, 0.7, 0.1], &[1.0; 3]).unwrap(), 1);
        assert_eq!(select_single(&[0.5, 0.5], &[1.0, 2.0]).unwrap(), 0);
        assert_eq!(select_single(&[0.5, 0.5], &[2.0, 1.0]).unwrap(), 1);
        assert_eq!(select_single(&[0.5, 0.5], &[1.0, 1.0]).unwrap(), 0);
        assert_eq!(select_single(&[0.0, 0.0, 1.0], &[1.0; 3]).unwrap(), 2);
        assert!(select_single(&[], &[]).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let c = [1.0; 3];
        assert_eq!(select_ensemble(&[0.4, 0.35, 0.25], 0.288, &c).unwrap(), vec![0, 1]);
        assert_eq!(select_ensemble(&[0.9, 0.05, 0.05], 0.288, &c).unwrap(), vec![0]);
        assert_eq!(select_ensemble(&[0.3, 0.4, 0.3], 0.4, &c).unwrap(), vec![1]);
        assert_eq!(select_ensemble(&[0.5, 0.5], 0.5, &[3.0, 1.0]).unwrap(), vec![1]);
    }

    #[test]
    fn offload_examples() {
        assert_eq!(offload_decision(0.49, 0.5), Placement::Local);
        assert_eq!(offload_decision(0.51, 0.5), Placement::Cloud);
        assert_eq!(offload_decision(0.5, 0.5), Placement::Local);
    }

    #[test]
    fn uniform_and_weighted_combination() {
        let a = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let u = combine(&[0, 1], &[&a, &b], Some(&[0.75, 0.25]), Averaging::Uniform).unwrap();
        assert_eq!(u.data(), &[0.5, 0.5]);
        let w = combine(&[0, 1], &[&a, &b], Some(&[0.6, 0.2]), Averaging::Weighted).unwrap();
        assert!((w.data()[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn policy_validation() {
        assert!(RoutePolicy::new(RouteMode::Ensemble { threshold: 0.0 }).is_err());
        assert!(RoutePolicy::new(RouteMode::BinaryOffload { threshold: 1.0 }).is_err());
        assert!(RoutePolicy::new(RouteMode::Ensemble { threshold: 0.288 }).is_ok());
        assert!(select(
            &[0.2, 0.3, 0.5],
            &RoutePolicy::new(RouteMode::BinaryOffload { threshold: 0.5 }).unwrap(),
            &[1.0; 3]
        )
        .is_err());
    }
}
