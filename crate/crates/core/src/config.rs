//! Run configuration, read from TOML. Keys form a flat dotted namespace
//! (`train.alpha`, `router.threshold`, ...); any missing key takes its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::SignConvention;
use crate::costsim::{Cost, CostProfile, NetworkProfile, OffloadProfile};
use crate::data::PlantedSpec;
use crate::error::{Error, Result};
use crate::multiplexer::MuxArchitecture;
use crate::router::{Averaging, Placement, RouteMode, RoutePolicy};
use crate::zoo::{Architecture, LayerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PlantedSpec,
    pub models: Vec<Architecture>,
    pub model: ModelConfig,
    pub mux: MuxConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mux_train: MuxTrainConfig,
    pub router: RouterConfig,
    pub costs: CostConfig,
    pub evaluate: EvaluateConfig,
    pub simulate: SimulateConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub shared_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuxConfig {
    /// Meta-feature width `M`.
    pub meta_dim: usize,
    /// Overrides the default four-convolution stack when non-empty.
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct LossConfig {
    /// Use the contrastive coefficients with their printed signs.
    pub literal_signs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuxTrainConfig {
    pub alpha: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_distill: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterModeName {
    Single,
    Ensemble,
    BinaryOffload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub mode: RouterModeName,
    /// Ensemble-mode weight threshold.
    pub threshold: f32,
    pub offload_threshold: f32,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deployment {
    /// Every model is hosted in the cloud; no transfer costs.
    Cloud,
    /// Model 0 runs on the device, the rest in the cloud.
    MobileCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub deployment: Deployment,
    /// Effective compute throughput, GFLOP/s.
    pub mobile_gflops: f64,
    pub cloud_gflops: f64,
    /// Device energy per FLOP executed on the device, nJ.
    pub mobile_nj_per_flop: f64,
    pub network: NetworkProfile,
    /// Bytes uploaded per request; defaults to the f32 input size.
    pub payload_bytes: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Also write a two-dimensional PCA projection of the embeddings.
    pub pca: bool,
}

/// A user-supplied cost scenario for `simulate`, evaluated next to the printed tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub offload: Option<OffloadProfile>,
    pub fraction_local: f64,
    /// Per-model costs and called fractions for the expected-cost formula.
    pub model_costs: Vec<Cost>,
    pub called: Vec<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            offload: None,
            fraction_local: 0.68,
            model_costs: Vec::new(),
            called: Vec::new(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: PlantedSpec::default(),
            models: default_models(),
            model: ModelConfig::default(),
            mux: MuxConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            mux_train: MuxTrainConfig::default(),
            router: RouterConfig::default(),
            costs: CostConfig::default(),
            evaluate: EvaluateConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { shared_dim: 32 }
    }
}

impl Default for MuxConfig {
    fn default() -> Self {
        Self {
            meta_dim: 16,
            layers: Vec::new(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            epochs: 200,
            batch_size: 32,
        }
    }
}

impl Default for MuxTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            epochs: 200,
            batch_size: 32,
            lambda_distill: 1.0,
        }
    }
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            mode: RouterModeName::Single,
            threshold: 0.288,
            offload_threshold: 0.5,
            averaging: Averaging::Uniform,
        }
    }
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            deployment: Deployment::Cloud,
            mobile_gflops: 1.0,
            cloud_gflops: 10.0,
            mobile_nj_per_flop: 1.0,
            network: NetworkProfile::default(),
            payload_bytes: None,
        }
    }
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { pca: true }
    }
}

fn window_crop(top: usize, left: usize) -> LayerSpec {
    LayerSpec::Crop {
        top,
        left,
        height: 8,
        width: 8,
    }
}

/// Three models of rising cost, each looking at one quadrant of the input.
pub fn default_models() -> Vec<Architecture> {
    let shape = vec![1, 16, 16];
    vec![
        Architecture {
            id: "tiny".into(),
            input_shape: shape.clone(),
            layers: vec![
                window_crop(0, 0),
                LayerSpec::Dense { units: 16 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 10 },
            ],
        },
        Architecture {
            id: "small".into(),
            input_shape: shape.clone(),
            layers: vec![
                window_crop(0, 8),
                LayerSpec::Conv {
                    filters: 6,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 10 },
            ],
        },
        Architecture {
            id: "medium".into(),
            input_shape: shape,
            layers: vec![
                window_crop(8, 0),
                LayerSpec::Conv {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 10 },
            ],
        },
    ]
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model ids must be unique".into()));
        }
        for m in &self.models {
            if m.input_shape != self.data.input_shape {
                return Err(Error::Config(format!(
                    "model '{}' expects input {:?} but data is {:?}",
                    m.id, m.input_shape, self.data.input_shape
                )));
            }
            let out = m.resolve()?.last().map(|l| l.output.clone());
            if out != Some(vec![self.data.num_classes]) {
                return Err(Error::Config(format!(
                    "model '{}' must end in a dense layer with {} units",
                    m.id, self.data.num_classes
                )));
            }
        }
        if self.model.shared_dim == 0 || self.mux.meta_dim == 0 {
            return Err(Error::Config(
                "model.shared_dim and mux.meta_dim must be positive".into(),
            ));
        }
        for (name, alpha, batch) in [
            ("train", self.train.alpha, self.train.batch_size),
            ("mux_train", self.mux_train.alpha, self.mux_train.batch_size),
        ] {
            if !(alpha >= 0.0) || !alpha.is_finite() {
                return Err(Error::Config(format!("{name}.alpha must be a nonnegative number")));
            }
            if batch == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be at least 1")));
            }
        }
        if !(self.mux_train.lambda_distill >= 0.0) {
            return Err(Error::Config("mux_train.lambda_distill must be nonnegative".into()));
        }
        self.policy()?;
        for (key, t) in [
            ("router.threshold", self.router.threshold),
            ("router.offload_threshold", self.router.offload_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{key} must lie in (0, 1), got {t}")));
            }
        }
        if self.router.mode == RouterModeName::BinaryOffload && self.models.len() != 2 {
            return Err(Error::Config(
                "router.mode = binary_offload needs exactly two models".into(),
            ));
        }
        for (k, v) in [
            ("costs.mobile_gflops", self.costs.mobile_gflops),
            ("costs.cloud_gflops", self.costs.cloud_gflops),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        Ok(())
    }

    pub fn sign_convention(&self) -> SignConvention {
        if self.loss.literal_signs {
            SignConvention::Literal
        } else {
            SignConvention::PullPush
        }
    }

    /// The configured routing policy.
    pub fn policy(&self) -> Result<RoutePolicy> {
        let mode = match self.router.mode {
            RouterModeName::Single => RouteMode::Single,
            RouterModeName::Ensemble => RouteMode::Ensemble {
                threshold: self.router.threshold,
            },
            RouterModeName::BinaryOffload => RouteMode::BinaryOffload {
                threshold: self.router.offload_threshold,
            },
        };
        Ok(RoutePolicy::new(mode)?.with_averaging(self.router.averaging))
    }

    pub fn mux_layers(&self) -> Vec<LayerSpec> {
        if !self.mux.layers.is_empty() {
            return self.mux.layers.clone();
        }
        let mut layers = MuxArchitecture::default_layers();
        if let Some(LayerSpec::Conv { filters, .. }) = layers.last_mut() {
            *filters = self.mux.meta_dim;
        }
        layers
    }

    pub fn mux_architecture(&self, model_flops: &[u64]) -> Result<MuxArchitecture> {
        let arch = MuxArchitecture {
            input_shape: self.data.input_shape.clone(),
            layers: self.mux_layers(),
            shared_dim: self.model.shared_dim,
            model_ids: self.models.iter().map(|m| m.id.clone()).collect(),
            costs: model_flops.iter().map(|&f| f as f64).collect(),
        };
        let probe = Architecture {
            id: "mux".into(),
            input_shape: arch.input_shape.clone(),
            layers: arch.layers.clone(),
        };
        let out: usize = probe
            .resolve()?
            .last()
            .map(|l| l.output.iter().product())
            .unwrap_or_else(|| arch.input_shape.iter().product());
        if out != self.mux.meta_dim {
            return Err(Error::Config(format!(
                "multiplexer layers produce {out} meta-features but mux.meta_dim = {}",
                self.mux.meta_dim
            )));
        }
        Ok(arch)
    }

    /// Builds the deployment cost profile from per-model and multiplexer FLOPs.
    pub fn cost_profile(&self, model_flops: &[u64], mux_flops: u64) -> Result<CostProfile> {
        let c = &self.costs;
        let placement: Vec<Placement> = (0..model_flops.len())
            .map(|i| match (c.deployment, i) {
                (Deployment::MobileCloud, 0) => Placement::Local,
                _ => Placement::Cloud,
            })
            .collect();
        let on = |flops: f64, place: Placement| match place {
            Placement::Local => Cost::new(
                flops,
                flops / (c.mobile_gflops * 1e6),
                flops * c.mobile_nj_per_flop * 1e-6,
            ),
            Placement::Cloud => Cost::new(flops, flops / (c.cloud_gflops * 1e6), 0.0),
        };
        let mux_place = match c.deployment {
            Deployment::MobileCloud => Placement::Local,
            Deployment::Cloud => Placement::Cloud,
        };
        let input_bytes = 4.0 * self.data.input_shape.iter().product::<usize>() as f64;
        let mut net = c.network;
        net.payload_bytes = c.payload_bytes.unwrap_or(input_bytes);
        if net.response_bytes == 0.0 {
            net.response_bytes = 4.0 * self.data.num_classes as f64;
        }
        let (upload, download) = match c.deployment {
            Deployment::MobileCloud => (net.upload()?, net.download()?),
            Deployment::Cloud => (Cost::ZERO, Cost::ZERO),
        };
        let profile = CostProfile {
            model_ids: self.models.iter().map(|m| m.id.clone()).collect(),
            models: model_flops
                .iter()
                .zip(&placement)
                .map(|(&f, &p)| on(f as f64, p))
                .collect(),
            placement,
            mux: on(mux_flops as f64, mux_place),
            upload,
            download,
        };
        profile.validate()?;
        Ok(profile)
    }
}
