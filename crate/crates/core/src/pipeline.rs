//! The end-to-end commands: data generation, zoo training, multiplexer
//! training, evaluation and cost simulation. Every output is a pure
//! function of the configuration and root seed.

use std::fmt::Write as _;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::config::{Deployment, RunConfig};
use crate::contrastive::{embedding_separation, joint_train_step, Separation};
use crate::costsim::{
    cost_cloud_hybrid, cost_cloud_only, cost_hybrid, cost_mobile_only, evaluate_oracle, evaluate_scenario,
    replay_tables, reports_to_csv, Cost, ExpertiseMatrix, Scenario, ScenarioReport, TableReplay,
};
use crate::data::{batches, generate_planted, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::multiplexer::{mux_train_step_targets, MuxNet, MuxTarget};
use crate::router::{RouteMode, RoutePolicy};
use crate::tensor::{Rng, Tensor};
use crate::zoo::{load_checkpoint, save_checkpoint, CostedModel, TrainingMetadata};

/// Output locations under the `--out` directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_data(&self) -> PathBuf {
        self.data_dir().join("train.muxd")
    }

    pub fn val_data(&self) -> PathBuf {
        self.data_dir().join("val.muxd")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn model_checkpoint(&self, id: &str) -> PathBuf {
        self.checkpoints().join(format!("{id}.muxc"))
    }

    pub fn mux_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("mux.muxc")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.csv")
    }

    pub fn embeddings_pca(&self) -> PathBuf {
        self.root.join("embeddings_pca.csv")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        kind: "report",
        detail: e.to_string(),
    })?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub train_samples: usize,
    pub val_samples: usize,
    pub train_crc32: u32,
    pub val_crc32: u32,
}

/// The CRC32 trailer of an encoded file.
fn stored_crc(bytes: &[u8]) -> u32 {
    let tail: [u8; 4] = bytes[bytes.len() - 4..].try_into().expect("encoded files end in a CRC");
    u32::from_le_bytes(tail)
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<GenDataSummary> {
    let planted = generate_planted(&cfg.data, cfg.seed)?;
    let (train, val) = (planted.train.dataset, planted.val.dataset);
    let (tb, vb) = (train.to_bytes()?, val.to_bytes()?);
    write(&layout.train_data(), &tb)?;
    write(&layout.val_data(), &vb)?;
    let summary = GenDataSummary {
        train_samples: train.len(),
        val_samples: val.len(),
        train_crc32: stored_crc(&tb),
        val_crc32: stored_crc(&vb),
    };
    info!(
        "wrote {} train and {} val samples",
        summary.train_samples, summary.val_samples
    );
    Ok(summary)
}

fn load_splits(layout: &Layout) -> Result<(Dataset, Dataset)> {
    Ok((load_dataset(&layout.train_data())?, load_dataset(&layout.val_data())?))
}

fn check_data(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.sample_shape() != cfg.data.input_shape.as_slice() || ds.num_classes() != cfg.data.num_classes {
        return Err(Error::Config(format!(
            "dataset has samples {:?} with {} classes, config expects {:?} with {}",
            ds.sample_shape(),
            ds.num_classes(),
            cfg.data.input_shape,
            cfg.data.num_classes
        )));
    }
    Ok(())
}

fn batch_size(n: usize) -> Result<NonZeroUsize> {
    NonZeroUsize::new(n).ok_or_else(|| Error::Config("batch_size must be at least 1".into()))
}

/// Fraction of `ds` each model classifies correctly.
pub fn accuracies(zoo: &[CostedModel], ds: &Dataset) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; zoo.len()];
    for i in 0..ds.len() {
        let x = ds.sample(i);
        for (h, m) in hits.iter_mut().zip(zoo) {
            if m.model.forward(&x)?.0.argmax() == ds.label(i) {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / ds.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooSummary {
    pub model_ids: Vec<String>,
    pub flops: Vec<u64>,
    pub val_accuracy: Vec<f64>,
    /// Mean loss of the last epoch, per model.
    pub final_loss: Vec<f32>,
}

pub fn train_zoo(cfg: &RunConfig, layout: &Layout) -> Result<ZooSummary> {
    let (train, val) = load_splits(layout)?;
    check_data(cfg, &train)?;
    check_data(cfg, &val)?;
    let mut zoo = cfg
        .models
        .iter()
        .map(|arch| {
            let mut rng = Rng::for_purpose(cfg.seed, &format!("zoo/init/{}", arch.id));
            CostedModel::new(arch.clone(), cfg.model.shared_dim, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = Rng::for_purpose(cfg.seed, "zoo/batches");
    let size = batch_size(cfg.train.batch_size)?;
    let convention = cfg.sign_convention();
    let mut history: Vec<Vec<f32>> = vec![Vec::new(); zoo.len()];
    let mut log = String::from("epoch,model,loss,val_accuracy\n");
    for epoch in 1..=cfg.train.epochs {
        let mut sums = vec![0.0f64; zoo.len()];
        for idx in batches(&train, size, &mut rng) {
            let batch = train.batch(&idx);
            let step = joint_train_step(&mut zoo, &batch, cfg.train.alpha, convention)?;
            for (s, l) in sums.iter_mut().zip(&step.model_losses) {
                *s += f64::from(*l) * batch.len() as f64;
            }
        }
        let acc = accuracies(&zoo, &val)?;
        for (i, m) in zoo.iter().enumerate() {
            let loss = (sums[i] / train.len() as f64) as f32;
            history[i].push(loss);
            writeln!(log, "{epoch},{},{loss:.6},{:.6}", m.id(), acc[i]).unwrap();
        }
        info!(
            "zoo epoch {epoch}: loss {:?} val acc {:?}",
            history.iter().map(|h| h[h.len() - 1]).collect::<Vec<_>>(),
            acc
        );
    }
    fs::create_dir_all(layout.checkpoints())?;
    for (m, losses) in zoo.iter().zip(&history) {
        let meta = TrainingMetadata {
            epochs: cfg.train.epochs,
            losses: losses.clone(),
        };
        save_checkpoint(&layout.model_checkpoint(m.id()), &m.to_checkpoint(cfg.seed, meta)?)?;
    }
    write(&layout.logs().join("train_zoo.csv"), log)?;
    Ok(ZooSummary {
        model_ids: zoo.iter().map(|m| m.id().to_string()).collect(),
        flops: zoo.iter().map(|m| m.flops).collect(),
        val_accuracy: accuracies(&zoo, &val)?,
        final_loss: history.iter().map(|h| h.last().copied().unwrap_or(f32::NAN)).collect(),
    })
}

/// Loads the configured models' checkpoints, checking they match the config.
pub fn load_zoo(cfg: &RunConfig, layout: &Layout) -> Result<Vec<CostedModel>> {
    cfg.models
        .iter()
        .map(|arch| {
            let m = CostedModel::from_checkpoint(&load_checkpoint(&layout.model_checkpoint(&arch.id))?)?;
            if m.model.architecture() != arch {
                return Err(Error::Config(format!(
                    "checkpoint for '{}' does not match the configured architecture",
                    arch.id
                )));
            }
            Ok(m)
        })
        .collect()
}

pub fn load_mux(cfg: &RunConfig, layout: &Layout, zoo: &[CostedModel]) -> Result<MuxNet> {
    let mux = MuxNet::from_checkpoint(&load_checkpoint(&layout.mux_checkpoint())?)?;
    let ids: Vec<&str> = zoo.iter().map(|m| m.id()).collect();
    let mine: Vec<&str> = mux.architecture().model_ids.iter().map(String::as_str).collect();
    if ids != mine {
        return Err(Error::Config(format!(
            "multiplexer was trained for models {mine:?}, config has {ids:?}"
        )));
    }
    if mux.architecture().shared_dim != cfg.model.shared_dim {
        return Err(Error::Config(
            "multiplexer shared_dim differs from model.shared_dim".into(),
        ));
    }
    Ok(mux)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuxSummary {
    pub flops: u64,
    pub losses: Vec<f32>,
}

pub fn train_mux(cfg: &RunConfig, layout: &Layout) -> Result<MuxSummary> {
    let train = load_dataset(&layout.train_data())?;
    check_data(cfg, &train)?;
    let zoo = load_zoo(cfg, layout)?;
    let flops: Vec<u64> = zoo.iter().map(|m| m.flops).collect();
    let arch = cfg.mux_architecture(&flops)?;
    let mut mux = MuxNet::new(arch, &mut Rng::for_purpose(cfg.seed, "mux/init"))?;

    let inputs: Vec<Tensor> = (0..train.len()).map(|i| train.sample(i)).collect();
    let targets = inputs
        .iter()
        .map(|x| MuxTarget::from_models(&zoo, x))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = Rng::for_purpose(cfg.seed, "mux/batches");
    let size = batch_size(cfg.mux_train.batch_size)?;
    let t = &cfg.mux_train;
    let mut losses = Vec::with_capacity(t.epochs);
    let mut log = String::from("epoch,loss,mux_loss,distill_loss\n");
    for epoch in 1..=t.epochs {
        let (mut total, mut nll, mut distill) = (0.0f64, 0.0f64, 0.0f64);
        for chunk in batches(&train, size, &mut rng) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &inputs[i]).collect();
            let ts: Vec<&MuxTarget> = chunk.iter().map(|&i| &targets[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
            let r = mux_train_step_targets(&mut mux, &xs, &ts, &ys, t.alpha, t.lambda_distill)?;
            let w = chunk.len() as f64;
            total += f64::from(r.loss) * w;
            nll += f64::from(r.mux_loss) * w;
            distill += f64::from(r.distill_loss) * w;
        }
        let n = train.len() as f64;
        let loss = (total / n) as f32;
        losses.push(loss);
        writeln!(log, "{epoch},{loss:.6},{:.6},{:.6}", nll / n, distill / n).unwrap();
        info!("mux epoch {epoch}: loss {loss:.4}");
    }
    let meta = TrainingMetadata {
        epochs: t.epochs,
        losses: losses.clone(),
    };
    fs::create_dir_all(layout.checkpoints())?;
    save_checkpoint(&layout.mux_checkpoint(), &mux.to_checkpoint(cfg.seed, meta)?)?;
    write(&layout.logs().join("train_mux.csv"), log)?;
    Ok(MuxSummary {
        flops: mux.flops(),
        losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reports: Vec<ScenarioReport>,
    pub expertise: ExpertiseMatrix,
    pub separation: Separation,
    pub model_flops: Vec<u64>,
    pub mux_flops: u64,
}

impl Evaluation {
    pub fn report(&self, scenario: &Scenario) -> Option<&ScenarioReport> {
        let name = scenario.name();
        self.reports.iter().find(|r| r.scenario == name)
    }
}

/// Scenarios evaluated for a deployment, with the policy each one uses.
fn scenarios(cfg: &RunConfig, zoo: &[CostedModel]) -> Result<Vec<(Scenario, RoutePolicy)>> {
    let mut out = Vec::new();
    for (i, m) in zoo.iter().enumerate() {
        out.push((
            Scenario::Model(m.id().to_string()),
            RoutePolicy::new(RouteMode::Fixed { model: i })?,
        ));
    }
    let averaging = cfg.router.averaging;
    match cfg.costs.deployment {
        Deployment::MobileCloud => {
            let last = zoo.len() - 1;
            out.push((Scenario::MobileOnly, RoutePolicy::new(RouteMode::Fixed { model: 0 })?));
            out.push((Scenario::CloudOnly, RoutePolicy::new(RouteMode::Fixed { model: last })?));
            if zoo.len() == 2 {
                let mode = RouteMode::BinaryOffload {
                    threshold: cfg.router.offload_threshold,
                };
                out.push((Scenario::Hybrid, RoutePolicy::new(mode)?));
            } else {
                out.push((Scenario::Hybrid, cfg.policy()?));
            }
        }
        Deployment::Cloud => {
            out.push((
                Scenario::CloudHybridSingle,
                RoutePolicy::new(RouteMode::Single)?.with_averaging(averaging),
            ));
            let mode = RouteMode::Ensemble {
                threshold: cfg.router.threshold,
            };
            out.push((
                Scenario::CloudHybridEnsemble,
                RoutePolicy::new(mode)?.with_averaging(averaging),
            ));
        }
    }
    Ok(out)
}

/// Top-two principal components of the rows of `data`, signs fixed so the
/// largest-magnitude loading of each component is positive.
pub fn pca_2d(rows: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d < 2 {
        return Err(Error::invalid("pca", "need at least one row of width two"));
    }
    let x = DMatrix::from_fn(n, d, |r, c| f64::from(rows[r][c]));
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v = -v;
        }
        comps.push(v);
    }
    let proj = &centered * DMatrix::from_columns(&comps);
    Ok((0..n).map(|r| [proj[(r, 0)], proj[(r, 1)]]).collect())
}

pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Evaluation> {
    let val = load_dataset(&layout.val_data())?;
    check_data(cfg, &val)?;
    let zoo = load_zoo(cfg, layout)?;
    let mux = load_mux(cfg, layout, &zoo)?;
    let model_flops: Vec<u64> = zoo.iter().map(|m| m.flops).collect();
    let profile = cfg.cost_profile(&model_flops, mux.flops())?;

    let n = val.len();
    let mut per_sample_e: Vec<Vec<Tensor>> = Vec::with_capacity(n);
    let mut per_sample_c: Vec<Vec<bool>> = Vec::with_capacity(n);
    let mut emb_csv = String::from("sample_id,model_id");
    for k in 0..cfg.model.shared_dim {
        write!(emb_csv, ",e{k}").unwrap();
    }
    emb_csv.push_str(",correct\n");
    let mut rows = Vec::new();
    for s in 0..n {
        let x = val.sample(s);
        let mut es = Vec::with_capacity(zoo.len());
        let mut cs = Vec::with_capacity(zoo.len());
        for m in &zoo {
            let inf = m.infer(&x)?;
            let ok = inf.probs.argmax() == val.label(s);
            write!(emb_csv, "{s},{}", m.id()).unwrap();
            for v in inf.projected.data() {
                write!(emb_csv, ",{v:.6}").unwrap();
            }
            writeln!(emb_csv, ",{}", u8::from(ok)).unwrap();
            rows.push(inf.projected.data().to_vec());
            es.push(inf.projected);
            cs.push(ok);
        }
        per_sample_e.push(es);
        per_sample_c.push(cs);
    }
    let separation = embedding_separation(&per_sample_e, &per_sample_c)?;
    let correct: Vec<Vec<bool>> = (0..zoo.len())
        .map(|i| per_sample_c.iter().map(|c| c[i]).collect())
        .collect();
    let ids: Vec<String> = zoo.iter().map(|m| m.id().to_string()).collect();
    let expertise = ExpertiseMatrix::from_bitmaps(ids, &correct)?;

    let mut reports = Vec::new();
    for (scenario, policy) in scenarios(cfg, &zoo)? {
        let mux_ref = policy.uses_mux().then_some(&mux);
        reports.push(evaluate_scenario(
            &scenario, &val, &zoo, mux_ref, &policy, &profile, &correct,
        )?);
    }
    reports.push(evaluate_oracle(&profile, &correct)?);

    let dir = layout.reports();
    write(&dir.join("scenarios.json"), to_json(&reports)?)?;
    write(&dir.join("scenarios.csv"), reports_to_csv(&reports))?;
    write(&dir.join("expertise.csv"), expertise.to_csv())?;
    write(&dir.join("separation.json"), to_json(&separation)?)?;
    write(&layout.embeddings(), emb_csv)?;
    if cfg.evaluate.pca {
        let pts = pca_2d(&rows)?;
        let mut csv = String::from("sample_id,model_id,pc1,pc2,correct\n");
        for (r, p) in pts.iter().enumerate() {
            let (s, i) = (r / zoo.len(), r % zoo.len());
            writeln!(
                csv,
                "{s},{},{:.6},{:.6},{}",
                zoo[i].id(),
                p[0],
                p[1],
                u8::from(correct[i][s])
            )
            .unwrap();
        }
        write(&layout.embeddings_pca(), csv)?;
    }
    Ok(Evaluation {
        reports,
        expertise,
        separation,
        model_flops,
        mux_flops: mux.flops(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CustomSimulation {
    pub mobile_only: Option<Cost>,
    pub cloud_only: Option<Cost>,
    pub hybrid: Option<Cost>,
    pub cloud_hybrid: Option<Cost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub tables: TableReplay,
    pub custom: CustomSimulation,
}

impl Simulation {
    /// Human-readable summary printed by the CLI.
    pub fn summary(&self) -> String {
        let t = &self.tables;
        let mut s = String::new();
        writeln!(
            s,
            "mobile-only       {:>9.4} ms {:>9.4} mJ",
            t.mobile_only.latency_ms, t.mobile_only.energy_mj
        )
        .unwrap();
        writeln!(
            s,
            "cloud-only        {:>9.4} ms {:>9.4} mJ",
            t.cloud_only.latency_ms, t.cloud_only.energy_mj
        )
        .unwrap();
        writeln!(
            s,
            "hybrid (68% local){:>9.4} ms {:>9.4} mJ  printed {} ms {} mJ",
            t.hybrid.latency_ms, t.hybrid.energy_mj, t.printed_hybrid_latency_ms, t.printed_hybrid_energy_mj
        )
        .unwrap();
        writeln!(s, "missed local      {:.4}", t.missed_local).unwrap();
        writeln!(
            s,
            "expected FLOPs    {:.3}G computed, {:.2}G printed",
            t.cloud_hybrid_flops / 1e9,
            t.printed_cloud_hybrid_flops / 1e9
        )
        .unwrap();
        writeln!(
            s,
            "saving factor     {:.3}x from printed FLOPs, {:.3}x from computed",
            t.saving_factor_printed, t.saving_factor_computed
        )
        .unwrap();
        for note in &t.notes {
            writeln!(s, "note: {note}").unwrap();
        }
        s
    }
}

pub fn simulate(cfg: &RunConfig, layout: &Layout) -> Result<Simulation> {
    let tables = replay_tables()?;
    let sim = &cfg.simulate;
    let mut custom = CustomSimulation {
        mobile_only: None,
        cloud_only: None,
        hybrid: None,
        cloud_hybrid: None,
    };
    if let Some(p) = &sim.offload {
        for (what, c) in [
            ("mobile_compute", p.mobile_compute),
            ("cloud_compute", p.cloud_compute),
            ("mux", p.mux),
            ("upload", p.upload),
            ("download", p.download),
        ] {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !(ok(c.flops) && ok(c.latency_ms) && ok(c.energy_mj)) {
                return Err(Error::Config(format!(
                    "simulate.offload.{what} must be finite and non-negative"
                )));
            }
        }
        custom.mobile_only = Some(cost_mobile_only(p));
        custom.cloud_only = Some(cost_cloud_only(p));
        custom.hybrid = Some(cost_hybrid(p, sim.fraction_local).map_err(|e| Error::Config(e.to_string()))?);
    }
    if !sim.model_costs.is_empty() || !sim.called.is_empty() {
        custom.cloud_hybrid =
            Some(cost_cloud_hybrid(&sim.model_costs, &sim.called).map_err(|e| Error::Config(e.to_string()))?);
    }
    let out = Simulation { tables, custom };
    let t = &out.tables;
    let mut csv = String::from("scenario,flops,latency_ms,energy_mj\n");
    for (name, c) in [
        ("mobile_only", t.mobile_only),
        ("cloud_only", t.cloud_only),
        ("hybrid_local", t.hybrid_local),
        ("hybrid_cloud", t.hybrid_cloud),
        ("hybrid", t.hybrid),
        ("cloud_hybrid", Cost::new(t.cloud_hybrid_flops, 0.0, 0.0)),
    ] {
        writeln!(csv, "{name},{:.1},{:.6},{:.6}", c.flops, c.latency_ms, c.energy_mj).unwrap();
    }
    let c = &out.custom;
    for (name, cost) in [
        ("custom_mobile_only", c.mobile_only),
        ("custom_cloud_only", c.cloud_only),
        ("custom_hybrid", c.hybrid),
        ("custom_cloud_hybrid", c.cloud_hybrid),
    ] {
        if let Some(c) = cost {
            writeln!(csv, "{name},{:.1},{:.6},{:.6}", c.flops, c.latency_ms, c.energy_mj).unwrap();
        }
    }
    write(&layout.reports().join("simulate.json"), to_json(&out)?)?;
    write(&layout.reports().join("simulate.csv"), csv)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_finds_dominant_axis() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 0.1 * (i % 2) as f32, 0.0]).collect();
        let p = pca_2d(&rows).unwrap();
        assert!((p[9][0] - p[0][0] - 9.0).abs() < 1e-3);
        assert!(p[0][0] < 0.0);
    }
}
