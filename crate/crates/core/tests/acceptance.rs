//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

mod common;

use std::cell::Cell;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;

use modelmux::contrastive::{cosine_distance, SignConvention};
use modelmux::costsim::{
    cloud_reference, cost_hybrid_cloud, cost_hybrid_local, offload_reference, replay_tables, Scenario,
};
use modelmux::multiplexer::{mux_weights, MuxArchitecture, MuxNet};
use modelmux::pipeline::{self, Evaluation};
use modelmux::router::{route_and_predict, Classifier, RouteMode, RoutePolicy};
use modelmux::tensor::{Rng, Tensor};
use modelmux::zoo::{CostedModel, LayerSpec};

use common::{files_under, gradcheck, random_tensor, random_unit, run_pipeline, shipped_config, toy_arch};

type Outcome = Result<String, String>;

type GradSuite = (&'static str, fn(u64) -> f64);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let t = replay_tables().map_err(|e| e.to_string())?;
    let f = offload_reference::FRACTION_LOCAL;
    let (local, cloud) = (
        cost_hybrid_local(&t.offload_profile),
        cost_hybrid_cloud(&t.offload_profile),
    );
    let lat = f * local.latency_ms + (1.0 - f) * cloud.latency_ms;
    let energy = f * local.energy_mj + (1.0 - f) * cloud.energy_mj;
    let identity = (t.hybrid.latency_ms - lat).abs() <= 1e-9 && (t.hybrid.energy_mj - energy).abs() <= 1e-9;
    let printed = (t.hybrid.latency_ms - offload_reference::HYBRID_LATENCY_MS).abs() <= 1e-9
        && (t.hybrid.energy_mj - offload_reference::HYBRID_ENERGY_MJ).abs() <= 1e-9;

    let oracle: f64 = cloud_reference::CALLED
        .iter()
        .zip(cloud_reference::FLOPS)
        .map(|(c, f)| c * f)
        .sum();
    let expected_ok =
        (t.cloud_hybrid_flops - oracle).abs() <= 1e-3 && (t.cloud_hybrid_flops / 1e9 * 1e3).round() == 5606.0;
    let summary = pipeline::Simulation {
        tables: t.clone(),
        custom: Default::default(),
    }
    .summary();
    let printed_note =
        summary.contains("5.75G") && summary.contains("within 3%") && t.cloud_hybrid_relative_gap <= 0.03;
    check(
        identity && printed && expected_ok && printed_note,
        format!(
            "hybrid {:.4} ms / {:.4} mJ as 0.68/0.32 average, expected FLOPs {:.3}G vs printed 5.75G ({:.2}% gap)",
            t.hybrid.latency_ms,
            t.hybrid.energy_mj,
            t.cloud_hybrid_flops / 1e9,
            t.cloud_hybrid_relative_gap * 100.0
        ),
    )
}

fn criterion_2() -> Outcome {
    let t = replay_tables().map_err(|e| e.to_string())?;
    let by_hand = 16.4e9 / 5.75e9;
    check(
        (t.saving_factor_printed - 2.85).abs() <= 0.01 && (t.saving_factor_printed - by_hand).abs() < 1e-12,
        format!("saving factor {:.4}x from 5.75G against 16.4G", t.saving_factor_printed),
    )
}

fn criterion_3() -> Outcome {
    const SEEDS: u64 = 25;
    let suites: [GradSuite; 5] = [
        ("cross-entropy", gradcheck::cross_entropy),
        ("pull-push", |s| gradcheck::contrastive(s, SignConvention::PullPush)),
        ("literal", |s| gradcheck::contrastive(s, SignConvention::Literal)),
        ("mux", gradcheck::mux_loss),
        ("distill", gradcheck::distill_loss),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, f) in suites {
        let worst = (0..SEEDS).map(|s| f(1000 + s)).fold(0.0, f64::max);
        ok &= worst <= 1e-3;
        parts.push(format!("{name} {worst:.1e}"));
    }
    check(ok, format!("{SEEDS} instances each, max rel err: {}", parts.join(", ")))
}

fn criterion_4() -> Outcome {
    let mut rng = Rng::new(4);
    let model_ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let costs = [2384.0, 8424.0, 32896.0];
    let arch = |scale: f64| MuxArchitecture {
        input_shape: vec![1, 16, 16],
        layers: MuxArchitecture::default_layers(),
        shared_dim: 32,
        model_ids: model_ids.clone(),
        costs: costs.iter().map(|c| c * scale).collect(),
    };
    let base = MuxNet::new(arch(1.0), &mut rng).map_err(|e| e.to_string())?;
    let ckpt = base.to_checkpoint(0, Default::default()).map_err(|e| e.to_string())?;
    let (stack, tail) = ckpt.tensors.split_at(ckpt.tensors.len() - 2);
    let scaled: Vec<MuxNet> = [0.01, 100.0]
        .iter()
        .map(|&k| MuxNet::from_parts(arch(k), stack.to_vec(), tail[0].clone(), tail[1].clone()).unwrap())
        .collect();

    let mut worst_sum: f64 = 0.0;
    let mut argmax_mismatch = 0;
    let mut raw_mismatch = 0;
    for _ in 0..1000 {
        let x = random_tensor(&[1, 16, 16], 3.0, &mut rng);
        let out = base.forward(&x).map_err(|e| e.to_string())?;
        let sum: f64 = out.weights.data().iter().map(|&w| f64::from(w)).sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        let top = out.weights.argmax();
        argmax_mismatch += scaled
            .iter()
            .filter(|m| m.forward(&x).unwrap().weights.argmax() != top)
            .count();
        let raw: Vec<f32> = base.normalized_costs();
        for k in [0.01f32, 1.0, 100.0] {
            let c: Vec<f32> = raw.iter().map(|c| c * k).collect();
            if mux_weights(&out.meta, base.v(), &c).unwrap().weights.argmax() != top {
                raw_mismatch += 1;
            }
        }
    }

    let mut worst_self: f32 = 0.0;
    let mut bounded = true;
    for _ in 0..1000 {
        let (a, b) = (random_unit(16, &mut rng), random_unit(16, &mut rng));
        worst_self = worst_self.max((cosine_distance(&a, &a).unwrap() - 1.0).abs());
        bounded &= (0.0..=1.0).contains(&cosine_distance(&a, &b).unwrap());
    }
    check(
        worst_sum <= 1e-6 && argmax_mismatch == 0 && raw_mismatch == 0 && bounded && worst_self <= 1e-6,
        format!(
            "1000 inputs: max |Σw-1| {worst_sum:.1e}, argmax flips under k∈{{0.01,1,100}}: {}, max |d(e,e)-1| {worst_self:.1e}",
            argmax_mismatch + raw_mismatch
        ),
    )
}

/// Counts how often the router executes a model.
struct Counted {
    inner: CostedModel,
    runs: Cell<usize>,
}

impl Classifier for Counted {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn flops(&self) -> u64 {
        self.inner.flops
    }

    fn probabilities(&self, x: &Tensor) -> modelmux::Result<Tensor> {
        self.runs.set(self.runs.get() + 1);
        self.inner.probabilities(x)
    }
}

/// Reference selection over stored outputs: threshold filter with an
/// argmax fallback, ties to the cheaper then lower-indexed model.
fn brute_select(w: &[f32], flops: &[u64], threshold: Option<f32>) -> Vec<usize> {
    let argmax = (0..w.len())
        .min_by(|&a, &b| w[b].total_cmp(&w[a]).then(flops[a].cmp(&flops[b])).then(a.cmp(&b)))
        .unwrap();
    match threshold {
        None => vec![argmax],
        Some(t) => {
            let above: Vec<usize> = (0..w.len()).filter(|&i| w[i] > t).collect();
            if above.is_empty() {
                vec![argmax]
            } else {
                above
            }
        }
    }
}

fn criterion_5() -> Outcome {
    let mut rng = Rng::new(5);
    let input = [1, 6, 6];
    let models: Vec<Counted> = [(false, "p"), (true, "q"), (false, "r")]
        .iter()
        .enumerate()
        .map(|(i, &(conv, id))| {
            let mut arch = toy_arch(id, &input, 4, conv);
            if i == 2 {
                arch.layers.insert(0, LayerSpec::Dense { units: 9 });
            }
            Counted {
                inner: CostedModel::new(arch, 4, &mut rng).unwrap(),
                runs: Cell::new(0),
            }
        })
        .collect();
    let flops: Vec<u64> = models.iter().map(|m| m.inner.flops).collect();
    let (mux, _) = gradcheck::small_mux(55);
    let ckpt = mux.to_checkpoint(0, Default::default()).unwrap();
    let (stack, tail) = ckpt.tensors.split_at(ckpt.tensors.len() - 2);
    let mut arch = mux.architecture().clone();
    arch.costs = flops.iter().map(|&f| f as f64).collect();
    arch.model_ids = models.iter().map(|m| m.id().to_string()).collect();
    let mux = MuxNet::from_parts(arch, stack.to_vec(), tail[0].clone(), tail[1].clone()).unwrap();

    let xs: Vec<Tensor> = (0..20).map(|_| random_tensor(&input, 1.0, &mut rng)).collect();
    let mut mismatches = 0;
    let mut extra_runs = 0;
    let mut routed = 0;
    for (threshold, mode) in [
        (None, RouteMode::Single),
        (Some(0.288), RouteMode::Ensemble { threshold: 0.288 }),
    ] {
        let policy = RoutePolicy::new(mode).unwrap();
        for x in &xs {
            let all: Vec<Tensor> = models.iter().map(|m| m.inner.probabilities(x).unwrap()).collect();
            let w = mux.forward(x).unwrap().weights;
            let expect = brute_select(w.data(), &flops, threshold);
            let k = expect.len() as f64;
            let mut avg = vec![0.0f64; 4];
            for &s in &expect {
                for (a, &p) in avg.iter_mut().zip(all[s].data()) {
                    *a += f64::from(p) / k;
                }
            }
            let avg: Vec<f32> = avg.into_iter().map(|v| v as f32).collect();
            let expect_flops = mux.flops() + expect.iter().map(|&s| flops[s]).sum::<u64>();

            models.iter().for_each(|m| m.runs.set(0));
            let d = route_and_predict(x, &models, Some(&mux), &policy).unwrap();
            for (i, m) in models.iter().enumerate() {
                let want = usize::from(expect.contains(&i));
                extra_runs += m.runs.get().abs_diff(want);
            }
            if d.selected != expect || d.probs.data() != avg.as_slice() || d.flops != expect_flops {
                mismatches += 1;
            }
            routed += 1;
        }
    }
    check(
        mismatches == 0 && extra_runs == 0,
        format!("{routed} routed inputs (single, ensemble T=0.288): {mismatches} mismatches, {extra_runs} unexpected model runs"),
    )
}

fn best_model_accuracy(e: &Evaluation) -> f64 {
    e.reports
        .iter()
        .filter(|r| r.scenario.starts_with("model:"))
        .map(|r| r.accuracy)
        .fold(0.0, f64::max)
}

fn criterion_6(e: &Evaluation) -> Outcome {
    let r = e
        .report(&Scenario::CloudHybridSingle)
        .ok_or("no cloud_hybrid_single report")?;
    let best = best_model_accuracy(e);
    let largest = e.model_flops.iter().copied().max().unwrap_or(0) as f64;
    let acc_ok = r.accuracy >= best + 0.05;
    let flops_ok = r.expected_flops <= 0.7 * largest && r.expected_flops_with_mux <= 0.7 * largest;
    let venn_ok = e.separation.gap >= 0.2;
    check(
        acc_ok && flops_ok && venn_ok,
        format!(
            "routed accuracy {:.4} vs best model {:.4}; expected FLOPs {:.3}x of largest ({:.3}x with mux); separation gap {:.4}",
            r.accuracy,
            best,
            r.expected_flops / largest,
            r.expected_flops_with_mux / largest,
            e.separation.gap
        ),
    )
}

fn criterion_7(e: &Evaluation) -> Outcome {
    let r = e.report(&Scenario::Hybrid).ok_or("no hybrid report")?;
    let (tnr, missed, mobile) = match (r.tnr, r.missed_local, r.mobile_accuracy) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err("hybrid report lacks offload statistics".into()),
    };
    let implied = (1.0 - tnr) * mobile;
    check(
        (missed - implied).abs() <= 1e-6,
        format!(
            "missed local {missed:.6} = (1-{tnr:.4})·{mobile:.4} = {implied:.6}; {:.1}% kept local",
            r.fraction_local * 100.0
        ),
    )
}

fn criterion_8(a: &Path, b: &Path) -> Outcome {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Err(format!("file sets differ: {} vs {} files", fa.len(), fb.len()));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    let checkpoints = fa.iter().filter(|p| p.extension().is_some_and(|e| e == "muxc")).count();
    check(
        differing.is_empty() && checkpoints > 0,
        if differing.is_empty() {
            format!("{} files identical across reruns, {checkpoints} checkpoints", fa.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("tempdir");
    let (desk_a, desk_b, offload) = (
        dir.path().join("desk-a"),
        dir.path().join("desk-b"),
        dir.path().join("offload"),
    );
    let desk = shipped_config("desk.toml");
    let off = shipped_config("offload.toml");

    let (run_a, run_b, run_off) = std::thread::scope(|s| {
        let a = s.spawn(|| run_pipeline(&desk, &desk_a));
        let b = s.spawn(|| run_pipeline(&desk, &desk_b));
        let o = s.spawn(|| run_pipeline(&off, &offload));
        (a.join(), b.join(), o.join())
    });
    let pipeline_outcome = |r: &std::thread::Result<Evaluation>, f: &dyn Fn(&Evaluation) -> Outcome| match r {
        Ok(e) => guarded(|| f(e)),
        Err(_) => Err("pipeline run panicked".to_string()),
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("cost-model replay", guarded(criterion_1)),
        ("resource-saving factor", guarded(criterion_2)),
        ("gradient suite", guarded(criterion_3)),
        ("probability and normalization", guarded(criterion_4)),
        ("router oracle equivalence", guarded(criterion_5)),
        ("desk-scale multiplexing", pipeline_outcome(&run_a, &criterion_6)),
        ("offload accounting identity", pipeline_outcome(&run_off, &criterion_7)),
        (
            "determinism",
            match (&run_a, &run_b) {
                (Ok(_), Ok(_)) => guarded(|| criterion_8(&desk_a, &desk_b)),
                _ => Err("pipeline run panicked".into()),
            },
        ),
    ];

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
