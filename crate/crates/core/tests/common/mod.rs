//! Shared test support: an independent f64 reference implementation of every
//! forward computation, finite-difference gradient checking, and helpers for
//! running the pipeline into temporary directories.
#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use modelmux::config::RunConfig;
use modelmux::pipeline::{self, Evaluation, Layout};
use modelmux::tensor::{Rng, Tensor};
use modelmux::zoo::{Architecture, LayerSpec};

pub const LOG_EPS: f64 = 1e-6;

/// Step for central differences on the f64 reference.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so components that are zero up
/// to rounding do not dominate.
pub const REL_FLOOR: f64 = 1e-4;

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let fan_in = x.len();
    (0..b.len())
        .map(|u| b[u] + (0..fan_in).map(|i| w[u * fan_in + i] * x[i]).sum::<f64>())
        .collect()
}

/// Valid convolution of `x[C,H,W]` with `k[F,C,kh,kw]`.
pub fn conv(x: &[f64], xs: &[usize], k: &[f64], ks: &[usize], b: &[f64], stride: usize) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[fi];
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let xv = x[(ci * h + oy * stride + dy) * w + ox * stride + dx];
                            acc += xv * k[((fi * c + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(fi * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, vec![f, oh, ow])
}

pub fn crop(x: &[f64], xs: &[usize], top: usize, left: usize, hh: usize, ww: usize) -> Vec<f64> {
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let mut out = Vec::with_capacity(c * hh * ww);
    for ci in 0..c {
        for y in top..top + hh {
            for xx in left..left + ww {
                out.push(x[(ci * h + y) * w + xx]);
            }
        }
    }
    out
}

/// Runs a layer list; returns the output of every layer.
pub fn stack_forward(layers: &[LayerSpec], input_shape: &[usize], params: &[Vec<f64>], x: &[f64]) -> Vec<Vec<f64>> {
    let mut cur = x.to_vec();
    let mut shape = input_shape.to_vec();
    let mut p = 0;
    let mut outs = Vec::new();
    for l in layers {
        match *l {
            LayerSpec::Crop {
                top,
                left,
                height,
                width,
            } => {
                cur = crop(&cur, &shape, top, left, height, width);
                shape = vec![shape[0], height, width];
            }
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
            } => {
                let ks = [filters, shape[0], kernel, kernel];
                let (o, s) = conv(&cur, &shape, &params[p], &ks, &params[p + 1], stride);
                p += 2;
                cur = o;
                shape = s;
            }
            LayerSpec::Relu => cur = relu(&cur),
            LayerSpec::Dense { units } => {
                cur = dense(&params[p], &params[p + 1], &cur);
                p += 2;
                shape = vec![units];
            }
        }
        outs.push(cur.clone());
    }
    outs
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

pub fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise contrastive loss over unit embeddings, every unordered pair counted twice.
pub fn contrastive(es: &[Vec<f64>], preds: &[usize], y: usize, literal: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..es.len() {
        for j in 0..es.len() {
            if i == j {
                continue;
            }
            let d = (1.0 + dot(&es[i], &es[j])) / 2.0;
            let coeff = match (preds[i] == y, preds[j] == y) {
                (true, true) => 1.0,
                (false, false) => 0.0,
                _ => -1.0,
            };
            total += if literal {
                coeff * (d + LOG_EPS).ln()
            } else if coeff > 0.0 {
                -((d + LOG_EPS) / (1.0 + LOG_EPS)).ln()
            } else if coeff < 0.0 {
                -((1.0 - d + LOG_EPS) / (1.0 + LOG_EPS)).ln()
            } else {
                0.0
            };
        }
    }
    total
}

/// Mixture likelihood loss with cost-discounted softmax weights.
pub fn mux_nll(m: &[f64], v: &[f64], inv_costs: &[f64], probs: &[Vec<f64>], y: usize) -> f64 {
    let n = inv_costs.len();
    let width = m.len();
    let logits: Vec<f64> = (0..n)
        .map(|i| dot(&v[i * width..(i + 1) * width], m) * inv_costs[i])
        .collect();
    let w = softmax(&logits);
    let p: f64 = (0..n).map(|i| w[i] * probs[i][y]).sum();
    -((p + LOG_EPS) / (1.0 + LOG_EPS)).ln()
}

pub fn distill(bridge: &[f64], m: &[f64], es: &[Vec<f64>]) -> f64 {
    let width = m.len();
    let rows = bridge.len() / width;
    let mapped: Vec<f64> = (0..rows).map(|r| dot(&bridge[r * width..(r + 1) * width], m)).collect();
    let u = normalize(&mapped);
    es.iter().map(|e| 1.0 - (1.0 + dot(&u, e)) / 2.0).sum()
}

/// Central-difference gradient of `f` with respect to every entry of every block.
pub fn numeric_grad(blocks: &[Vec<f64>], f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work = blocks.to_vec();
    let mut out = Vec::with_capacity(blocks.len());
    for b in 0..blocks.len() {
        let mut g = vec![0.0; blocks[b].len()];
        for i in 0..blocks[b].len() {
            let orig = work[b][i];
            work[b][i] = orig + FD_STEP;
            let up = f(&work);
            work[b][i] = orig - FD_STEP;
            let down = f(&work);
            work[b][i] = orig;
            g[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Largest componentwise `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len());
        for (&av, &nv) in a.data().iter().zip(n) {
            let av = f64::from(av);
            let denom = av.abs().max(nv.abs()).max(REL_FLOOR);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], bound: f32, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, bound, rng)
}

pub fn random_unit(dim: usize, rng: &mut Rng) -> Tensor {
    let v: Vec<f32> = (0..dim).map(|_| rng.uniform_symmetric(1.0)).collect();
    modelmux::tensor::l2_normalize(&Tensor::vector(v).unwrap()).unwrap()
}

/// A two-layer classifier over a cropped window, used by many tests.
pub fn toy_arch(id: &str, input: &[usize], classes: usize, conv: bool) -> Architecture {
    let mut layers = Vec::new();
    if conv {
        layers.push(LayerSpec::Conv {
            filters: 3,
            kernel: 2,
            stride: 1,
        });
        layers.push(LayerSpec::Relu);
    } else {
        layers.push(LayerSpec::Dense { units: 5 });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { units: classes });
    Architecture {
        id: id.into(),
        input_shape: input.to_vec(),
        layers,
    }
}

/// Loads one of the shipped configuration files.
pub fn shipped_config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Full gen-data → train-zoo → train-mux → evaluate run.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Evaluation {
    let layout = Layout::new(out);
    pipeline::gen_data(cfg, &layout).expect("gen-data");
    pipeline::train_zoo(cfg, &layout).expect("train-zoo");
    pipeline::train_mux(cfg, &layout).expect("train-mux");
    pipeline::evaluate(cfg, &layout).expect("evaluate")
}

/// Every regular file under `dir`, as sorted relative paths.
pub fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<std::path::PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
