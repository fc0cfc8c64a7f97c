//! Seeded gradient checks. Each returns the worst relative error between
//! tape gradients and central differences of the f64 reference.

use modelmux::contrastive::{contrastive_loss_tape, SignConvention};
use modelmux::multiplexer::{MuxArchitecture, MuxNet, MuxTarget};
use modelmux::tensor::{softmax, Rng, Tape, Tensor, Var};
use modelmux::zoo::{ClassifierModel, LayerSpec, ProjectionHead};

use super::*;

/// Cross-entropy of a small classifier with respect to all of its parameters.
pub fn cross_entropy(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let conv = seed.is_multiple_of(2);
    let input = [2, 4, 4];
    let classes = 4;
    let arch = toy_arch("g", &input, classes, conv);
    let model = ClassifierModel::new(arch.clone(), &mut rng).unwrap();
    let x = random_tensor(&input, 1.0, &mut rng);
    let y = rng.below(classes);

    let mut tape = Tape::new();
    let params = model.register(&mut tape, true);
    let xv = tape.constant_ref(&x);
    let out = model.forward_tape(&mut tape, &params, xv).unwrap();
    let loss = tape.cross_entropy(out.logits, y).unwrap();
    let analytic = tape.backward(loss).unwrap().wrt_all(&params).unwrap();

    let blocks: Vec<Vec<f64>> = model.params().iter().map(to_f64).collect();
    let xs = to_f64(&x);
    let numeric = numeric_grad(&blocks, |p| {
        let outs = stack_forward(&arch.layers, &input, p, &xs);
        super::cross_entropy(outs.last().unwrap(), y)
    });
    informative(&numeric);
    max_rel_error(&analytic, &numeric)
}

/// Contrastive loss with respect to every projection head matrix.
pub fn contrastive(seed: u64, convention: SignConvention) -> f64 {
    let mut rng = Rng::new(seed);
    let n = 3;
    let (emb, shared, classes) = (5, 4, 3);
    let heads: Vec<ProjectionHead> = (0..n).map(|_| ProjectionHead::new(emb, shared, &mut rng)).collect();
    let gs: Vec<Tensor> = (0..n).map(|_| random_tensor(&[emb], 1.0, &mut rng)).collect();
    let y = rng.below(classes);
    // At least one correct model so some pair carries a nonzero coefficient.
    let mut preds: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    preds[rng.below(n)] = y;

    let mut tape = Tape::new();
    let hv: Vec<Var> = heads.iter().map(|h| tape.param(h.matrix())).collect();
    let es: Vec<Var> = hv
        .iter()
        .zip(&gs)
        .map(|(&h, g)| {
            let gv = tape.constant_ref(g);
            ProjectionHead::project_tape(&mut tape, h, gv).unwrap()
        })
        .collect();
    let loss = contrastive_loss_tape(&mut tape, &es, &preds, y, convention).unwrap();
    let analytic = tape.backward(loss).unwrap().wrt_all(&hv).unwrap();

    let blocks: Vec<Vec<f64>> = heads.iter().map(|h| to_f64(h.matrix())).collect();
    let gs64: Vec<Vec<f64>> = gs.iter().map(to_f64).collect();
    let literal = convention == SignConvention::Literal;
    let numeric = numeric_grad(&blocks, |hs| {
        let es: Vec<Vec<f64>> = hs
            .iter()
            .zip(&gs64)
            .map(|(h, g)| {
                // head is [emb × shared]; e = normalize(hᵀ g)
                let mapped: Vec<f64> = (0..shared)
                    .map(|c| (0..emb).map(|r| h[r * shared + c] * g[r]).sum())
                    .collect();
                normalize(&mapped)
            })
            .collect();
        super::contrastive(&es, &preds, y, literal)
    });
    informative(&numeric);
    max_rel_error(&analytic, &numeric)
}

pub fn small_mux(seed: u64) -> (MuxNet, Vec<f32>) {
    let mut rng = Rng::new(seed);
    let costs: Vec<f64> = (0..3).map(|_| 1.0 + 9.0 * rng.uniform()).collect();
    let arch = MuxArchitecture {
        input_shape: vec![1, 6, 6],
        layers: vec![
            LayerSpec::Conv {
                filters: 2,
                kernel: 3,
                stride: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                filters: 3,
                kernel: 2,
                stride: 2,
            },
        ],
        shared_dim: 4,
        model_ids: vec!["a".into(), "b".into(), "c".into()],
        costs: costs.clone(),
    };
    let max = costs.iter().copied().fold(0.0, f64::max);
    let inv = costs.iter().map(|&c| (max / c) as f32).collect();
    (MuxNet::new(arch, &mut rng).unwrap(), inv)
}

struct MuxCase {
    mux: MuxNet,
    inv: Vec<f64>,
    x: Tensor,
    target: MuxTarget,
    y: usize,
}

fn mux_case(seed: u64) -> MuxCase {
    let (mux, inv) = small_mux(seed);
    let mut rng = Rng::new(seed ^ 0x5eed);
    let classes = 4;
    let x = random_tensor(&[1, 6, 6], 1.0, &mut rng);
    let rows: Vec<Vec<f32>> = (0..3)
        .map(|_| softmax(&random_tensor(&[classes], 2.0, &mut rng)).unwrap().into_data())
        .collect();
    let target = MuxTarget {
        probs: Tensor::from_rows(&rows).unwrap(),
        embeddings: (0..3).map(|_| random_unit(4, &mut rng)).collect(),
    };
    MuxCase {
        mux,
        inv: inv.iter().map(|&v| f64::from(v)).collect(),
        x,
        target,
        y: rng.below(classes),
    }
}

/// Stored tensors in checkpoint order (stack, `v`, bridge) and the stack length.
fn mux_blocks(mux: &MuxNet) -> (Vec<Tensor>, usize) {
    let ckpt = mux.to_checkpoint(0, Default::default()).unwrap();
    let n_stack = ckpt.tensors.len() - 2;
    (ckpt.tensors, n_stack)
}

/// Mixture likelihood loss with respect to the meta-feature network and `v`.
pub fn mux_loss(seed: u64) -> f64 {
    let c = mux_case(seed);
    let mut tape = Tape::new();
    let vars = c.mux.register(&mut tape, true);
    let xv = tape.constant_ref(&c.x);
    let (_, nll, _) = c.mux.loss_tape(&mut tape, &vars, xv, &c.target, c.y, 0.0).unwrap();
    let g = tape.backward(nll).unwrap();
    let mut analytic = g.wrt_all(&vars.stack).unwrap();
    analytic.push(g.wrt(vars.v).unwrap());

    let (tensors, n_stack) = mux_blocks(&c.mux);
    let blocks: Vec<Vec<f64>> = tensors[..=n_stack].iter().map(to_f64).collect();
    let xs = to_f64(&c.x);
    let probs: Vec<Vec<f64>> = (0..3)
        .map(|i| {
            c.target.probs.data()[i * 4..(i + 1) * 4]
                .iter()
                .map(|&p| f64::from(p))
                .collect()
        })
        .collect();
    let layers = c.mux.architecture().layers.clone();
    let numeric = numeric_grad(&blocks, |p| {
        let m = stack_forward(&layers, &[1, 6, 6], &p[..n_stack], &xs).pop().unwrap();
        mux_nll(&m, &p[n_stack], &c.inv, &probs, c.y)
    });
    informative(&numeric);
    max_rel_error(&analytic, &numeric)
}

/// Distillation loss with respect to the meta-feature network and the bridge.
pub fn distill_loss(seed: u64) -> f64 {
    let c = mux_case(seed);
    let mut tape = Tape::new();
    let vars = c.mux.register(&mut tape, true);
    let xv = tape.constant_ref(&c.x);
    let (_, _, term) = c.mux.loss_tape(&mut tape, &vars, xv, &c.target, c.y, 1.0).unwrap();
    let g = tape.backward(term.expect("distill term")).unwrap();
    let mut analytic = g.wrt_all(&vars.stack).unwrap();
    analytic.push(g.wrt(vars.bridge).unwrap());

    let (tensors, n_stack) = mux_blocks(&c.mux);
    let mut blocks: Vec<Vec<f64>> = tensors[..n_stack].iter().map(to_f64).collect();
    blocks.push(to_f64(&tensors[n_stack + 1]));
    let xs = to_f64(&c.x);
    let es: Vec<Vec<f64>> = c.target.embeddings.iter().map(to_f64).collect();
    let layers = c.mux.architecture().layers.clone();
    let numeric = numeric_grad(&blocks, |p| {
        let m = stack_forward(&layers, &[1, 6, 6], &p[..n_stack], &xs).pop().unwrap();
        distill(&p[n_stack], &m, &es)
    });
    informative(&numeric);
    max_rel_error(&analytic, &numeric)
}

fn informative(numeric: &[Vec<f64>]) {
    let peak = numeric.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(peak > 1e-3, "gradient vanishes everywhere (max |g| = {peak:e})");
}
