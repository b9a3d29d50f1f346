#![allow(dead_code)]

use rand::Rng;
use vflab::nn::{self, Activation, Layer, Mlp};
use vflab::rng;
use vflab::vfl::{self, Aggregation, VflArch, VflModel};
use vflab::Matrix;

pub const FD_EPS: f64 = 1e-5;

/// `|a - n|` over the larger magnitude, floored so that vanishing gradients compare
/// absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn summed_ce(net: &Mlp, x: &Matrix, labels: &[usize]) -> f64 {
    let logits = net.predict_batch(x).unwrap();
    logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| nn::softmax_cross_entropy(row, y).unwrap().0)
        .sum()
}

fn with_param(net: &Mlp, layer: usize, idx: usize, delta: f64) -> Mlp {
    let mut layers: Vec<Layer> = net.layers().to_vec();
    let w = layers[layer].weights.as_slice().len();
    if idx < w {
        layers[layer].weights.as_mut_slice()[idx] += delta;
    } else {
        layers[layer].bias[idx - w] += delta;
    }
    Mlp::new(layers, net.seed()).unwrap()
}

/// Worst relative error of backprop against central differences over every parameter
/// and every input coordinate of the summed cross-entropy.
pub fn mlp_gradient_error(net: &Mlp, x: &Matrix, labels: &[usize]) -> f64 {
    let (logits, trace) = net.forward(x).unwrap();
    let mut g = Matrix::zeros(x.rows(), net.output_dim());
    for (r, &y) in labels.iter().enumerate() {
        g.row_mut(r).copy_from_slice(&nn::softmax_cross_entropy(logits.row(r), y).unwrap().1);
    }
    let (grads, gx) = net.backward(&trace, &g).unwrap();
    let mut worst: f64 = 0.0;
    for (l, layer) in net.layers().iter().enumerate() {
        let w = layer.weights.as_slice().len();
        for idx in 0..w + layer.bias.len() {
            let plus = summed_ce(&with_param(net, l, idx, FD_EPS), x, labels);
            let minus = summed_ce(&with_param(net, l, idx, -FD_EPS), x, labels);
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let analytic = if idx < w {
                grads.weights[l].as_slice()[idx]
            } else {
                grads.biases[l][idx - w]
            };
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    for i in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += FD_EPS;
        let mut xm = x.clone();
        xm.as_mut_slice()[i] -= FD_EPS;
        let numeric = (summed_ce(net, &xp, labels) - summed_ce(net, &xm, labels)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(gx.as_slice()[i], numeric));
    }
    worst
}

/// A random ReLU network with 10 inputs, 1 to 3 hidden layers and a small batch.
pub fn random_network(seed: u64) -> (Mlp, Matrix, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let depth = r.random_range(1..=3);
    let mut dims = vec![10];
    for _ in 0..depth {
        dims.push(r.random_range(2..=12));
    }
    let classes = r.random_range(2..=5);
    dims.push(classes);
    let net = Mlp::seeded(&dims, Activation::Relu, Activation::Identity, rng::derive_seed(seed, 1)).unwrap();
    let n = 3;
    let x: Vec<f64> = (0..n * 10).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    (net, Matrix::from_vec(n, 10, x).unwrap(), labels)
}

fn split_loss(model: &VflModel, parts: &[Matrix], labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    (0..labels.len())
        .map(|r| {
            let rows: Vec<&[f64]> = parts.iter().map(|p| p.row(r)).collect();
            let emb: Vec<Vec<f64>> = rows.iter().enumerate().map(|(k, x)| model.embed(k, x).unwrap()).collect();
            let logits = model.logits_from_embeddings(&emb).unwrap();
            nn::softmax_cross_entropy(&logits, labels[r]).unwrap().0 / n
        })
        .sum()
}

fn perturb(net: &Mlp, idx: usize, delta: f64) -> Mlp {
    let mut offset = 0;
    for (l, layer) in net.layers().iter().enumerate() {
        let size = layer.weights.as_slice().len() + layer.bias.len();
        if idx < offset + size {
            return with_param(net, l, idx - offset, delta);
        }
        offset += size;
    }
    panic!("parameter {idx} out of range");
}

fn flat(grads: &nn::Gradients) -> Vec<f64> {
    grads
        .weights
        .iter()
        .zip(&grads.biases)
        .flat_map(|(w, b)| w.as_slice().iter().chain(b).copied().collect::<Vec<_>>())
        .collect()
}

/// Worst relative error of the split-learning gradients (top, every bottom, and the
/// embedding gradients sent to each party) against central differences of the mean loss.
pub fn split_gradient_error(seed: u64, aggregation: Aggregation) -> f64 {
    let mut r = rng::seeded(seed);
    let dims = [3usize, 4];
    let arch = VflArch {
        bottom_hidden: vec![5],
        embed_dim: 3,
        top_hidden: vec![4],
        aggregation,
    };
    let model = vfl::init_vfl(&dims, 3, &arch, seed).unwrap();
    let n = 4;
    let parts: Vec<Matrix> = dims
        .iter()
        .map(|&d| Matrix::from_vec(n, d, (0..n * d).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap())
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let sg = vfl::split_gradients(&model, &parts, &labels).unwrap();
    let mut worst: f64 = 0.0;

    let top = flat(&sg.top);
    for (i, &a) in top.iter().enumerate() {
        let mut p = model.clone();
        p.top = perturb(&model.top, i, FD_EPS);
        let mut m = model.clone();
        m.top = perturb(&model.top, i, -FD_EPS);
        let numeric = (split_loss(&p, &parts, &labels) - split_loss(&m, &parts, &labels)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(a, numeric));
    }
    for k in 0..model.num_parties() {
        let analytic = flat(&sg.bottoms[k]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = model.clone();
            p.bottoms[k] = perturb(&model.bottoms[k], i, FD_EPS);
            let mut m = model.clone();
            m.bottoms[k] = perturb(&model.bottoms[k], i, -FD_EPS);
            let numeric = (split_loss(&p, &parts, &labels) - split_loss(&m, &parts, &labels)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(a, numeric));
        }
        // gradient with respect to the embedding party k sends
        for row in 0..n {
            let emb: Vec<Vec<f64>> = (0..model.num_parties()).map(|j| model.embed(j, parts[j].row(row)).unwrap()).collect();
            for c in 0..emb[k].len() {
                let loss_at = |delta: f64| {
                    let mut e = emb.clone();
                    e[k][c] += delta;
                    let logits = model.logits_from_embeddings(&e).unwrap();
                    nn::softmax_cross_entropy(&logits, labels[row]).unwrap().0 / n as f64
                };
                let numeric = (loss_at(FD_EPS) - loss_at(-FD_EPS)) / (2.0 * FD_EPS);
                worst = worst.max(rel_err(sg.embeddings[k].get(row, c), numeric));
            }
        }
    }
    worst
}
