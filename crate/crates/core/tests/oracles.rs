use rand::seq::index;
use rand::Rng;

use vflab::attack::{self, AttackConfig, AttackerView, PgdConfig, PgdOutcome, SelectionStrategy, Surrogate};
use vflab::clustering::constrained_seed_kmeans;
use vflab::data::{self, Dataset, SplitMode};
use vflab::detectors::{fit_deepae, DeepAeConfig, DeepAeDetector, DetectorKind, KdeDetector, LabelAwareDetector, SubDetector};
use vflab::matrix::{self, sq_dist};
use vflab::nn::{Activation, Layer, Mlp};
use vflab::protocol::InferenceOracle;
use vflab::rng;
use vflab::selection::{mmd2, MmdState, RbfKernel};
use vflab::vfl::{Aggregation, MonitorMode, PredictionLabel, VflModel, VflSystem};
use vflab::{Matrix, Result};

fn gaussian_blobs(centers: &[&[f64]], per: usize, stdev: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            let normal = rand_distr::StandardNormal;
            rows.push(center.iter().map(|m| m + stdev * r.sample::<f64, _>(normal)).collect::<Vec<_>>());
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

fn linear(weights: &[&[f64]], bias: &[f64], act: Activation) -> Layer {
    Layer::new(Matrix::from_rows(weights).unwrap(), bias.to_vec(), act).unwrap()
}

#[test]
fn autoencoder_with_unit_bottleneck_halves_its_loss() {
    let (x, _) = gaussian_blobs(&[&[-3.0, -3.0], &[3.0, 3.0]], 100, 0.5, 11);
    let cfg = DeepAeConfig {
        hidden: vec![8],
        latent: 1,
        epochs: 200,
        seed: 3,
        ..DeepAeConfig::default()
    };
    let ae = fit_deepae(&x, &cfg).unwrap();
    let h = &ae.loss_history;
    assert!(h.last().unwrap() < &(0.5 * h[0]), "{} -> {}", h[0], h.last().unwrap());
}

#[test]
fn kde_flattens_as_bandwidth_grows() {
    let (obs, _) = gaussian_blobs(&[&[0.0, 0.0]], 50, 1.0, 2);
    let grid: Vec<[f64; 2]> = (-3..=3).flat_map(|i| (-3..=3).map(move |j| [i as f64, j as f64])).collect();
    let mut prev = vec![f64::NEG_INFINITY; grid.len()];
    for h in [5.0, 10.0, 50.0, 200.0, 1000.0] {
        let det = KdeDetector::new(obs.clone(), h).unwrap();
        for (q, p) in grid.iter().zip(prev.iter_mut()) {
            let s = det.score(q).unwrap();
            assert!(s > *p && s < 0.0, "h={h} q={q:?}: {s} after {p}");
            *p = s;
        }
    }
    assert!(prev.iter().all(|s| s.abs() < 1e-3));
}

#[test]
fn uncovered_candidate_beats_duplicate() {
    // tight blob around 0 already represented in Q, uncovered blob around 5
    let mut rows: Vec<[f64; 1]> = (0..10).map(|i| [i as f64 * 0.01]).collect();
    rows.extend((0..10).map(|i| [5.0 + i as f64 * 0.01]));
    let d = Matrix::from_rows(&rows).unwrap();
    let kernel = RbfKernel::new(1.0).unwrap();
    let mut state = MmdState::new(d.clone(), kernel).unwrap();
    state.add(0).unwrap();
    let duplicate = 1;
    let uncovered = 15;
    assert!(state.expressiveness(uncovered) > state.expressiveness(duplicate));
    let brute = |u: usize| {
        let before = mmd2(&d, &d.select_rows(&[0]), &kernel).unwrap();
        before - mmd2(&d, &d.select_rows(&[0, u]), &kernel).unwrap()
    };
    assert!(brute(uncovered) > brute(duplicate));
}

fn vanilla_kmeans(points: &Matrix, k: usize, max_iter: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::seeded(seed);
    let init = index::sample(&mut r, points.rows(), k);
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|i| points.row(i).to_vec()).collect();
    let nearest = |x: &[f64], cs: &[Vec<f64>]| {
        let mut best = (0, f64::INFINITY);
        for (c, m) in cs.iter().enumerate() {
            let d = sq_dist(x, m);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    };
    let mut assign: Vec<usize> = points.iter_rows().map(|x| nearest(x, &centroids)).collect();
    for _ in 0..max_iter {
        for (c, m) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points.iter_rows().zip(&assign).filter(|(_, &a)| a == c).map(|(x, _)| x).collect();
            if !members.is_empty() {
                for (j, v) in m.iter_mut().enumerate() {
                    *v = members.iter().map(|x| x[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let next: Vec<usize> = points.iter_rows().map(|x| nearest(x, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

#[test]
fn unseeded_clustering_is_plain_kmeans() {
    let (pts, _) = gaussian_blobs(&[&[0.0, 0.0], &[4.0, 0.0], &[0.0, 4.0]], 30, 0.8, 5);
    for seed in 0..20 {
        let ours = constrained_seed_kmeans(&pts, &[], 3, 100, seed).unwrap();
        assert_eq!(ours.assignment, vanilla_kmeans(&pts, 3, 100, seed), "seed {seed}");
    }
}

/// Score `|e|^2`: a one-layer encoder and a decoder that outputs zero.
fn squared_norm_detector(dim: usize) -> DeepAeDetector {
    let eye: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| f64::from(i == j)).collect()).collect();
    let rows: Vec<&[f64]> = eye.iter().map(Vec::as_slice).collect();
    let encoder = Mlp::new(vec![linear(&rows, &vec![0.0; dim], Activation::Identity)], 0).unwrap();
    let zeros = vec![vec![0.0; dim]; dim];
    let zrows: Vec<&[f64]> = zeros.iter().map(Vec::as_slice).collect();
    let decoder = Mlp::new(vec![linear(&zrows, &vec![0.0; dim], Activation::Identity)], 0).unwrap();
    DeepAeDetector::new(encoder, decoder, DeepAeConfig::default()).unwrap()
}

fn one_d_surrogate() -> Surrogate {
    Surrogate {
        bottom: Mlp::new(vec![linear(&[&[1.0]], &[0.0], Activation::Identity)], 0).unwrap(),
        head: Mlp::new(vec![linear(&[&[-1.0], &[1.0]], &[0.0, 0.0], Activation::Identity)], 0).unwrap(),
    }
}

#[test]
fn break_rule_returns_last_passing_iterate() {
    // J = CE(( -x, x ), 0); from x0 = 0 with alpha 0.5 the iterates are -0.5 then about
    // -0.769, so tau = 0.4 on |e|^2 admits step 1 and rejects step 2
    let surrogate = one_d_surrogate();
    let mut est = LabelAwareDetector::from_parts(
        DetectorKind::DeepAe,
        vec![
            SubDetector::DeepAe(Box::new(squared_norm_detector(1))),
            SubDetector::DeepAe(Box::new(squared_norm_detector(1))),
        ],
    );
    est.set_uniform_threshold(0.4);
    let cfg = PgdConfig {
        target: 0,
        lambda: 0.0,
        alpha: 0.5,
        t_opt: 10,
        radius: 10.0,
        bounds: vec![(-10.0, 10.0)],
    };
    let out = attack::generate_malicious(&[0.0], &surrogate, Some(&est), &cfg).unwrap();
    assert_eq!(out.outcome, PgdOutcome::Accepted);
    assert_eq!(out.steps, 2);
    assert_eq!(out.x_adv, vec![-0.5]);
}

#[test]
fn objective_never_rises_on_a_convex_problem() {
    // linear surrogate: cross-entropy is convex and smooth in x
    let surrogate = Surrogate {
        bottom: Mlp::new(vec![linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity)], 0).unwrap(),
        head: Mlp::new(
            vec![linear(&[&[0.5, -1.0], &[-0.3, 0.8], &[1.0, 0.2]], &[0.1, 0.0, -0.2], Activation::Identity)],
            0,
        )
        .unwrap(),
    };
    let cfg = PgdConfig {
        target: 0,
        lambda: 0.0,
        alpha: 0.2,
        t_opt: 50,
        radius: 3.0,
        bounds: vec![(-5.0, 5.0); 2],
    };
    for x0 in [[0.0, 0.0], [2.0, -1.0], [-3.0, 4.0]] {
        let out = attack::generate_malicious(&x0, &surrogate, None, &cfg).unwrap();
        assert_eq!(out.objective.len(), cfg.t_opt + 1);
        for w in out.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", out.objective);
        }
        assert!(matrix::l2_norm(&out.x_adv.iter().zip(&x0).map(|(a, b)| a - b).collect::<Vec<_>>()) <= cfg.radius + 1e-9);
    }
}

#[test]
fn surrogate_fits_separable_pseudo_labels() {
    let (emb, labels) = gaussian_blobs(&[&[-2.0, 0.0, 1.0], &[2.0, 0.0, -1.0], &[0.0, 3.0, 0.0]], 40, 0.6, 8);
    let bottom = Mlp::new(
        vec![linear(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[0.0; 3], Activation::Identity)],
        0,
    )
    .unwrap();
    let head = attack::init_head(3, &[32], 3, 4).unwrap();
    let (s, _) = attack::fine_tune_surrogate(&bottom, &head, &emb, &labels, 50, 0.05, 16, 9).unwrap();
    let correct = emb.iter_rows().zip(&labels).filter(|(x, &y)| s.predict(x).unwrap() == y).count();
    assert!(correct as f64 / labels.len() as f64 >= 0.9);
}

/// Rejects odd sample ids and labels the rest by the sign of the first coordinate.
struct OddRejecter;

impl InferenceOracle for OddRejecter {
    fn query(&mut self, sample: u64, embedding: &[f64]) -> Result<PredictionLabel> {
        Ok(if sample % 2 == 1 {
            PredictionLabel::Reject
        } else {
            PredictionLabel::Class(usize::from(embedding[0] > 0.0))
        })
    }
}

#[test]
fn rejected_queries_join_the_selection_but_not_the_labeled_set() {
    let (x, _) = gaussian_blobs(&[&[-2.0, 0.0], &[2.0, 0.0]], 40, 0.7, 21);
    let bottom = Mlp::new(vec![linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity)], 0).unwrap();
    let bounds = data::column_bounds(&x);
    let view = AttackerView {
        features: &x,
        bottom: &bottom,
        bounds: &bounds,
        num_classes: 2,
    };
    let cfg = AttackConfig {
        eta: 3,
        max_rounds: 4,
        ..AttackConfig::default()
    };
    let prep = attack::run_preparation_stage(&view, &mut OddRejecter, &cfg, SelectionStrategy::Expressiveness, None).unwrap();
    let state = &prep.state;
    assert!(state.selected.iter().any(|i| i % 2 == 1));
    assert!(state.labeled.iter().all(|(i, _)| i % 2 == 0));
    let even = state.selected.iter().filter(|i| *i % 2 == 0).count();
    assert_eq!(state.labeled.len(), even);
    // the selection MMD never increases across rounds
    for w in state.mmd_history.windows(2) {
        assert!(w[1] <= w[0], "{:?}", state.mmd_history);
    }
}

#[test]
fn identity_bottoms_compose_to_the_top_model() {
    let mut r = rng::seeded(4);
    let x = Matrix::from_vec(25, 6, (0..150).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let ds = Dataset::new(x.clone(), vec![0; 25], 1).unwrap();
    let views = data::vertical_split(&ds, &[0.5, 0.5], 0, SplitMode::Contiguous).unwrap();
    let bottoms = views
        .iter()
        .map(|v| {
            let k = v.columns.len();
            let eye: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| f64::from(i == j)).collect()).collect();
            let rows: Vec<&[f64]> = eye.iter().map(Vec::as_slice).collect();
            Mlp::new(vec![linear(&rows, &vec![0.0; k], Activation::Identity)], 0).unwrap()
        })
        .collect();
    let top = Mlp::seeded(&[6, 8, 4], Activation::Relu, Activation::Identity, 7).unwrap();
    let model = VflModel::new(bottoms, top.clone(), Aggregation::Concat).unwrap();
    let system = VflSystem::new(model, None, MonitorMode::Party(1));
    for i in 0..25 {
        let parts: Vec<&[f64]> = views.iter().map(|v| v.features.row(i)).collect();
        let expected = matrix::argmax(&top.predict(x.row(i)).unwrap());
        assert_eq!(system.infer(i as u64, &parts).unwrap(), PredictionLabel::Class(expected));
    }
}
