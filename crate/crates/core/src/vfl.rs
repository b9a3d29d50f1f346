//! Split-network VFL: per-party bottom models, an aggregation step and a top model, plus
//! detector-enhanced inference that may answer `REJ` instead of a class.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::defenses::DefenseSpec;
use crate::detectors::{LabelAwareDetector, Verdict};
use crate::matrix::{self, Matrix};
use crate::nn::{self, Activation, Gradients, Mlp};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Concat,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "concat" => Ok(Aggregation::Concat),
            other => Err(Error::config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// A class index or the rejection symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictionLabel {
    Class(usize),
    Reject,
}

impl PredictionLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            PredictionLabel::Class(c) => Some(c),
            PredictionLabel::Reject => None,
        }
    }

    pub fn is_reject(self) -> bool {
        self == PredictionLabel::Reject
    }
}

impl fmt::Display for PredictionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionLabel::Class(c) => write!(f, "{c}"),
            PredictionLabel::Reject => write!(f, "REJ"),
        }
    }
}

/// Sum is elementwise; concat follows party order.
pub fn aggregate<E: AsRef<[f64]>>(embeddings: &[E], mode: Aggregation) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or_else(|| Error::shape("no embeddings to aggregate"))?.as_ref();
    match mode {
        Aggregation::Sum => {
            let mut out = first.to_vec();
            for (k, e) in embeddings.iter().enumerate().skip(1) {
                let e = e.as_ref();
                if e.len() != out.len() {
                    return Err(Error::shape(format!("party {k} embedding has {} dims, party 0 has {}", e.len(), out.len())));
                }
                for (o, v) in out.iter_mut().zip(e) {
                    *o += v;
                }
            }
            Ok(out)
        }
        Aggregation::Concat => Ok(embeddings.iter().flat_map(|e| e.as_ref().iter().copied()).collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VflModel {
    pub bottoms: Vec<Mlp>,
    pub top: Mlp,
    pub aggregation: Aggregation,
}

impl VflModel {
    pub fn new(bottoms: Vec<Mlp>, top: Mlp, aggregation: Aggregation) -> Result<Self> {
        if bottoms.is_empty() {
            return Err(Error::shape("at least one bottom model is required"));
        }
        let dims: Vec<usize> = bottoms.iter().map(Mlp::output_dim).collect();
        let expected = match aggregation {
            Aggregation::Sum => {
                if dims.iter().any(|&d| d != dims[0]) {
                    return Err(Error::shape(format!("sum aggregation needs equal embedding dims, got {dims:?}")));
                }
                dims[0]
            }
            Aggregation::Concat => dims.iter().sum(),
        };
        if top.input_dim() != expected {
            return Err(Error::shape(format!(
                "top model takes {} inputs, aggregation produces {expected}",
                top.input_dim()
            )));
        }
        Ok(Self { bottoms, top, aggregation })
    }

    pub fn num_parties(&self) -> usize {
        self.bottoms.len()
    }

    pub fn num_classes(&self) -> usize {
        self.top.output_dim()
    }

    pub fn embedding_dim(&self, party: usize) -> usize {
        self.bottoms[party].output_dim()
    }

    pub fn embed(&self, party: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.bottom(party)?.predict(x)
    }

    fn bottom(&self, party: usize) -> Result<&Mlp> {
        self.bottoms
            .get(party)
            .ok_or_else(|| Error::config(format!("party {party} outside [0, {})", self.bottoms.len())))
    }

    pub fn logits_from_embeddings<E: AsRef<[f64]>>(&self, embeddings: &[E]) -> Result<Vec<f64>> {
        if embeddings.len() != self.bottoms.len() {
            return Err(Error::shape(format!("{} embeddings for {} parties", embeddings.len(), self.bottoms.len())));
        }
        self.top.predict(&aggregate(embeddings, self.aggregation)?)
    }

    /// Plain argmax prediction from per-party feature slices.
    pub fn predict<P: AsRef<[f64]>>(&self, parts: &[P]) -> Result<usize> {
        let emb = parts.iter().enumerate().map(|(k, p)| self.embed(k, p.as_ref())).collect::<Result<Vec<_>>>()?;
        Ok(matrix::argmax(&self.logits_from_embeddings(&emb)?))
    }

    /// Embeddings of one party for every row of `features`.
    pub fn embed_batch(&self, party: usize, features: &Matrix) -> Result<Matrix> {
        self.bottom(party)?.predict_batch(features)
    }
}

/// Architecture shared by every party: bottoms are `in -> hidden.. -> embed_dim`, the top
/// is `agg -> top_hidden.. -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct VflArch {
    pub bottom_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub top_hidden: Vec<usize>,
    pub aggregation: Aggregation,
}

impl Default for VflArch {
    fn default() -> Self {
        Self {
            bottom_hidden: vec![32, 32],
            embed_dim: 16,
            top_hidden: vec![32],
            aggregation: Aggregation::Concat,
        }
    }
}

pub fn init_vfl(party_dims: &[usize], num_classes: usize, arch: &VflArch, seed: u64) -> Result<VflModel> {
    let bottoms = party_dims
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let mut dims = vec![d];
            dims.extend(&arch.bottom_hidden);
            dims.push(arch.embed_dim);
            Mlp::seeded(&dims, Activation::Relu, Activation::Identity, rng::derive_seed(seed, k as u64 + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let agg_dim = match arch.aggregation {
        Aggregation::Sum => arch.embed_dim,
        Aggregation::Concat => arch.embed_dim * party_dims.len(),
    };
    let mut dims = vec![agg_dim];
    dims.extend(&arch.top_hidden);
    dims.push(num_classes);
    let top = Mlp::seeded(&dims, Activation::Relu, Activation::Identity, rng::derive_seed(seed, 0))?;
    VflModel::new(bottoms, top, arch.aggregation)
}

/// Parameter gradients of one split forward/backward pass.
#[derive(Debug, Clone)]
pub struct SplitGradients {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub bottoms: Vec<Gradients>,
    pub top: Gradients,
    /// Gradient of the mean loss with respect to each party's embeddings; this is what
    /// the active party sends back to each party.
    pub embeddings: Vec<Matrix>,
}

/// One split-learning step: each party forwards its slice, the active party aggregates,
/// computes the mean cross-entropy and backpropagates down to each party's embedding.
pub fn split_gradients(model: &VflModel, parts: &[Matrix], labels: &[usize]) -> Result<SplitGradients> {
    if parts.len() != model.num_parties() {
        return Err(Error::shape(format!("{} feature slices for {} parties", parts.len(), model.num_parties())));
    }
    let n = labels.len();
    if parts.iter().any(|p| p.rows() != n) {
        return Err(Error::shape("feature slices and labels differ in row count"));
    }
    let mut embeddings = Vec::with_capacity(parts.len());
    let mut traces = Vec::with_capacity(parts.len());
    for (bottom, x) in model.bottoms.iter().zip(parts) {
        let (e, t) = bottom.forward(x)?;
        embeddings.push(e);
        traces.push(t);
    }
    let agg = match model.aggregation {
        Aggregation::Concat => Matrix::hstack(&embeddings.iter().collect::<Vec<_>>())?,
        Aggregation::Sum => {
            let mut acc = embeddings[0].clone();
            for e in &embeddings[1..] {
                if e.cols() != acc.cols() {
                    return Err(Error::shape("sum aggregation needs equal embedding dims"));
                }
                for (a, b) in acc.as_mut_slice().iter_mut().zip(e.as_slice()) {
                    *a += b;
                }
            }
            acc
        }
    };
    let (logits, top_trace) = model.top.forward(&agg)?;
    let mut g = Matrix::zeros(n, model.num_classes());
    let mut loss = 0.0;
    let scale = 1.0 / n.max(1) as f64;
    for (r, &y) in labels.iter().enumerate() {
        let (l, grad) = nn::softmax_cross_entropy(logits.row(r), y)?;
        loss += l * scale;
        for (dst, src) in g.row_mut(r).iter_mut().zip(grad) {
            *dst = src * scale;
        }
    }
    let (top_grads, d_agg) = model.top.backward(&top_trace, &g)?;
    let emb_grads: Vec<Matrix> = match model.aggregation {
        Aggregation::Sum => vec![d_agg; parts.len()],
        Aggregation::Concat => {
            let mut start = 0;
            embeddings
                .iter()
                .map(|e| {
                    let cols: Vec<usize> = (start..start + e.cols()).collect();
                    start += e.cols();
                    d_agg.select_cols(&cols)
                })
                .collect()
        }
    };
    let bottoms = model
        .bottoms
        .iter()
        .zip(&traces)
        .zip(&emb_grads)
        .map(|((b, t), g)| b.backward(t, g).map(|(grads, _)| grads))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitGradients {
        loss,
        bottoms,
        top: top_grads,
        embeddings: emb_grads,
    })
}

/// Mean cross-entropy and accuracy of the undefended model.
pub fn evaluate_vfl(model: &VflModel, parts: &[Matrix], labels: &[usize]) -> Result<(f64, f64)> {
    let embs = parts.iter().enumerate().map(|(k, p)| model.embed_batch(k, p)).collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        let rows: Vec<&[f64]> = embs.iter().map(|e| e.row(r)).collect();
        let logits = model.logits_from_embeddings(&rows)?;
        loss += nn::softmax_cross_entropy(&logits, y)?.0;
        if matrix::argmax(&logits) == y {
            correct += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains a fresh split network with shuffled minibatch SGD. Returns the model and the
/// full-data loss before training and after each epoch.
pub fn train_vfl(parts: &[Matrix], labels: &[usize], num_classes: usize, arch: &VflArch, cfg: &nn::SgdConfig, seed: u64) -> Result<(VflModel, Vec<f64>)> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let dims: Vec<usize> = parts.iter().map(Matrix::cols).collect();
    let mut model = init_vfl(&dims, num_classes, arch, seed)?;
    let mut history = vec![evaluate_vfl(&model, parts, labels)?.0];
    let mut rng = rng::seeded(rng::derive_seed(seed, 100));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<Matrix> = parts.iter().map(|p| p.select_rows(chunk)).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = split_gradients(&model, &xs, &ys)?;
            model.top.apply_sgd(&g.top, cfg.lr)?;
            for (b, bg) in model.bottoms.iter_mut().zip(&g.bottoms) {
                b.apply_sgd(bg, cfg.lr)?;
            }
        }
        history.push(evaluate_vfl(&model, parts, labels)?.0);
    }
    Ok((model, history))
}

/// Which embedding the defender's detector inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorMode {
    Party(usize),
    Aggregate,
}

/// Trained model plus the defender's detector and optional embedding defense.
#[derive(Debug, Clone)]
pub struct VflSystem {
    pub model: VflModel,
    /// `None` disables detection.
    pub detector: Option<LabelAwareDetector>,
    pub monitor: MonitorMode,
    pub defense: DefenseSpec,
    /// Party whose received embedding the defense transforms.
    pub defended_party: usize,
}

impl VflSystem {
    pub fn new(model: VflModel, detector: Option<LabelAwareDetector>, monitor: MonitorMode) -> Self {
        let defended_party = match monitor {
            MonitorMode::Party(p) => p,
            MonitorMode::Aggregate => model.num_parties() - 1,
        };
        Self {
            model,
            detector,
            monitor,
            defense: DefenseSpec::None,
            defended_party,
        }
    }

    pub fn with_defense(mut self, defense: DefenseSpec, party: usize) -> Self {
        self.defense = defense;
        self.defended_party = party;
        self
    }

    /// Detector-enhanced inference on received embeddings.
    ///
    /// The defense (if any) transforms the defended party's embedding before aggregation;
    /// the class is predicted first, then the monitored embedding as received is scored
    /// under that class's sub-detector. Noise draws are keyed by `sample_id`.
    pub fn infer_embeddings(&self, sample_id: u64, mut embeddings: Vec<Vec<f64>>) -> Result<PredictionLabel> {
        if embeddings.len() != self.model.num_parties() {
            return Err(Error::shape(format!(
                "{} embeddings for {} parties",
                embeddings.len(),
                self.model.num_parties()
            )));
        }
        let monitored = match self.monitor {
            MonitorMode::Party(p) => embeddings
                .get(p)
                .cloned()
                .ok_or_else(|| Error::config(format!("monitored party {p} does not exist")))?,
            MonitorMode::Aggregate => aggregate(&embeddings, self.model.aggregation)?,
        };
        if self.defense != DefenseSpec::None {
            let seed = match self.defense {
                DefenseSpec::Noisy { seed, .. } => seed,
                _ => 0,
            };
            let mut r = rng::seeded(rng::derive_seed(seed, sample_id));
            let p = self.defended_party;
            embeddings[p] = self.defense.apply(&embeddings[p], &mut r)?;
        }
        let logits = self.model.logits_from_embeddings(&embeddings)?;
        let y = matrix::argmax(&logits);
        match &self.detector {
            Some(det) => match det.detect(&monitored, y)? {
                Verdict::Normal => Ok(PredictionLabel::Class(y)),
                Verdict::Anomalous => Ok(PredictionLabel::Reject),
            },
            None => Ok(PredictionLabel::Class(y)),
        }
    }

    /// Detector-enhanced inference from per-party feature slices.
    pub fn infer<P: AsRef<[f64]>>(&self, sample_id: u64, parts: &[P]) -> Result<PredictionLabel> {
        let emb = parts
            .iter()
            .enumerate()
            .map(|(k, p)| self.model.embed(k, p.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.infer_embeddings(sample_id, emb)
    }

    /// Benign inference for every row; sample ids are row indices.
    pub fn infer_batch(&self, parts: &[Matrix]) -> Result<Vec<PredictionLabel>> {
        let n = parts.first().map_or(0, Matrix::rows);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let rows: Vec<&[f64]> = parts.iter().map(|p| p.row(i)).collect();
                self.infer(i as u64, &rows)
            })
            .collect()
    }
}
