//! The two-stage targeted-label attack run by one compromised passive party.
//!
//! Preparation: cluster the attacker's unlabeled samples, pick the most expressive ones
//! per cluster, query them honestly, and use the answers to train a surrogate head and
//! an estimated detector. Attack: perturb every remaining sample with projected gradient
//! descent against the surrogate while keeping the estimated anomaly score under its
//! threshold, then submit it.

use std::fmt::Write as _;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rayon::prelude::*;

use crate::clustering::constrained_seed_kmeans;
use crate::detectors::{fit_calibrated, init_deepae, DeepAeConfig, DetectorConfig, DetectorKind, LabelAwareDetector, SubDetector, ThresholdMode};
use crate::matrix::{self, Matrix};
use crate::nn::{self, Activation, Batch, Mlp, SgdConfig};
use crate::protocol::InferenceOracle;
use crate::rng;
use crate::selection::{select_round, stopping_check, GreedyMode, MmdState, RbfKernel, StopDecision};
use crate::vfl::PredictionLabel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    OnlyPreparation,
    OnlyAttack,
    RandomPrepWithClustering,
    RandomPrepWithoutClustering,
    RandomAttack,
    Vtarbel,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::OnlyPreparation,
        Variant::OnlyAttack,
        Variant::RandomPrepWithClustering,
        Variant::RandomPrepWithoutClustering,
        Variant::RandomAttack,
        Variant::Vtarbel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::OnlyPreparation => "only_preparation",
            Variant::OnlyAttack => "only_attack",
            Variant::RandomPrepWithClustering => "random_prep_with_clustering",
            Variant::RandomPrepWithoutClustering => "random_prep_without_clustering",
            Variant::RandomAttack => "random_attack",
            Variant::Vtarbel => "vtarbel",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Space the preparation-stage clustering runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSpace {
    Embedding,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub target: usize,
    /// Weight of the estimated anomaly score in the objective; `None` picks 1 for
    /// autoencoders and 20 for KDE.
    pub lambda: Option<f64>,
    pub estimator: DetectorConfig,
    pub estimator_percentile: f64,
    pub t_opt: usize,
    /// PGD step size; `None` uses `alpha_scale` x the mean per-dimension raw range.
    pub alpha: Option<f64>,
    pub alpha_scale: f64,
    pub beta: f64,
    pub eta: usize,
    pub epsilon: f64,
    pub max_rounds: usize,
    pub t_ft: usize,
    pub ft_lr: f64,
    pub ft_batch_size: usize,
    pub head_hidden: Vec<usize>,
    pub greedy: GreedyMode,
    pub cluster_space: ClusterSpace,
    pub cluster_max_iter: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            target: 0,
            lambda: None,
            estimator: DetectorConfig::kde(),
            estimator_percentile: 95.0,
            t_opt: 50,
            alpha: None,
            alpha_scale: 0.05,
            beta: 1.0,
            eta: 10,
            epsilon: 1e-4,
            max_rounds: 100,
            t_ft: 50,
            ft_lr: 0.05,
            ft_batch_size: 16,
            head_hidden: vec![32],
            greedy: GreedyMode::Sequential,
            cluster_space: ClusterSpace::Embedding,
            cluster_max_iter: 100,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.estimator.kind {
            DetectorKind::DeepAe => 1.0,
            DetectorKind::Kde => 20.0,
        })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.target >= num_classes {
            return Err(Error::config(format!("target {} outside [0, {num_classes})", self.target)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("beta {} must lie in (0, 1]", self.beta)));
        }
        if self.eta == 0 || self.max_rounds == 0 {
            return Err(Error::config("eta and the round limit must be positive"));
        }
        if self.lambda() < 0.0 || self.alpha.is_some_and(|a| !(a > 0.0)) || !(self.alpha_scale > 0.0) {
            return Err(Error::config("lambda must be >= 0 and alpha > 0"));
        }
        if !(self.estimator_percentile > 0.0 && self.estimator_percentile < 100.0) {
            return Err(Error::config("estimator percentile must lie in (0, 100)"));
        }
        Ok(())
    }
}

/// What the attacker holds: its raw slice of the unlabeled set, its trained bottom model
/// and the valid range of each of its features.
#[derive(Debug, Clone, Copy)]
pub struct AttackerView<'a> {
    pub features: &'a Matrix,
    pub bottom: &'a Mlp,
    pub bounds: &'a [(f64, f64)],
    pub num_classes: usize,
}

impl AttackerView<'_> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Bottom model followed by an inference head.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub bottom: Mlp,
    pub head: Mlp,
}

impl Surrogate {
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.head.predict(&self.bottom.predict(x)?)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(matrix::argmax(&self.logits(x)?))
    }

    pub fn as_mlp(&self) -> Result<Mlp> {
        self.bottom.then(&self.head)
    }
}

pub fn init_head(embed_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Mlp> {
    let mut dims = vec![embed_dim];
    dims.extend(hidden);
    dims.push(num_classes);
    Mlp::seeded(&dims, Activation::Relu, Activation::Identity, seed)
}

/// Trains the head on `(embedding, pseudo-label)` pairs with the bottom frozen.
/// Returns the surrogate and the loss before training and after every epoch.
pub fn fine_tune_surrogate(
    bottom: &Mlp,
    head: &Mlp,
    embeddings: &Matrix,
    labels: &[usize],
    t_ft: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Surrogate, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::Attack("no labeled pairs to fine-tune on".into()));
    }
    let mut head = head.clone();
    let batch = Batch::new(embeddings.clone(), Some(labels.to_vec()), head.output_dim())?;
    let cfg = SgdConfig { epochs: t_ft, lr, batch_size };
    let history = nn::train_classifier(&mut head, &batch, &cfg, &mut rng::seeded(seed))?;
    Ok((Surrogate { bottom: bottom.clone(), head }, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Preparation,
    Attack,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Preparation => "preparation",
            Stage::Attack => "attack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRecord {
    pub index: usize,
    pub stage: Stage,
    pub label: PredictionLabel,
}

/// Per-sample outcomes of one attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub target: usize,
    pub records: Vec<SampleRecord>,
}

impl AttackReport {
    fn count(&self, stage: Option<Stage>, pred: impl Fn(&SampleRecord) -> bool) -> usize {
        self.records.iter().filter(|r| stage.is_none_or(|s| r.stage == s) && pred(r)).count()
    }

    pub fn num_samples(&self) -> usize {
        self.records.len()
    }

    pub fn preparation_size(&self) -> usize {
        self.count(Some(Stage::Preparation), |_| true)
    }

    pub fn attack_size(&self) -> usize {
        self.count(Some(Stage::Attack), |_| true)
    }

    fn hit(&self, r: &SampleRecord) -> bool {
        r.label == PredictionLabel::Class(self.target)
    }

    pub fn preparation_successes(&self) -> usize {
        self.count(Some(Stage::Preparation), |r| self.hit(r))
    }

    pub fn attack_successes(&self) -> usize {
        self.count(Some(Stage::Attack), |r| self.hit(r))
    }

    pub fn successes(&self) -> usize {
        self.count(None, |r| self.hit(r))
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Success rate over preparation-stage samples.
    pub fn s1(&self) -> f64 {
        Self::ratio(self.preparation_successes(), self.preparation_size())
    }

    /// Success rate over attack-stage samples; `REJ` counts as failure.
    pub fn s2(&self) -> f64 {
        Self::ratio(self.attack_successes(), self.attack_size())
    }

    pub fn overall(&self) -> f64 {
        Self::ratio(self.successes(), self.num_samples())
    }

    /// Share of `REJ` answers among attack-stage submissions, or among all submissions
    /// when there is no attack stage.
    pub fn anomaly_ratio(&self) -> f64 {
        let stage = if self.attack_size() > 0 { Some(Stage::Attack) } else { None };
        let total = self.count(stage, |_| true);
        Self::ratio(self.count(stage, |r| r.label.is_reject()), total)
    }

    /// `index,stage,label` rows followed by a `SUMMARY` record.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,stage,label\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.index, r.stage.name(), r.label);
        }
        let _ = writeln!(
            out,
            "SUMMARY,s1={},s2={},overall={},anomaly_ratio={},prep_size={}",
            self.s1(),
            self.s2(),
            self.overall(),
            self.anomaly_ratio(),
            self.preparation_size()
        );
        out
    }
}

/// Result of the preparation stage.
#[derive(Debug, Clone)]
pub struct PreparationState {
    /// Selected samples in selection order.
    pub selected: Vec<usize>,
    /// Selected samples by cluster.
    pub per_class: Vec<Vec<usize>>,
    /// Non-rejected `(sample, predicted label)` pairs.
    pub labeled: Vec<(usize, usize)>,
    /// Starts with `+inf`, then the MMD after every round.
    pub mmd_history: Vec<f64>,
    pub rounds: usize,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct PreparationOutput {
    pub state: PreparationState,
    pub surrogate: Surrogate,
    /// Fitted and calibrated estimated detector; `None` if the estimator is disabled.
    pub estimator: Option<LabelAwareDetector>,
    pub finetune_history: Vec<f64>,
}

/// How candidates are ranked within the preparation loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    Expressiveness,
    RandomClustered,
    RandomUnclustered,
}

fn embed_all(view: &AttackerView<'_>) -> Result<Matrix> {
    view.bottom.predict_batch(view.features)
}

/// Runs the selection / query loop until the MMD stopping rule fires (or for exactly
/// `fixed_rounds` rounds when given), then fits the surrogate head and the estimated
/// detector on the collected pairs.
pub fn run_preparation_stage(
    view: &AttackerView<'_>,
    oracle: &mut dyn InferenceOracle,
    cfg: &AttackConfig,
    strategy: SelectionStrategy,
    fixed_rounds: Option<usize>,
) -> Result<PreparationOutput> {
    cfg.validate(view.num_classes)?;
    let n = view.len();
    let c = view.num_classes;
    if n < c {
        return Err(Error::Attack(format!("{n} samples cannot form {c} clusters")));
    }
    let embeddings = embed_all(view)?;
    let cluster_points = match cfg.cluster_space {
        ClusterSpace::Embedding => &embeddings,
        ClusterSpace::Raw => view.features,
    };
    let mut mmd = MmdState::new(embeddings.clone(), RbfKernel::median_heuristic(&embeddings))?;
    let mut state = PreparationState {
        selected: Vec::new(),
        per_class: vec![Vec::new(); c],
        labeled: Vec::new(),
        mmd_history: vec![f64::INFINITY],
        rounds: 0,
        records: Vec::new(),
    };
    let mut pick_rng = rng::seeded(rng::derive_seed(cfg.seed, 11));
    let mut t = 1;
    loop {
        let clusters: Vec<Vec<usize>> = match strategy {
            SelectionStrategy::RandomUnclustered => vec![(0..n).collect()],
            _ => {
                let a = constrained_seed_kmeans(
                    cluster_points,
                    &state.labeled,
                    c,
                    cfg.cluster_max_iter,
                    rng::derive_seed(cfg.seed, 1000 + t as u64),
                )?;
                (0..c).map(|k| a.members(k)).collect()
            }
        };
        let z: Vec<(usize, usize)> = match strategy {
            SelectionStrategy::Expressiveness => select_round(&clusters, &mut mmd, cfg.eta, cfg.greedy)?,
            SelectionStrategy::RandomClustered | SelectionStrategy::RandomUnclustered => {
                let per = if strategy == SelectionStrategy::RandomUnclustered {
                    cfg.eta * c
                } else {
                    cfg.eta
                };
                let mut z = Vec::new();
                for (k, members) in clusters.iter().enumerate() {
                    let open: Vec<usize> = members.iter().copied().filter(|&u| !mmd.contains(u)).collect();
                    let take = per.min(open.len());
                    for i in index::sample(&mut pick_rng, open.len(), take).iter() {
                        mmd.add(open[i])?;
                        z.push((k, open[i]));
                    }
                }
                z
            }
        };
        if z.is_empty() {
            break;
        }
        for &(k, u) in &z {
            let label = oracle.query(u as u64, embeddings.row(u))?;
            state.selected.push(u);
            state.per_class[k.min(c - 1)].push(u);
            state.records.push(SampleRecord {
                index: u,
                stage: Stage::Preparation,
                label,
            });
            if let PredictionLabel::Class(y) = label {
                state.labeled.push((u, y));
            }
        }
        state.mmd_history.push(mmd.mmd2());
        state.rounds = t;
        t += 1;
        let stop = match fixed_rounds {
            Some(r) => t > r,
            None => stopping_check(&state.mmd_history, cfg.epsilon, t, cfg.max_rounds) == StopDecision::Stop,
        };
        if stop {
            break;
        }
    }
    if state.labeled.is_empty() {
        return Err(Error::AllRejected);
    }
    let rows: Vec<usize> = state.labeled.iter().map(|p| p.0).collect();
    let labels: Vec<usize> = state.labeled.iter().map(|p| p.1).collect();
    let loc = embeddings.select_rows(&rows);
    let head = init_head(view.bottom.output_dim(), &cfg.head_hidden, c, rng::derive_seed(cfg.seed, 12))?;
    let (surrogate, finetune_history) = fine_tune_surrogate(
        view.bottom,
        &head,
        &loc,
        &labels,
        cfg.t_ft,
        cfg.ft_lr,
        cfg.ft_batch_size,
        rng::derive_seed(cfg.seed, 13),
    )?;
    let est_cfg = DetectorConfig {
        deepae: DeepAeConfig {
            seed: rng::derive_seed(cfg.seed, 14),
            ..cfg.estimator.deepae.clone()
        },
        ..cfg.estimator.clone()
    };
    let estimator = fit_calibrated(&loc, &labels, c, &est_cfg, cfg.estimator_percentile, ThresholdMode::PerClass)?;
    Ok(PreparationOutput {
        state,
        surrogate,
        estimator: Some(estimator),
        finetune_history,
    })
}

/// Step size, radius and box for projected gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdConfig {
    pub target: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub t_opt: usize,
    pub radius: f64,
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdOutcome {
    /// Returned iterate passed the estimated detector.
    Accepted,
    /// No iterate, the starting point included, passed the estimated detector; the
    /// original sample is returned.
    NoFeasibleIterate,
    /// A non-finite gradient stopped the optimization; the original sample is returned.
    GradientAbort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdResult {
    pub x_adv: Vec<f64>,
    pub outcome: PgdOutcome,
    pub steps: usize,
    /// Objective at every accepted iterate, starting point first.
    pub objective: Vec<f64>,
}

/// Clamps to the box, then pulls the point back onto the ball of `radius` around `x0`.
/// With `x0` inside the box the result stays inside the box.
pub fn project(x: &mut [f64], x0: &[f64], radius: f64, bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
    let dist = matrix::sq_dist(x, x0).sqrt();
    if dist > radius {
        let s = radius / dist;
        for (v, o) in x.iter_mut().zip(x0) {
            *v = o + (*v - o) * s;
        }
    }
}

/// `J(x) = CE(surrogate(x), target) + lambda * score(bottom(x))`, where the score uses
/// the sub-detector of the surrogate's current prediction. Returns `(J, dJ/dx)`.
pub fn objective_and_gradient(x: &[f64], surrogate: &Surrogate, estimator: Option<&LabelAwareDetector>, target: usize, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let input = Matrix::row_vector(x);
    let (emb, b_trace) = surrogate.bottom.forward(&input)?;
    let (logits, h_trace) = surrogate.head.forward(&emb)?;
    let (ce, g_logits) = nn::softmax_cross_entropy(logits.row(0), target)?;
    let (_, g_emb) = surrogate.head.backward(&h_trace, &Matrix::row_vector(&g_logits))?;
    let mut g_emb = g_emb.into_vec();
    let mut j = ce;
    if let (Some(est), true) = (estimator, lambda != 0.0) {
        let class = matrix::argmax(logits.row(0));
        let e = emb.row(0);
        j += lambda * est.score(e, class)?;
        for (g, s) in g_emb.iter_mut().zip(est.score_gradient(e, class)?) {
            *g += lambda * s;
        }
    }
    let (_, gx) = surrogate.bottom.backward(&b_trace, &Matrix::row_vector(&g_emb))?;
    Ok((j, gx.into_vec()))
}

/// True if the embedding of `x` is not flagged by the estimator under the surrogate's
/// predicted class. Always true without an estimator.
pub fn passes_estimator(x: &[f64], surrogate: &Surrogate, estimator: Option<&LabelAwareDetector>) -> Result<bool> {
    let Some(est) = estimator else { return Ok(true) };
    let e = surrogate.bottom.predict(x)?;
    let class = matrix::argmax(&surrogate.head.predict(&e)?);
    Ok(est.score(&e, class)? <= est.threshold(class)?)
}

/// Projected gradient descent on the attack objective.
///
/// Stops after `t_opt` steps or as soon as the next iterate fails the estimated detector,
/// returning the last iterate that passed. If the starting point itself fails, iterates
/// keep going until one passes and the break rule applies from there on.
pub fn generate_malicious(x0: &[f64], surrogate: &Surrogate, estimator: Option<&LabelAwareDetector>, cfg: &PgdConfig) -> Result<PgdResult> {
    if x0.len() != cfg.bounds.len() {
        return Err(Error::shape("sample and bounds differ in dimension"));
    }
    let mut x = x0.to_vec();
    let mut last_ok = passes_estimator(&x, surrogate, estimator)?;
    let mut ever_ok = last_ok;
    let mut objective = Vec::new();
    let mut steps = 0;
    let mut broke = false;
    for _ in 0..cfg.t_opt {
        let (j, g) = objective_and_gradient(&x, surrogate, estimator, cfg.target, cfg.lambda)?;
        if !j.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Ok(PgdResult {
                x_adv: x0.to_vec(),
                outcome: PgdOutcome::GradientAbort,
                steps,
                objective,
            });
        }
        if last_ok {
            objective.push(j);
        }
        let mut next: Vec<f64> = x.iter().zip(&g).map(|(v, d)| v - cfg.alpha * d).collect();
        project(&mut next, x0, cfg.radius, &cfg.bounds);
        steps += 1;
        let ok = passes_estimator(&next, surrogate, estimator)?;
        if !ok && ever_ok {
            broke = true;
            break;
        }
        x = next;
        last_ok = ok;
        ever_ok |= ok;
    }
    if !ever_ok {
        return Ok(PgdResult {
            x_adv: x0.to_vec(),
            outcome: PgdOutcome::NoFeasibleIterate,
            steps,
            objective,
        });
    }
    if !broke {
        objective.push(objective_and_gradient(&x, surrogate, estimator, cfg.target, cfg.lambda)?.0);
    }
    Ok(PgdResult {
        x_adv: x,
        outcome: PgdOutcome::Accepted,
        steps,
        objective,
    })
}

/// L2 norm of the per-dimension `max - min` over the given rows.
pub fn range_radius(features: &Matrix, rows: &[usize]) -> f64 {
    let ranges = column_ranges(features, rows);
    matrix::l2_norm(&ranges)
}

fn column_ranges(features: &Matrix, rows: &[usize]) -> Vec<f64> {
    let sub = features.select_rows(rows);
    crate::data::column_bounds(&sub).into_iter().map(|(lo, hi)| hi - lo).collect()
}

/// Radius and step size derived from the preparation set (or from every sample when the
/// preparation set is empty).
pub fn pgd_config(view: &AttackerView<'_>, prep_rows: &[usize], cfg: &AttackConfig, lambda: f64) -> PgdConfig {
    let all: Vec<usize>;
    let rows = if prep_rows.is_empty() {
        all = (0..view.len()).collect();
        &all
    } else {
        prep_rows
    };
    let ranges = column_ranges(view.features, rows);
    let mean_range = ranges.iter().sum::<f64>() / ranges.len().max(1) as f64;
    PgdConfig {
        target: cfg.target,
        lambda,
        alpha: cfg.alpha.unwrap_or(cfg.alpha_scale * mean_range),
        t_opt: cfg.t_opt,
        radius: cfg.beta * matrix::l2_norm(&ranges),
        bounds: view.bounds.to_vec(),
    }
}

/// One optimized attack-stage sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSample {
    pub index: usize,
    pub result: PgdResult,
}

/// Full output of a variant run.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub variant: Variant,
    pub report: AttackReport,
    pub preparation: Option<PreparationOutput>,
    pub pgd: Option<PgdConfig>,
    pub adversarial: Vec<AdversarialSample>,
}

/// Optimizes every listed sample (in parallel) and submits them in order.
pub fn run_attack_stage(
    view: &AttackerView<'_>,
    remaining: &[usize],
    surrogate: &Surrogate,
    estimator: Option<&LabelAwareDetector>,
    pgd: &PgdConfig,
    oracle: &mut dyn InferenceOracle,
) -> Result<(Vec<SampleRecord>, Vec<AdversarialSample>)> {
    let adversarial = remaining
        .par_iter()
        .map(|&i| generate_malicious(view.features.row(i), surrogate, estimator, pgd).map(|result| AdversarialSample { index: i, result }))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(remaining.len());
    for a in &adversarial {
        let e = view.bottom.predict(&a.result.x_adv)?;
        let label = oracle.query(a.index as u64, &e)?;
        records.push(SampleRecord {
            index: a.index,
            stage: Stage::Attack,
            label,
        });
    }
    Ok((records, adversarial))
}

fn remaining_after(n: usize, selected: &[usize]) -> Vec<usize> {
    let mut taken = vec![false; n];
    for &i in selected {
        taken[i] = true;
    }
    (0..n).filter(|&i| !taken[i]).collect()
}

/// Runs one attack variant end to end against `oracle`.
pub fn run_variant(variant: Variant, view: &AttackerView<'_>, oracle: &mut dyn InferenceOracle, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate(view.num_classes)?;
    let n = view.len();
    match variant {
        Variant::OnlyPreparation => {
            let emb = embed_all(view)?;
            let records = (0..n)
                .map(|i| {
                    oracle.query(i as u64, emb.row(i)).map(|label| SampleRecord {
                        index: i,
                        stage: Stage::Preparation,
                        label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AttackOutcome {
                variant,
                report: AttackReport { target: cfg.target, records },
                preparation: None,
                pgd: None,
                adversarial: Vec::new(),
            })
        }
        Variant::OnlyAttack => {
            // untrained head and untrained autoencoders; with nothing to calibrate on the
            // break rule never fires
            let head = init_head(view.bottom.output_dim(), &cfg.head_hidden, view.num_classes, rng::derive_seed(cfg.seed, 12))?;
            let surrogate = Surrogate {
                bottom: view.bottom.clone(),
                head,
            };
            let subs = (0..view.num_classes)
                .map(|k| {
                    let ae = DeepAeConfig {
                        seed: rng::derive_seed(rng::derive_seed(cfg.seed, 14), k as u64),
                        ..cfg.estimator.deepae.clone()
                    };
                    init_deepae(view.bottom.output_dim(), &ae).map(|d| SubDetector::DeepAe(Box::new(d)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut estimator = LabelAwareDetector::from_parts(DetectorKind::DeepAe, subs);
            estimator.set_uniform_threshold(f64::INFINITY);
            let pgd = pgd_config(view, &[], cfg, cfg.lambda());
            let all: Vec<usize> = (0..n).collect();
            let (records, adversarial) = run_attack_stage(view, &all, &surrogate, Some(&estimator), &pgd, oracle)?;
            Ok(AttackOutcome {
                variant,
                report: AttackReport { target: cfg.target, records },
                preparation: None,
                pgd: Some(pgd),
                adversarial,
            })
        }
        Variant::Vtarbel | Variant::RandomPrepWithClustering | Variant::RandomPrepWithoutClustering => {
            let strategy = match variant {
                Variant::Vtarbel => SelectionStrategy::Expressiveness,
                Variant::RandomPrepWithClustering => SelectionStrategy::RandomClustered,
                _ => SelectionStrategy::RandomUnclustered,
            };
            // the random variants spend as many rounds as the expressiveness ranking would
            let rounds = match strategy {
                SelectionStrategy::Expressiveness => None,
                _ => Some(run_preparation_stage(view, oracle, cfg, SelectionStrategy::Expressiveness, None)?.state.rounds),
            };
            let prep = run_preparation_stage(view, oracle, cfg, strategy, rounds)?;
            let pgd = pgd_config(view, &prep.state.selected, cfg, cfg.lambda());
            let remaining = remaining_after(n, &prep.state.selected);
            let (attack_records, adversarial) = run_attack_stage(view, &remaining, &prep.surrogate, prep.estimator.as_ref(), &pgd, oracle)?;
            let mut records = prep.state.records.clone();
            records.extend(attack_records);
            Ok(AttackOutcome {
                variant,
                report: AttackReport { target: cfg.target, records },
                preparation: Some(prep),
                pgd: Some(pgd),
                adversarial,
            })
        }
        Variant::RandomAttack => {
            let prep = run_preparation_stage(view, oracle, cfg, SelectionStrategy::Expressiveness, None)?;
            let donors: Vec<usize> = prep.state.labeled.iter().filter(|&&(_, y)| y == cfg.target).map(|&(i, _)| i).collect();
            if donors.is_empty() {
                return Err(Error::Attack("no preparation sample was predicted as the target label".into()));
            }
            let mut r = rng::seeded(rng::derive_seed(cfg.seed, 15));
            let remaining = remaining_after(n, &prep.state.selected);
            let mut records = prep.state.records.clone();
            for &i in &remaining {
                let donor = *donors.choose(&mut r).expect("non-empty");
                let e = view.bottom.predict(view.features.row(donor))?;
                let label = oracle.query(i as u64, &e)?;
                records.push(SampleRecord {
                    index: i,
                    stage: Stage::Attack,
                    label,
                });
            }
            Ok(AttackOutcome {
                variant,
                report: AttackReport { target: cfg.target, records },
                preparation: Some(prep),
                pgd: None,
                adversarial: Vec::new(),
            })
        }
    }
}

/// Shuffled copy of `0..n`, used by callers that need a random equal-size subset.
pub fn random_subset(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng::seeded(seed));
    v.truncate(size);
    v
}
