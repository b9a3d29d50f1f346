//! Anomaly scoring: kernel density estimation and deep autoencoders, organized as
//! label-aware sets of per-class sub-detectors with percentile thresholds.
//!
//! Scores are oriented so that larger means more anomalous for both kinds: the KDE score
//! is the negated density `-(1/(n h)) * sum_i exp(-(|x - x_i| / h)^2)` and the autoencoder
//! score is the squared reconstruction error. A sample is flagged when its score is
//! strictly greater than the class threshold.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::matrix::{self, Matrix};
use crate::nn::{self, Activation, Layer, Mlp};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Kde,
    DeepAe,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Kde => "kde",
            DetectorKind::DeepAe => "deepae",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kde" => Ok(DetectorKind::Kde),
            "deepae" => Ok(DetectorKind::DeepAe),
            other => Err(Error::config(format!("unknown detector kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeDetector {
    observations: Matrix,
    bandwidth: f64,
}

impl KdeDetector {
    pub fn new(observations: Matrix, bandwidth: f64) -> Result<Self> {
        if observations.rows() == 0 || observations.cols() == 0 {
            return Err(Error::config("KDE needs at least one observation"));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::config(format!("bandwidth {bandwidth} must be positive")));
        }
        if !observations.is_finite() {
            return Err(Error::NonFinite("KDE observations".into()));
        }
        Ok(Self { observations, bandwidth })
    }

    /// Bandwidth set to the median pairwise distance of the observations (1.0 when that
    /// is undefined or zero).
    pub fn with_median_bandwidth(observations: Matrix) -> Result<Self> {
        let h = median_heuristic(&observations);
        Self::new(observations, h)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn observations(&self) -> &Matrix {
        &self.observations
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.observations.cols() {
            return Err(Error::shape(format!("query has {} dims, KDE was fit on {}", x.len(), self.observations.cols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("KDE query".into()));
        }
        Ok(())
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let h2 = self.bandwidth * self.bandwidth;
        let sum: f64 = self.observations.iter_rows().map(|o| (-matrix::sq_dist(x, o) / h2).exp()).sum();
        Ok(sum / (self.observations.rows() as f64 * self.bandwidth))
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.density(x)?)
    }

    /// Score of every observation with its own kernel term removed. A single observation
    /// gets its ordinary score.
    pub fn leave_one_out_scores(&self) -> Vec<f64> {
        let n = self.observations.rows();
        if n == 1 {
            return vec![-1.0 / self.bandwidth];
        }
        let h2 = self.bandwidth * self.bandwidth;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let x = self.observations.row(i);
                let sum: f64 = self
                    .observations
                    .iter_rows()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, o)| (-matrix::sq_dist(x, o) / h2).exp())
                    .sum();
                -sum / ((n - 1) as f64 * self.bandwidth)
            })
            .collect()
    }

    /// Gradient of [`KdeDetector::score`] with respect to `x`.
    pub fn score_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let h2 = self.bandwidth * self.bandwidth;
        let norm = 1.0 / (self.observations.rows() as f64 * self.bandwidth);
        let mut grad = vec![0.0; x.len()];
        for o in self.observations.iter_rows() {
            let k = (-matrix::sq_dist(x, o) / h2).exp();
            // d(-k)/dx = 2 k (x - o) / h^2
            for ((g, xi), oi) in grad.iter_mut().zip(x).zip(o) {
                *g += norm * 2.0 * k * (xi - oi) / h2;
            }
        }
        Ok(grad)
    }

    /// `"VTKD"`, u16 version, u32 rows, u32 cols, f64 bandwidth, row-major f64
    /// observations; little-endian throughout.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"VTKD")?;
        w.write_all(&1u16.to_le_bytes())?;
        let rows = u32::try_from(self.observations.rows()).map_err(|_| Error::Checkpoint("too many rows".into()))?;
        let cols = u32::try_from(self.observations.cols()).map_err(|_| Error::Checkpoint("too many cols".into()))?;
        w.write_all(&rows.to_le_bytes())?;
        w.write_all(&cols.to_le_bytes())?;
        w.write_all(&self.bandwidth.to_le_bytes())?;
        for v in self.observations.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VTKD" {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = nn::read_u16(&mut r)?;
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let rows = nn::read_u32(&mut r)? as usize;
        let cols = nn::read_u32(&mut r)? as usize;
        let h = nn::read_f64s(&mut r, 1)?[0];
        let obs = nn::read_f64s(&mut r, rows * cols)?;
        Self::new(Matrix::from_vec(rows, cols, obs)?, h)
    }
}

pub fn median_heuristic(points: &Matrix) -> f64 {
    match matrix::median_pairwise_distance(points) {
        Some(m) if m > 0.0 && m.is_finite() => m,
        _ => 1.0,
    }
}

/// Autoencoder architecture and training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepAeConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DeepAeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 8],
            latent: 4,
            epochs: 300,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepAeDetector {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub config: DeepAeConfig,
    /// Mean training reconstruction error (on standardized inputs) before training and
    /// after every epoch.
    pub loss_history: Vec<f64>,
}

impl DeepAeDetector {
    pub fn new(encoder: Mlp, decoder: Mlp, config: DeepAeConfig) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() {
            return Err(Error::shape("encoder output must match decoder input"));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(Error::shape("decoder output must match encoder input"));
        }
        Ok(Self {
            encoder,
            decoder,
            config,
            loss_history: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict(&self.encoder.predict(x)?)
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let r = self.reconstruct(x)?;
        Ok(matrix::sq_dist(x, &r))
    }

    /// Gradient of the squared reconstruction error with respect to `x`:
    /// `2(x - r) - J_r^T 2(x - r)`.
    pub fn score_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input = Matrix::row_vector(x);
        let (latent, enc_trace) = self.encoder.forward(&input)?;
        let (recon, dec_trace) = self.decoder.forward(&latent)?;
        let u: Vec<f64> = x.iter().zip(recon.row(0)).map(|(a, b)| 2.0 * (a - b)).collect();
        let neg_u = Matrix::row_vector(&u.iter().map(|v| -v).collect::<Vec<_>>());
        let (_, d_latent) = self.decoder.backward(&dec_trace, &neg_u)?;
        let (_, d_input) = self.encoder.backward(&enc_trace, &d_latent)?;
        Ok(u.iter().zip(d_input.row(0)).map(|(a, b)| a + b).collect())
    }

    /// Encoder followed by decoder, each in the network checkpoint format.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        self.encoder.write_checkpoint(&mut w)?;
        self.decoder.write_checkpoint(&mut w)
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let encoder = Mlp::read_checkpoint(&mut r)?;
        let decoder = Mlp::read_checkpoint(&mut r)?;
        let config = DeepAeConfig {
            latent: encoder.output_dim(),
            hidden: encoder.dims()[1..encoder.dims().len() - 1].to_vec(),
            epochs: 0,
            ..DeepAeConfig::default()
        };
        Self::new(encoder, decoder, config)
    }
}

/// Trains an autoencoder on standardized observations with minibatch SGD on the mean
/// squared reconstruction error, then folds the standardization into the first encoder
/// layer and the last decoder layer so scoring works on raw inputs.
pub fn fit_deepae(observations: &Matrix, config: &DeepAeConfig) -> Result<DeepAeDetector> {
    use rand::seq::SliceRandom;

    let n = observations.rows();
    let d = observations.cols();
    if n == 0 || d == 0 {
        return Err(Error::config("autoencoder needs at least one observation"));
    }
    if config.latent == 0 || config.hidden.contains(&0) {
        return Err(Error::shape("autoencoder widths must be positive"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let (mean, scale) = standardization(observations);
    let mut z = observations.clone();
    for r in 0..n {
        for (c, v) in z.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[c]) / scale[c];
        }
    }

    let mut enc_dims = vec![d];
    enc_dims.extend(&config.hidden);
    enc_dims.push(config.latent);
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let mut encoder = Mlp::seeded(&enc_dims, Activation::Relu, Activation::Identity, rng::derive_seed(config.seed, 1))?;
    let mut decoder = Mlp::seeded(&dec_dims, Activation::Relu, Activation::Identity, rng::derive_seed(config.seed, 2))?;

    let full_loss = |enc: &Mlp, dec: &Mlp| -> Result<f64> {
        let rec = dec.predict_batch(&enc.predict_batch(&z)?)?;
        Ok(nn::mse_loss(&z, &rec)?.0)
    };
    let mut history = vec![full_loss(&encoder, &decoder)?];
    let mut rng = rng::seeded(rng::derive_seed(config.seed, 3));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = z.select_rows(chunk);
            let (latent, enc_trace) = encoder.forward(&x)?;
            let (rec, dec_trace) = decoder.forward(&latent)?;
            let (_, g) = nn::mse_loss(&x, &rec)?;
            let (dec_grads, d_latent) = decoder.backward(&dec_trace, &g)?;
            let (enc_grads, _) = encoder.backward(&enc_trace, &d_latent)?;
            decoder.apply_sgd(&dec_grads, config.lr)?;
            encoder.apply_sgd(&enc_grads, config.lr)?;
        }
        history.push(full_loss(&encoder, &decoder)?);
    }

    let encoder = fold_input_standardization(&encoder, &mean, &scale)?;
    let decoder = fold_output_standardization(&decoder, &mean, &scale)?;
    let mut det = DeepAeDetector::new(encoder, decoder, config.clone())?;
    det.loss_history = history;
    Ok(det)
}

/// Autoencoder with seeded random weights and no training.
pub fn init_deepae(dim: usize, config: &DeepAeConfig) -> Result<DeepAeDetector> {
    if dim == 0 || config.latent == 0 || config.hidden.contains(&0) {
        return Err(Error::shape("autoencoder widths must be positive"));
    }
    let mut enc_dims = vec![dim];
    enc_dims.extend(&config.hidden);
    enc_dims.push(config.latent);
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let encoder = Mlp::seeded(&enc_dims, Activation::Relu, Activation::Identity, rng::derive_seed(config.seed, 1))?;
    let decoder = Mlp::seeded(&dec_dims, Activation::Relu, Activation::Identity, rng::derive_seed(config.seed, 2))?;
    DeepAeDetector::new(encoder, decoder, config.clone())
}

fn standardization(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in x.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// `W((x - mean)/scale) + b  ==  (W/scale) x + (b - W (mean/scale))`.
fn fold_input_standardization(net: &Mlp, mean: &[f64], scale: &[f64]) -> Result<Mlp> {
    let mut layers = net.layers().to_vec();
    let first = &mut layers[0];
    let (rows, cols) = (first.out_dim(), first.in_dim());
    let mut w = Matrix::zeros(rows, cols);
    let mut b = first.bias.clone();
    for o in 0..rows {
        for i in 0..cols {
            let wi = first.weights.get(o, i) / scale[i];
            w.set(o, i, wi);
            b[o] -= wi * mean[i];
        }
    }
    layers[0] = Layer::new(w, b, first.activation)?;
    Mlp::new(layers, net.seed())
}

/// `scale * (W z + b) + mean`, valid because the output layer is linear.
fn fold_output_standardization(net: &Mlp, mean: &[f64], scale: &[f64]) -> Result<Mlp> {
    let mut layers = net.layers().to_vec();
    let last_idx = layers.len() - 1;
    let last = &layers[last_idx];
    let (rows, cols) = (last.out_dim(), last.in_dim());
    let mut w = Matrix::zeros(rows, cols);
    let mut b = vec![0.0; rows];
    for o in 0..rows {
        for i in 0..cols {
            w.set(o, i, last.weights.get(o, i) * scale[o]);
        }
        b[o] = last.bias[o] * scale[o] + mean[o];
    }
    layers[last_idx] = Layer::new(w, b, last.activation)?;
    Mlp::new(layers, net.seed())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubDetector {
    Kde(KdeDetector),
    DeepAe(Box<DeepAeDetector>),
    /// No observations for this class; every query scores `+inf`.
    Empty,
}

impl SubDetector {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        match self {
            SubDetector::Kde(k) => k.score(x),
            SubDetector::DeepAe(a) => a.score(x),
            SubDetector::Empty => Ok(f64::INFINITY),
        }
    }

    /// Score gradient; zero for an empty sub-detector.
    pub fn score_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            SubDetector::Kde(k) => k.score_gradient(x),
            SubDetector::DeepAe(a) => a.score_gradient(x),
            SubDetector::Empty => Ok(vec![0.0; x.len()]),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, SubDetector::Empty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// KDE bandwidth; `None` uses the median heuristic per class.
    pub bandwidth: Option<f64>,
    pub deepae: DeepAeConfig,
}

impl DetectorConfig {
    pub fn kde() -> Self {
        Self {
            kind: DetectorKind::Kde,
            bandwidth: None,
            deepae: DeepAeConfig::default(),
        }
    }

    pub fn deepae(deepae: DeepAeConfig) -> Self {
        Self {
            kind: DetectorKind::DeepAe,
            bandwidth: None,
            deepae,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    PerClass,
    Global,
}

/// Per-class sub-detectors with per-class thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAwareDetector {
    kind: DetectorKind,
    subs: Vec<SubDetector>,
    counts: Vec<usize>,
    thresholds: Option<Vec<f64>>,
}

impl LabelAwareDetector {
    pub fn from_parts(kind: DetectorKind, subs: Vec<SubDetector>) -> Self {
        let counts = subs
            .iter()
            .map(|s| match s {
                SubDetector::Kde(k) => k.observations().rows(),
                _ => 0,
            })
            .collect();
        Self {
            kind,
            subs,
            counts,
            thresholds: None,
        }
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.subs.len()
    }

    pub fn sub_detector(&self, class: usize) -> Option<&SubDetector> {
        self.subs.get(class)
    }

    /// Number of fit observations per class.
    pub fn class_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        self.thresholds.as_deref()
    }

    pub fn set_thresholds(&mut self, thresholds: Vec<f64>) -> Result<()> {
        if thresholds.len() != self.subs.len() {
            return Err(Error::shape(format!("{} thresholds for {} classes", thresholds.len(), self.subs.len())));
        }
        self.thresholds = Some(thresholds);
        Ok(())
    }

    /// Sets every class threshold to `tau` (`+inf` disables detection).
    pub fn set_uniform_threshold(&mut self, tau: f64) {
        self.thresholds = Some(vec![tau; self.subs.len()]);
    }

    fn sub(&self, class: usize) -> Result<&SubDetector> {
        self.subs
            .get(class)
            .ok_or_else(|| Error::config(format!("class {class} outside [0, {})", self.subs.len())))
    }

    pub fn score(&self, x: &[f64], class: usize) -> Result<f64> {
        self.sub(class)?.score(x)
    }

    pub fn score_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.sub(class)?.score_gradient(x)
    }

    pub fn threshold(&self, class: usize) -> Result<f64> {
        let t = self.thresholds.as_ref().ok_or(Error::Uncalibrated)?;
        t.get(class)
            .copied()
            .ok_or_else(|| Error::config(format!("class {class} outside [0, {})", t.len())))
    }

    /// Anomalous iff the class-specific score is strictly above the class threshold.
    pub fn detect(&self, x: &[f64], class: usize) -> Result<Verdict> {
        let tau = self.threshold(class)?;
        let s = self.score(x, class)?;
        Ok(if s > tau { Verdict::Anomalous } else { Verdict::Normal })
    }

    /// Sets thresholds to the `percentile`-th percentile of calibration scores.
    ///
    /// Classes without a fitted sub-detector get `f64::MAX`, which their `+inf` scores
    /// always exceed. A fitted class with no calibration rows is an error.
    pub fn calibrate(&mut self, embeddings: &Matrix, labels: &[usize], percentile: f64, mode: ThresholdMode) -> Result<&[f64]> {
        let t = calibrate_threshold(self, embeddings, labels, percentile, mode)?;
        self.thresholds = Some(t);
        Ok(self.thresholds.as_deref().expect("just set"))
    }
}

/// Fits one sub-detector per class on that class's rows only.
pub fn fit_label_aware(embeddings: &Matrix, labels: &[usize], num_classes: usize, config: &DetectorConfig) -> Result<LabelAwareDetector> {
    if labels.len() != embeddings.rows() {
        return Err(Error::shape(format!("{} labels for {} embeddings", labels.len(), embeddings.rows())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::config(format!("label {bad} outside [0, {num_classes})")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let subs = by_class
        .par_iter()
        .enumerate()
        .map(|(class, rows)| -> Result<SubDetector> {
            if rows.is_empty() {
                return Ok(SubDetector::Empty);
            }
            let obs = embeddings.select_rows(rows);
            match config.kind {
                DetectorKind::Kde => {
                    let h = config.bandwidth.unwrap_or_else(|| median_heuristic(&obs));
                    Ok(SubDetector::Kde(KdeDetector::new(obs, h)?))
                }
                DetectorKind::DeepAe => {
                    let cfg = DeepAeConfig {
                        seed: rng::derive_seed(config.deepae.seed, class as u64),
                        ..config.deepae.clone()
                    };
                    Ok(SubDetector::DeepAe(Box::new(fit_deepae(&obs, &cfg)?)))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = by_class.iter().map(Vec::len).collect();
    Ok(LabelAwareDetector {
        kind: config.kind,
        subs,
        counts,
        thresholds: None,
    })
}

/// Linear-interpolation percentile: position `p/100 * (n-1)` in the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::config("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::config(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Computes thresholds without mutating the detector. See [`LabelAwareDetector::calibrate`].
pub fn calibrate_threshold(det: &LabelAwareDetector, embeddings: &Matrix, labels: &[usize], percentile_p: f64, mode: ThresholdMode) -> Result<Vec<f64>> {
    if !(percentile_p > 0.0 && percentile_p < 100.0) {
        return Err(Error::config(format!("percentile {percentile_p} must lie in (0, 100)")));
    }
    if labels.len() != embeddings.rows() {
        return Err(Error::shape("calibration labels and embeddings differ in length"));
    }
    let scored: Vec<(usize, f64)> = (0..embeddings.rows())
        .into_par_iter()
        .map(|i| {
            let y = labels[i];
            det.score(embeddings.row(i), y).map(|s| (y, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); det.num_classes()];
    for (y, s) in scored {
        per_class[y].push(s);
    }
    thresholds_from_scores(det, per_class, percentile_p, mode)
}

fn thresholds_from_scores(det: &LabelAwareDetector, per_class: Vec<Vec<f64>>, percentile_p: f64, mode: ThresholdMode) -> Result<Vec<f64>> {
    let c = det.num_classes();
    match mode {
        ThresholdMode::PerClass => (0..c)
            .map(|class| {
                if det.subs[class].is_empty() {
                    return Ok(f64::MAX);
                }
                if per_class[class].is_empty() {
                    return Err(Error::EmptyClass(class));
                }
                percentile(&per_class[class], percentile_p)
            })
            .collect(),
        ThresholdMode::Global => {
            let all: Vec<f64> = per_class.into_iter().flatten().filter(|s| s.is_finite()).collect();
            if all.is_empty() {
                return Err(Error::EmptyClass(0));
            }
            Ok(vec![percentile(&all, percentile_p)?; c])
        }
    }
}

/// Fits on `embeddings` and calibrates on the same rows.
///
/// KDE rows are scored with their own kernel term left out, so the thresholds match what
/// unseen traffic from the same distribution would score. DeepAE rows use the plain
/// reconstruction error.
pub fn fit_calibrated(
    embeddings: &Matrix,
    labels: &[usize],
    num_classes: usize,
    config: &DetectorConfig,
    percentile_p: f64,
    mode: ThresholdMode,
) -> Result<LabelAwareDetector> {
    if !(percentile_p > 0.0 && percentile_p < 100.0) {
        return Err(Error::config(format!("percentile {percentile_p} must lie in (0, 100)")));
    }
    let mut det = fit_label_aware(embeddings, labels, num_classes, config)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let per_class = by_class
        .par_iter()
        .enumerate()
        .map(|(class, rows)| match &det.subs[class] {
            SubDetector::Kde(k) => Ok(k.leave_one_out_scores()),
            _ => rows.iter().map(|&i| det.score(embeddings.row(i), class)).collect(),
        })
        .collect::<Result<Vec<_>>>()?;
    det.thresholds = Some(thresholds_from_scores(&det, per_class, percentile_p, mode)?);
    Ok(det)
}
