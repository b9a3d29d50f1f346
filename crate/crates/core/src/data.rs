//! Datasets and vertical partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::matrix::Matrix;
use crate::rng;
use crate::{Error, Result};

/// Labeled feature matrix with per-dimension valid ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-dimension `(min, max)`.
    pub feature_bounds: Vec<(f64, f64)>,
}

impl Dataset {
    /// Validates labels and derives bounds from the data.
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::config("no rows"));
        }
        if labels.len() != features.rows() {
            return Err(Error::shape(format!("{} labels for {} rows", labels.len(), features.rows())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::config(format!("label {bad} outside [0, {num_classes})")));
        }
        let feature_bounds = column_bounds(&features);
        Ok(Self {
            features,
            labels,
            num_classes,
            feature_bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

pub fn column_bounds(features: &Matrix) -> Vec<(f64, f64)> {
    (0..features.cols())
        .map(|c| {
            features
                .iter_rows()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularSchema {
    pub delimiter: char,
    /// Column index of the label; negative values count from the end (`-1` = last).
    pub label_column: isize,
    pub has_header: bool,
    /// When set, labels at or above this count are rejected. Otherwise the class count is
    /// one more than the largest label seen.
    pub num_classes: Option<usize>,
}

impl Default for TabularSchema {
    fn default() -> Self {
        Self {
            delimiter: ',',
            label_column: -1,
            has_header: false,
            num_classes: None,
        }
    }
}

pub fn load_tabular(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_tabular(&text, schema)
}

pub fn parse_tabular(text: &str, schema: &TabularSchema) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut lines = text.lines().enumerate();
    if schema.has_header {
        lines.next();
    }
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(schema.delimiter).map(str::trim).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {w} cells, found {}", cells.len()),
                })
            }
            _ => {}
        }
        let label_idx = if schema.label_column < 0 {
            cells.len() as isize + schema.label_column
        } else {
            schema.label_column
        };
        if label_idx < 0 || label_idx as usize >= cells.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label column {} out of range", schema.label_column),
            });
        }
        let label_idx = label_idx as usize;
        let label: usize = cells[label_idx].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("unknown label value {:?}", cells[label_idx]),
        })?;
        if let Some(c) = schema.num_classes {
            if label >= c {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown label value {label} (class count {c})"),
                });
            }
        }
        let mut row = Vec::with_capacity(cells.len() - 1);
        for (j, cell) in cells.iter().enumerate() {
            if j == label_idx {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric feature {cell:?} in column {j}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite feature in column {j}"),
                });
            }
            row.push(v);
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::config("no rows"));
    }
    let num_classes = schema.num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Matrix::from_rows(&rows)?, labels, num_classes)
}

/// Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub centers: Vec<Vec<f64>>,
    pub stdevs: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SyntheticSpec {
    /// Classes on the corners of a hypercube: class `c` sets coordinate `j` to
    /// `±separation/2` according to bit `j mod b` of `c`, where `b = ceil(log2 C)`.
    /// With four classes this is a 2x2 grid repeated across all dimensions, so every
    /// block of features separates all classes.
    pub fn grid(num_classes: usize, dim: usize, separation: f64, stdev: f64, per_class: usize) -> Self {
        let bits = (usize::BITS - (num_classes.max(2) - 1).leading_zeros()) as usize;
        let centers = (0..num_classes)
            .map(|c| {
                (0..dim)
                    .map(|j| {
                        let bit = (c >> (j % bits)) & 1;
                        if bit == 1 {
                            separation / 2.0
                        } else {
                            -separation / 2.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            centers,
            stdevs: vec![stdev; num_classes],
            counts: vec![per_class; num_classes],
        }
    }
}

/// Samples the blobs and shuffles rows; fully determined by `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let c = spec.centers.len();
    if c < 2 {
        return Err(Error::config("synthetic data needs at least two classes"));
    }
    if spec.stdevs.len() != c || spec.counts.len() != c {
        return Err(Error::config("centers, stdevs and counts must have one entry per class"));
    }
    let dim = spec.centers[0].len();
    if dim == 0 || spec.centers.iter().any(|v| v.len() != dim) {
        return Err(Error::config("class centers must share a positive dimension"));
    }
    if spec.counts.contains(&0) {
        return Err(Error::config("every class needs at least one sample"));
    }
    if spec.stdevs.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::config("stdevs must be finite and non-negative"));
    }
    let mut rng = rng::seeded(seed);
    let mut rows = Vec::new();
    for (class, ((center, &sd), &count)) in spec.centers.iter().zip(&spec.stdevs).zip(&spec.counts).enumerate() {
        let noise = Normal::new(0.0, sd).map_err(|e| Error::config(e.to_string()))?;
        for _ in 0..count {
            let x: Vec<f64> = center.iter().map(|m| m + noise.sample(&mut rng)).collect();
            rows.push((x, class));
        }
    }
    rows.shuffle(&mut rng);
    let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
    Dataset::new(Matrix::from_rows(&xs)?, ys, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Contiguous,
    Random,
}

/// One party's vertical slice of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyView {
    pub party: usize,
    /// Column indices into the parent dataset, ascending.
    pub columns: Vec<usize>,
    pub features: Matrix,
}

impl PartyView {
    pub fn bounds_from(&self, parent_bounds: &[(f64, f64)]) -> Vec<(f64, f64)> {
        self.columns.iter().map(|&c| parent_bounds[c]).collect()
    }
}

/// Allocates `round(fraction_k * d)` columns to each party but the last, which takes the
/// remainder. `Random` permutes columns with `seed` before allocating.
pub fn vertical_split(dataset: &Dataset, fractions: &[f64], seed: u64, mode: SplitMode) -> Result<Vec<PartyView>> {
    let columns = split_columns(dataset.dim(), fractions, seed, mode)?;
    Ok(columns
        .into_iter()
        .enumerate()
        .map(|(party, cols)| PartyView {
            party,
            features: dataset.features.select_cols(&cols),
            columns: cols,
        })
        .collect())
}

/// Column allocation only; a pure function of `(d, fractions, seed, mode)`.
pub fn split_columns(d: usize, fractions: &[f64], seed: u64, mode: SplitMode) -> Result<Vec<Vec<usize>>> {
    let k = fractions.len();
    if k == 0 {
        return Err(Error::config("at least one party is required"));
    }
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::config("party fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("party fractions sum to {total}, expected 1")));
    }
    if k > d {
        return Err(Error::config(format!("{k} parties but only {d} features")));
    }
    let mut sizes: Vec<usize> = fractions[..k - 1].iter().map(|f| (f * d as f64).round() as usize).collect();
    let used: usize = sizes.iter().sum();
    if used >= d {
        return Err(Error::config("rounding leaves no columns for the last party"));
    }
    sizes.push(d - used);
    if let Some(p) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::config(format!("party {p} would receive no columns")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    if mode == SplitMode::Random {
        order.shuffle(&mut rng::seeded(seed));
    }
    let mut start = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let mut cols = order[start..start + s].to_vec();
            cols.sort_unstable();
            start += s;
            cols
        })
        .collect())
}

/// Puts party slices back into parent column order.
pub fn reassemble(views: &[PartyView]) -> Result<Matrix> {
    let rows = views.first().map_or(0, |v| v.features.rows());
    let d: usize = views.iter().map(|v| v.columns.len()).sum();
    let mut out = Matrix::zeros(rows, d);
    for v in views {
        if v.features.rows() != rows {
            return Err(Error::shape("party views differ in row count"));
        }
        for r in 0..rows {
            for (j, &c) in v.columns.iter().enumerate() {
                if c >= d {
                    return Err(Error::shape(format!("column {c} outside [0, {d})")));
                }
                out.set(r, c, v.features.get(r, j));
            }
        }
    }
    Ok(out)
}
