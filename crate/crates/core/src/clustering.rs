//! Constrained seed K-Means: Lloyd iterations where labeled points are pinned to the
//! cluster of their label and seed the initial centroids.

use rand::seq::index;

use crate::matrix::{self, Matrix};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    /// Update steps performed after the initial assignment.
    pub iterations: usize,
    /// Within-cluster sum of squares after the initial assignment and after every
    /// update step, each measured against the means of the assignment.
    pub wcss_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, &c)| c == cluster).map(|(i, _)| i).collect()
    }
}

/// Clusters `points` into `k` groups. `seeds` pins `(row, cluster)` pairs; a row listed
/// more than once keeps its last entry.
///
/// Seeded clusters start at the mean of their seeds, the others at distinct random rows.
/// Distance ties go to the lower cluster id. A cluster left empty after an assignment is
/// re-seeded with the unpinned point of the largest cluster farthest from that cluster's
/// centroid.
pub fn constrained_seed_kmeans(points: &Matrix, seeds: &[(usize, usize)], k: usize, max_iter: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::config("number of clusters must be positive"));
    }
    if k > n {
        return Err(Error::config(format!("{k} clusters for {n} points")));
    }
    let mut pinned: Vec<Option<usize>> = vec![None; n];
    for &(i, c) in seeds {
        if i >= n {
            return Err(Error::config(format!("seed row {i} outside [0, {n})")));
        }
        if c >= k {
            return Err(Error::config(format!("seed cluster {c} outside [0, {k})")));
        }
        pinned[i] = Some(c);
    }

    let d = points.cols();
    let mut centroids = Matrix::zeros(k, d);
    let mut seed_counts = vec![0usize; k];
    for (i, p) in pinned.iter().enumerate() {
        if let Some(c) = *p {
            seed_counts[c] += 1;
            for (a, v) in centroids.row_mut(c).iter_mut().zip(points.row(i)) {
                *a += v;
            }
        }
    }
    let seedless: Vec<usize> = (0..k).filter(|&c| seed_counts[c] == 0).collect();
    for c in 0..k {
        if seed_counts[c] > 0 {
            let inv = 1.0 / seed_counts[c] as f64;
            centroids.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    if !seedless.is_empty() {
        let mut r = rng::seeded(seed);
        let picks = index::sample(&mut r, n, seedless.len());
        for (&c, i) in seedless.iter().zip(picks.iter()) {
            centroids.row_mut(c).copy_from_slice(points.row(i));
        }
    }

    let mut assignment = assign(points, &centroids, &pinned);
    let mut wcss_history = vec![wcss(points, &assignment, &means(points, &assignment, k, &centroids))];
    let mut iterations = 0;
    while iterations < max_iter {
        let mut next_centroids = means(points, &assignment, k, &centroids);
        repair_empty(points, &mut assignment, &mut next_centroids, &pinned);
        let next = assign(points, &next_centroids, &pinned);
        iterations += 1;
        let stable = next == assignment;
        assignment = next;
        centroids = next_centroids;
        wcss_history.push(wcss(points, &assignment, &means(points, &assignment, k, &centroids)));
        if stable {
            break;
        }
    }
    Ok(ClusterAssignment {
        assignment,
        centroids,
        iterations,
        wcss_history,
    })
}

fn nearest(x: &[f64], centroids: &Matrix) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = matrix::sq_dist(x, row);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn assign(points: &Matrix, centroids: &Matrix, pinned: &[Option<usize>]) -> Vec<usize> {
    points
        .iter_rows()
        .zip(pinned)
        .map(|(x, p)| p.unwrap_or_else(|| nearest(x, centroids)))
        .collect()
}

/// Means of the assigned points; empty clusters keep `previous`.
fn means(points: &Matrix, assignment: &[usize], k: usize, previous: &Matrix) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (x, &c) in points.iter_rows().zip(assignment) {
        counts[c] += 1;
        for (a, v) in sums.row_mut(c).iter_mut().zip(x) {
            *a += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            let inv = 1.0 / counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    sums
}

fn repair_empty(points: &Matrix, assignment: &mut [usize], centroids: &mut Matrix, pinned: &[Option<usize>]) {
    let k = centroids.rows();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = (0..k).find(|&c| counts[c] == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("k > 0");
        let far = assignment
            .iter()
            .enumerate()
            .filter(|&(i, &c)| c == largest && pinned[i].is_none())
            .map(|(i, _)| (i, matrix::sq_dist(points.row(i), centroids.row(largest))))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        match far {
            // a zero-distance donor would leave the partition unchanged in effect
            Some((i, d)) if d > 0.0 => {
                assignment[i] = empty;
                centroids.row_mut(empty).copy_from_slice(points.row(i));
            }
            _ => return,
        }
    }
}

/// Sum of squared distances from each point to its cluster's centroid.
pub fn wcss(points: &Matrix, assignment: &[usize], centroids: &Matrix) -> f64 {
    points.iter_rows().zip(assignment).map(|(x, &c)| matrix::sq_dist(x, centroids.row(c))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn separable_line_without_seeds() {
        let p = line(&[0.0, 0.1, 10.0, 10.1]);
        for seed in 0..10 {
            let a = constrained_seed_kmeans(&p, &[], 2, 50, seed).unwrap();
            assert_eq!(a.assignment[0], a.assignment[1]);
            assert_eq!(a.assignment[2], a.assignment[3]);
            assert_ne!(a.assignment[0], a.assignment[2]);
        }
    }

    #[test]
    fn seeded_point_stays_put() {
        let p = line(&[0.0, 0.1, 10.0, 10.1]);
        let a = constrained_seed_kmeans(&p, &[(3, 0), (2, 1)], 2, 50, 1).unwrap();
        assert_eq!(a.assignment[3], 0);
        assert_eq!(a.assignment[2], 1);
    }

    #[test]
    fn zero_iterations_uses_initial_centroids() {
        let p = line(&[0.0, 1.0, 2.0, 9.0]);
        let a = constrained_seed_kmeans(&p, &[(0, 0), (3, 1)], 2, 0, 0).unwrap();
        assert_eq!(a.iterations, 0);
        assert_eq!(a.centroids, line(&[0.0, 9.0]));
        assert_eq!(a.assignment, vec![0, 0, 0, 1]);
    }

    #[test]
    fn identical_points_stay_in_initial_clusters() {
        let p = line(&[2.0; 5]);
        let a = constrained_seed_kmeans(&p, &[], 3, 20, 4).unwrap();
        assert_eq!(a.assignment, vec![0; 5]);
    }

    #[test]
    fn too_many_clusters() {
        assert!(constrained_seed_kmeans(&line(&[1.0]), &[], 2, 5, 0).is_err());
        assert!(constrained_seed_kmeans(&line(&[1.0, 2.0]), &[(0, 2)], 2, 5, 0).is_err());
    }

    #[test]
    fn wcss_never_increases() {
        let pts: Vec<[f64; 2]> = (0..60)
            .map(|i| {
                let t = i as f64;
                [(t * 0.37).sin() * 5.0 + (i % 3) as f64 * 4.0, (t * 0.11).cos() * 3.0]
            })
            .collect();
        let p = Matrix::from_rows(&pts).unwrap();
        let a = constrained_seed_kmeans(&p, &[(0, 0), (1, 1)], 3, 100, 7).unwrap();
        for w in a.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", a.wcss_history);
        }
    }
}
