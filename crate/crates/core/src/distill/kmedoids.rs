use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Result of a k-medoids run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedoidSet {
    /// Selected shapes, in selection order.
    pub indices: Vec<usize>,
    /// For every shape, the shape index of its medoid.
    pub assignment: Vec<usize>,
    /// Sum of `d(i, assignment[i])` in index order.
    pub objective: f64,
    /// Objective after the initial assignment and after every iteration.
    pub history: Vec<f64>,
}

impl MedoidSet {
    /// Members of the cluster of `medoid`, ascending.
    pub fn members(&self, medoid: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == medoid)
            .collect()
    }
}

fn objective(dist: &DistanceMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &m)| dist.get(i, m))
        .sum()
}

/// Nearest medoid of every point. A medoid is always its own medoid, and
/// other ties go to the medoid selected first.
fn assign(dist: &DistanceMatrix, medoids: &[usize]) -> Vec<usize> {
    (0..dist.n())
        .map(|i| {
            if medoids.contains(&i) {
                return i;
            }
            let mut best = medoids[0];
            for &m in &medoids[1..] {
                if dist.get(i, m) < dist.get(i, best) {
                    best = m;
                }
            }
            best
        })
        .collect()
}

/// Seeding: the first medoid uniformly, then each next one with probability
/// proportional to the squared distance to the nearest medoid so far.
fn init(dist: &DistanceMatrix, k: usize, seed: u64, restart: usize) -> Vec<usize> {
    let n = dist.n();
    let mut rng = rng_for(seed, &["kmedoids-init", &restart.to_string()]);
    let mut medoids = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist.get(i, medoids[0])).collect();
    while medoids.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                if medoids.contains(&i) {
                    0.0
                } else {
                    nearest[i] * nearest[i]
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // only duplicates of existing medoids remain
            (0..n).find(|i| !medoids.contains(i)).expect("k <= n")
        };
        medoids.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist.get(i, next));
        }
    }
    medoids
}

/// Number of seeded starts [`kmedoids`] runs.
pub const DEFAULT_RESTARTS: usize = 5;

/// Voronoi-iteration k-medoids from seeded distance-proportional starts.
/// Each iteration assigns points to their nearest medoid and moves every
/// medoid to the member of its cluster with the smallest total distance to
/// the others, keeping the current medoid unless another is strictly better.
/// Each run stops at a fixed point; the run with the lowest objective is
/// returned (the earliest on ties).
pub fn kmedoids(dist: &DistanceMatrix, k: usize, seed: u64) -> Result<MedoidSet> {
    kmedoids_with_restarts(dist, k, seed, DEFAULT_RESTARTS)
}

pub fn kmedoids_with_restarts(
    dist: &DistanceMatrix,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<MedoidSet> {
    let n = dist.n();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} medoids for {n} shapes")));
    }
    if restarts == 0 {
        return Err(Error::Parameter(
            "at least one k-medoids start is needed".into(),
        ));
    }
    let mut best: Option<MedoidSet> = None;
    for r in 0..restarts {
        let run = voronoi(dist, init(dist, k, seed, r));
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
        if k == n {
            break;
        }
    }
    Ok(best.expect("at least one run"))
}

fn voronoi(dist: &DistanceMatrix, mut medoids: Vec<usize>) -> MedoidSet {
    let (n, k) = (dist.n(), medoids.len());
    let mut assignment = assign(dist, &medoids);
    let mut history = vec![objective(dist, &assignment)];
    loop {
        let mut changed = false;
        for slot in 0..k {
            let m = medoids[slot];
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == m).collect();
            let cost = |c: usize| members.iter().map(|&j| dist.get(c, j)).sum::<f64>();
            let current = cost(m);
            // improvements within rounding of the sum are not moves
            let bar = current - 1e-12 * current.max(1.0);
            let mut best = (m, bar);
            for &c in &members {
                let v = cost(c);
                if v < best.1 {
                    best = (c, v);
                }
            }
            if best.0 != m {
                medoids[slot] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let next = assign(dist, &medoids);
        let obj = objective(dist, &next);
        let prev = *history.last().expect("history starts non-empty");
        assert!(obj <= prev, "k-medoids objective rose from {prev} to {obj}");
        history.push(obj);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let objective = *history.last().expect("history starts non-empty");
    MedoidSet {
        indices: medoids,
        assignment,
        objective,
        history,
    }
}
