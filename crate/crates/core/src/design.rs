//! Latin hypercube and nested space-filling designs.
//!
//! The nested construction draws the largest design as the best of several
//! Latin hypercubes under the maximin criterion. Each smaller design is then
//! a greedy farthest-point subset of the level above. Rows are ordered so
//! that every level is a prefix of the level below it.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate tolerance used when matching rows across levels.
pub const NESTING_TOL: f64 = 1e-12;

/// Latin hypercube sample of `n` points in `[0, 1]^d`.
pub fn lhs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lhs_with(n, d, &mut rng)
}

fn lhs_with<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for (i, p) in perm.iter().enumerate() {
            // Open interior of the stratum keeps points off the box faces.
            let u: f64 = rng.random();
            pts[i][j] = ((*p as f64) + u.clamp(1e-12, 1.0 - 1e-12)) / n as f64;
        }
    }
    pts
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Smallest pairwise Euclidean distance (`inf` for fewer than two points).
pub fn min_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..i {
            best = best.min(dist2(&points[i], &points[j]));
        }
    }
    best.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedDesign {
    pub dim: usize,
    pub sizes: Vec<usize>,
    /// `designs[l]` holds the rows of level `l + 1`, all in `[0, 1]^d`.
    pub designs: Vec<Vec<Vec<f64>>>,
}

impl NestedDesign {
    pub fn validate(&self) -> Vec<NestingViolation> {
        validate_nested(&self.designs)
    }

    /// Affine map of every level onto the box `bounds`.
    pub fn scaled(&self, bounds: &[(f64, f64)]) -> Vec<Vec<Vec<f64>>> {
        self.designs.iter().map(|x| scale_to_bounds(x, bounds)).collect()
    }
}

pub fn scale_to_bounds(points: &[Vec<f64>], bounds: &[(f64, f64)]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| p.iter().zip(bounds).map(|(u, (lo, hi))| lo + u * (hi - lo)).collect())
        .collect()
}

/// Greedy farthest-point selection of `k` positions out of `points`.
fn farthest_subset<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = (0..n)
            .filter(|i| !chosen.contains(i))
            .max_by(|a, b| nearest[*a].total_cmp(&nearest[*b]).then(b.cmp(a)))
            .expect("subset smaller than the pool");
        chosen.push(next);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist2(&points[i], &points[next]));
        }
    }
    chosen
}

/// Nested maximin design with level sizes `sizes[0] >= sizes[1] >= ...`.
pub fn nested_design(sizes: &[usize], d: usize, seed: u64, maximin_candidates: usize) -> Result<NestedDesign> {
    if sizes.is_empty() || d == 0 {
        return Err(Error::Argument("nested design needs at least one level and one dimension".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Argument("level sizes must be at least 1".into()));
    }
    if sizes.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Argument(format!("level sizes {sizes:?} must be non-increasing")));
    }
    let candidates = maximin_candidates.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut base = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for _ in 0..candidates {
        let mut sub = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let cand = lhs_with(sizes[0], d, &mut sub);
        let score = min_distance(&cand);
        if score > best || base.is_empty() {
            best = score;
            base = cand;
        }
    }

    // Every level is a prefix of one ordering of the base rows.
    let mut order: Vec<usize> = (0..sizes[0]).collect();
    for w in sizes.windows(2) {
        let (n_hi, n_lo) = (w[0], w[1]);
        if n_lo == n_hi {
            continue;
        }
        let pool: Vec<Vec<f64>> = order[..n_hi].iter().map(|i| base[*i].clone()).collect();
        let mut pick = Vec::new();
        let mut pick_score = f64::NEG_INFINITY;
        for _ in 0..candidates {
            let mut sub = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let cand = farthest_subset(&pool, n_lo, &mut sub);
            let pts: Vec<Vec<f64>> = cand.iter().map(|i| pool[*i].clone()).collect();
            let score = min_distance(&pts);
            if score > pick_score || pick.is_empty() {
                pick_score = score;
                pick = cand;
            }
        }
        let prefix: Vec<usize> = order[..n_hi].to_vec();
        let mut reordered: Vec<usize> = pick.iter().map(|p| prefix[*p]).collect();
        reordered.extend(prefix.iter().enumerate().filter(|(p, _)| !pick.contains(p)).map(|(_, i)| *i));
        order[..n_hi].copy_from_slice(&reordered);
    }

    let designs = sizes.iter().map(|n| order[..*n].iter().map(|i| base[*i].clone()).collect()).collect();
    Ok(NestedDesign { dim: d, sizes: sizes.to_vec(), designs })
}

/// A row of level `level` (1-based) that breaks nesting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NestingViolation {
    /// No row of the level below matches.
    Missing { level: usize, row: usize },
    /// A matching row exists below but at a different index.
    Misaligned { level: usize, row: usize, found_at: usize },
}

impl std::fmt::Display for NestingViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NestingViolation::Missing { level, row } => {
                write!(f, "level {level} row {row} has no matching row at level {}", level - 1)
            }
            NestingViolation::Misaligned { level, row, found_at } => write!(
                f,
                "level {level} row {row} matches level {} row {found_at} instead of row {row}",
                level - 1
            ),
        }
    }
}

fn same_row(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= NESTING_TOL)
}

/// Every row of every level that is not aligned with the level below.
pub fn validate_nested(designs: &[Vec<Vec<f64>>]) -> Vec<NestingViolation> {
    let mut out = Vec::new();
    for l in 1..designs.len() {
        let below = &designs[l - 1];
        for (i, row) in designs[l].iter().enumerate() {
            if below.get(i).is_some_and(|b| same_row(b, row)) {
                continue;
            }
            match below.iter().position(|b| same_row(b, row)) {
                Some(j) => out.push(NestingViolation::Misaligned { level: l + 1, row: i, found_at: j }),
                None => out.push(NestingViolation::Missing { level: l + 1, row: i }),
            }
        }
    }
    out
}
