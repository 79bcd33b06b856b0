//! Nested multi-fidelity training data.

use serde::{Deserialize, Serialize};

use crate::design::{validate_nested, NestingViolation, NESTING_TOL};
use crate::error::{Error, Result};

/// Nested designs `X_1 ⊇ ... ⊇ X_L` with outputs and per-level costs.
///
/// Rows are aligned: row `i` of level `l` equals row `i` of level `l - 1`
/// for every `i < n_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiFidelityDataset {
    pub dim: usize,
    pub levels: usize,
    pub bounds: Vec<(f64, f64)>,
    pub costs: Vec<f64>,
    pub designs: Vec<Vec<Vec<f64>>>,
    pub outputs: Vec<Vec<f64>>,
}

impl MultiFidelityDataset {
    pub fn new(
        bounds: Vec<(f64, f64)>,
        costs: Vec<f64>,
        designs: Vec<Vec<Vec<f64>>>,
        outputs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let ds = MultiFidelityDataset { dim: bounds.len(), levels: designs.len(), bounds, costs, designs, outputs };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.levels == 0 {
            return bad("at least one level is required".into());
        }
        if self.bounds.len() != self.dim {
            return bad(format!("{} bounds given for dim {}", self.bounds.len(), self.dim));
        }
        if let Some((j, (lo, hi))) = self
            .bounds
            .iter()
            .enumerate()
            .find(|(_, (lo, hi))| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return bad(format!("bounds of coordinate {j} ({lo}, {hi}) are not an interval"));
        }
        for (name, len) in [("costs", self.costs.len()), ("designs", self.designs.len()), ("outputs", self.outputs.len())] {
            if len != self.levels {
                return bad(format!("{name} has {len} entries for {} levels", self.levels));
            }
        }
        if self.costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return bad("costs must be positive".into());
        }
        if self.costs.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("costs {:?} must be strictly increasing", self.costs));
        }
        for l in 0..self.levels {
            let (x, y) = (&self.designs[l], &self.outputs[l]);
            if x.is_empty() {
                return bad(format!("level {} has no rows", l + 1));
            }
            if x.len() != y.len() {
                return bad(format!("level {} has {} rows but {} outputs", l + 1, x.len(), y.len()));
            }
            if let Some(i) = x.iter().position(|r| r.len() != self.dim) {
                return bad(format!("level {} row {i} has {} coordinates, expected {}", l + 1, x[i].len(), self.dim));
            }
            if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
                return bad(format!("level {} contains non-finite values", l + 1));
            }
            if l > 0 && x.len() > self.designs[l - 1].len() {
                return bad(format!("level {} has more rows than level {}", l + 1, l));
            }
        }
        if let Some(v) = self.nesting_violations().first() {
            return bad(format!("designs are not nested: {v}"));
        }
        Ok(())
    }

    pub fn nesting_violations(&self) -> Vec<NestingViolation> {
        validate_nested(&self.designs)
    }

    /// Number of rows at 1-based `level`.
    pub fn n(&self, level: usize) -> usize {
        self.designs[level - 1].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.designs.iter().map(Vec::len).collect()
    }

    /// `C_1 + ... + C_level`.
    pub fn cumulative_cost(&self, level: usize) -> f64 {
        self.costs[..level].iter().sum()
    }

    /// Add `x` at levels `1..=ys.len()` with outputs `ys`, keeping rows
    /// aligned: the new row is inserted at index `n_l` (the current size of
    /// the top level touched) in every affected level. A copy of `x` already
    /// present further down a lower level is moved rather than duplicated.
    pub fn insert_nested(&mut self, x: &[f64], ys: &[f64]) -> Result<()> {
        let top = ys.len();
        if top == 0 || top > self.levels {
            return Err(Error::LevelOutOfRange { level: top, levels: self.levels });
        }
        if x.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: x.len() });
        }
        let at = self.designs[top - 1].len();
        let same = |r: &Vec<f64>| r.iter().zip(x).all(|(a, b)| (a - b).abs() <= NESTING_TOL);
        if self.designs[top - 1].iter().any(same) {
            return Err(Error::Dataset(format!("point {x:?} is already present at level {top}")));
        }
        if let Some(j) = self.designs[0].iter().skip(at).position(same).map(|j| j + at) {
            for s in 0..self.levels {
                if j < self.designs[s].len() {
                    self.designs[s].remove(j);
                    self.outputs[s].remove(j);
                }
            }
        }
        for s in 0..top {
            self.designs[s].insert(at, x.to_vec());
            self.outputs[s].insert(at, ys[s]);
        }
        Ok(())
    }

    /// True if some row of 1-based `level` lies within `tol` (max-norm) of `x`.
    pub fn contains_point(&self, level: usize, x: &[f64], tol: f64) -> bool {
        self.designs[level - 1]
            .iter()
            .any(|r| r.iter().zip(x).all(|(a, b)| (a - b).abs() <= tol))
    }
}
