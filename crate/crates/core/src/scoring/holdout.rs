//! Held-out rows and columns.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Mask;
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutPartition {
    pub n: usize,
    pub d: usize,
    /// Held-out row indices, ascending.
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Rows and columns of the observed block, ascending.
    pub obs_rows: Vec<usize>,
    pub obs_cols: Vec<usize>,
    pub seed: u64,
}

/// 10% of `n`, at least one.
pub fn default_holdout_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).max(1)
}

/// Uniformly chooses disjoint held-out rows and columns.
pub fn make_holdout(n: usize, d: usize, rows_held: usize, cols_held: usize, seed: u64) -> Result<HoldoutPartition> {
    if n < rows_held + 2 || d < cols_held + 2 {
        return Err(Error::TooSmall(format!(
            "holding out {rows_held} of {n} rows and {cols_held} of {d} columns"
        )));
    }
    let mut rng = rng_for(seed, "holdout");
    let pick = |total: usize, k: usize, rng: &mut crate::rng::Rng| {
        let mut v = sample(rng, total, k).into_vec();
        v.sort_unstable();
        v
    };
    let rows = pick(n, rows_held, &mut rng);
    let cols = pick(d, cols_held, &mut rng);
    let rest = |total: usize, held: &[usize]| (0..total).filter(|i| held.binary_search(i).is_err()).collect();
    Ok(HoldoutPartition {
        n,
        d,
        obs_rows: rest(n, &rows),
        obs_cols: rest(d, &cols),
        rows,
        cols,
        seed,
    })
}

impl HoldoutPartition {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.cols.is_empty()
    }

    pub fn observed_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.select_rows(&self.obs_rows).select_columns(&self.obs_cols)
    }

    pub fn observed_mask(&self, mask: &Mask) -> Mask {
        mask.select_rows(&self.obs_rows).select_columns(&self.obs_cols)
    }

    /// The partition of the transposed matrix.
    pub fn transposed(&self) -> HoldoutPartition {
        HoldoutPartition {
            n: self.d,
            d: self.n,
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            obs_rows: self.obs_cols.clone(),
            obs_cols: self.obs_rows.clone(),
            seed: self.seed,
        }
    }

    /// Number of observed rows preceding row `i`.
    pub fn position(&self, i: usize) -> usize {
        self.obs_rows.partition_point(|&r| r < i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let h = make_holdout(200, 200, 20, 20, 3).unwrap();
        assert_eq!(h.obs_rows.len(), 180);
        assert_eq!(h.obs_cols.len(), 180);
        assert_eq!(h, make_holdout(200, 200, 20, 20, 3).unwrap());
        assert!(h.rows.iter().all(|r| h.obs_rows.binary_search(r).is_err()));
        let x = DMatrix::zeros(200, 200);
        assert_eq!(h.observed_block(&x).shape(), (180, 180));
    }

    #[test]
    fn empty_and_too_small() {
        let h = make_holdout(4, 4, 0, 0, 1).unwrap();
        assert!(h.is_empty());
        assert!(matches!(make_holdout(3, 5, 2, 1, 1), Err(Error::TooSmall(_))));
    }

    #[test]
    fn positions_count_preceding_observed_rows() {
        let h = HoldoutPartition {
            n: 5,
            d: 2,
            rows: vec![0, 3],
            cols: vec![],
            obs_rows: vec![1, 2, 4],
            obs_cols: vec![0, 1],
            seed: 0,
        };
        assert_eq!(h.position(0), 0);
        assert_eq!(h.position(3), 2);
    }
}
