//! Minimum-cost bipartite assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query-to-ground-truth assignment; unlisted queries are background.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query_index, gt_index)`, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// Ground-truth index per query.
    pub fn gt_for_queries(&self, n_query: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_query];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost[q][g]).sum()
    }
}

/// Assign every ground truth (column) to a distinct query (row) at minimum
/// total cost. `cost` is `n_query × n_gt`.
///
/// Shortest augmenting paths with row/column potentials, O(n_gt² · n_query).
/// Ties resolve toward lower indices because every scan takes the first
/// strict minimum.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n_query = cost.len();
    let n_gt = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != n_gt) {
        return Err(Error::shape("cost matrix rows differ in length"));
    }
    if n_gt == 0 {
        return Ok(MatchResult::default());
    }
    if n_gt > n_query {
        return Err(Error::Capacity(format!("{n_gt} ground truths exceed {n_query} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    // Rows of the working problem are ground truths, columns are queries,
    // both 1-based with index 0 as the virtual source.
    let (n, m) = (n_gt, n_query);
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    Ok(MatchResult { pairs })
}
