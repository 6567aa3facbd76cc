//! Self-attention blocking mask for the joint `[ray groups | object queries]`
//! query set.
//!
//! Object queries never see ray queries, ray groups never see each other,
//! and ray queries may read the object queries.

use std::fmt::Write as _;

/// `blocked(row, col) == true` forbids query `row` from attending to key `col`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_total: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    /// Mask with nothing blocked.
    pub fn open(n: usize) -> Self {
        Self { n_total: n, blocked: vec![false; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n_total
    }

    pub fn is_empty(&self) -> bool {
        self.n_total == 0
    }

    #[inline]
    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.n_total + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.blocked[row * self.n_total..(row + 1) * self.n_total]
    }

    #[cfg(test)]
    pub(crate) fn set_blocked(&mut self, row: usize, col: usize, blocked: bool) {
        self.blocked[row * self.n_total + col] = blocked;
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|b| **b).count()
    }

    /// 0/1 grid, one row per line.
    pub fn to_grid_text(&self) -> String {
        let mut s = String::with_capacity(self.n_total * (self.n_total + 1));
        for r in 0..self.n_total {
            for &b in self.row(r) {
                s.push(if b { '1' } else { '0' });
            }
            let _ = writeln!(s);
        }
        s
    }
}

pub fn build_attention_mask(n_obj: usize, group_sizes: &[usize]) -> AttentionMask {
    let n_ray: usize = group_sizes.iter().sum();
    let n = n_ray + n_obj;
    let mut mask = AttentionMask::open(n);
    // Group id per ray row; object rows get None.
    let mut owner = Vec::with_capacity(n);
    for (g, &size) in group_sizes.iter().enumerate() {
        assert!(size >= 1, "ray groups must be nonempty");
        owner.extend(std::iter::repeat(Some(g)).take(size));
    }
    owner.extend(std::iter::repeat(None).take(n_obj));
    for r in 0..n {
        for c in 0..n {
            mask.blocked[r * n + c] = match (owner[r], owner[c]) {
                (None, Some(_)) => true,
                (Some(a), Some(b)) => a != b,
                _ => false,
            };
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_with_objects() {
        let m = build_attention_mask(2, &[3]);
        assert_eq!(m.len(), 5);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m.is_blocked(r, c), r >= 3 && c < 3, "({r},{c})");
            }
        }
    }

    #[test]
    fn cross_group_blocking() {
        let m = build_attention_mask(0, &[2, 2]);
        assert_eq!(m.to_grid_text(), "0011\n0011\n1100\n1100\n");
    }

    #[test]
    fn no_groups_is_open() {
        let m = build_attention_mask(3, &[]);
        assert_eq!(m, AttentionMask::open(3));
        assert_eq!(m.blocked_count(), 0);
    }

    #[test]
    fn structural_invariants() {
        let m = build_attention_mask(4, &[1, 3, 2]);
        let n = m.len();
        for i in 0..n {
            assert!(!m.is_blocked(i, i));
            // Every row keeps at least its own key.
            assert!(m.row(i).iter().any(|b| !b));
        }
        for r in 6..n {
            for c in 6..n {
                assert!(!m.is_blocked(r, c));
            }
            for c in 0..6 {
                assert!(m.is_blocked(r, c));
            }
        }
        for r in 0..6 {
            for c in 6..n {
                assert!(!m.is_blocked(r, c));
            }
        }
    }
}
