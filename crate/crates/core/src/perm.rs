//! Permutations of `{0..m-1}` and their matrix form.
//!
//! A [`Permutation`] stores `mapping[i] = π(i)`. The associated permutation
//! matrix has `P[i][j] = 1` iff `i = π(j)`, so that acting on a vector
//! moves the entry at position `j` to position `π(j)`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &v in &mapping {
            ensure!(
                v < mapping.len(),
                Permutation,
                "value {v} out of range for length {}",
                mapping.len()
            );
            ensure!(!seen[v], Permutation, "value {v} appears twice");
            seen[v] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            mapping: (0..m).collect(),
        }
    }

    /// Transposition of `a` and `b` on `{0..m-1}`.
    pub fn swap(m: usize, a: usize, b: usize) -> Self {
        let mut p = Self::identity(m);
        p.mapping.swap(a, b);
        p
    }

    pub fn random<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..m).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    #[inline]
    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &v) in self.mapping.iter().enumerate() {
            inv[v] = i;
        }
        Self { mapping: inv }
    }

    /// `self ∘ other`, i.e. `other` is applied first.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        ensure!(
            self.len() == other.len(),
            Permutation,
            "cannot compose permutations of length {} and {}",
            self.len(),
            other.len()
        );
        Ok(Self {
            mapping: other.mapping.iter().map(|&i| self.mapping[i]).collect(),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &v)| i == v)
    }

    /// Dense row-major `m×m` permutation matrix.
    pub fn matrix(&self) -> Vec<f64> {
        let m = self.len();
        let mut p = vec![0.0; m * m];
        for j in 0..m {
            p[self.mapping[j] * m + j] = 1.0;
        }
        p
    }

    /// Reorders a sequence: position `π(i)` of the result holds `items[i]`.
    pub fn reorder<T: Clone>(&self, items: &[T]) -> Vec<T> {
        let inv = self.inverse();
        (0..items.len())
            .map(|i| items[inv.mapping[i]].clone())
            .collect()
    }
}

/// All `m!` permutations of `{0..m-1}` in lexicographic order.
pub fn all_permutations(m: usize) -> Vec<Permutation> {
    let mut current: Vec<usize> = (0..m).collect();
    let mut out = vec![Permutation {
        mapping: current.clone(),
    }];
    loop {
        // next lexicographic permutation
        let Some(i) = (1..m).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..m).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(Permutation {
            mapping: current.clone(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_bijection() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
        assert!(Permutation::new(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in 0..7 {
            let p = Permutation::random(m, &mut rng);
            assert!(p.compose(&p.inverse()).unwrap().is_identity());
            assert!(p.inverse().compose(&p).unwrap().is_identity());
        }
    }

    #[test]
    fn enumerates_factorial_many() {
        assert_eq!(all_permutations(0).len(), 1);
        assert_eq!(all_permutations(1).len(), 1);
        assert_eq!(all_permutations(4).len(), 24);
        let all = all_permutations(5);
        assert_eq!(all.len(), 120);
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 120);
    }

    #[test]
    fn matrix_moves_entry_j_to_pi_j() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let mat = p.matrix();
        let x = [10.0, 20.0, 30.0];
        let y: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| mat[i * 3 + j] * x[j]).sum())
            .collect();
        assert_eq!(y, vec![20.0, 30.0, 10.0]);
        assert_eq!(p.reorder(&x), y);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = Permutation::new(vec![1, 2, 0]).unwrap();
        let b = Permutation::swap(3, 0, 1);
        let ab = a.compose(&b).unwrap();
        for i in 0..3 {
            assert_eq!(ab.apply(i), a.apply(b.apply(i)));
        }
    }
}
