//! Generalized contractions: each group of indices is tied by a shared
//! diagonal and summed. A group of size one is a plain projection.

use std::fmt;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContractionSpec {
    order_in: usize,
    groups: Vec<Vec<usize>>,
}

impl ContractionSpec {
    /// Groups are normalized: each sorted ascending, groups ordered by their
    /// smallest index.
    pub fn new(order_in: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; order_in];
        let mut groups = groups;
        for g in &mut groups {
            ensure!(!g.is_empty(), Contraction, "empty index group");
            g.sort_unstable();
            for &i in g.iter() {
                ensure!(
                    i < order_in,
                    Contraction,
                    "index {i} out of range for order {order_in}"
                );
                ensure!(!seen[i], Contraction, "index {i} used twice");
                seen[i] = true;
            }
        }
        groups.sort_by_key(|g| g[0]);
        Ok(Self { order_in, groups })
    }

    /// Projection (summation) along `dims`.
    pub fn projection(order_in: usize, dims: &[usize]) -> Result<Self> {
        Self::new(order_in, dims.iter().map(|&d| vec![d]).collect())
    }

    /// Sum over every index.
    pub fn full_projection(order_in: usize) -> Self {
        Self {
            order_in,
            groups: (0..order_in).map(|d| vec![d]).collect(),
        }
    }

    pub fn order_in(&self) -> usize {
        self.order_in
    }

    pub fn order_out(&self) -> usize {
        self.order_in - self.groups.iter().map(Vec::len).sum::<usize>()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn is_projection(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    /// Indices that survive, in their original relative order.
    pub fn survivors(&self) -> Vec<usize> {
        let mut removed = vec![false; self.order_in];
        for &i in self.groups.iter().flatten() {
            removed[i] = true;
        }
        (0..self.order_in).filter(|&i| !removed[i]).collect()
    }

    pub fn removed(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.groups.iter().flatten().copied().collect();
        r.sort_unstable();
        r
    }

    /// Partition shape, e.g. `"1+2"`: group sizes ascending, joined by `+`.
    pub fn case_tag(&self) -> String {
        let sizes = self.sorted_sizes();
        if sizes.is_empty() {
            return "identity".to_string();
        }
        sizes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }

    fn sorted_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.groups.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        sizes
    }

    /// The same contraction applied to a tensor with `offset` extra leading
    /// axes (e.g. a channel axis) that are left untouched.
    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            order_in: self.order_in + offset,
            groups: self
                .groups
                .iter()
                .map(|g| g.iter().map(|&i| i + offset).collect())
                .collect(),
        }
    }
}

impl fmt::Display for ContractionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                let inner: Vec<String> = g.iter().map(usize::to_string).collect();
                format!("{{{}}}", inner.join(","))
            })
            .collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// Every generalized contraction taking an order-`order_in` tensor down to
/// order `order_out`: a choice of removed index set plus a set partition of
/// it. No symmetry reduction is applied.
///
/// Ordering is stable: by partition shape (sorted group sizes, compared
/// lexicographically, so `1+1+1` < `1+2` < `3`), then by removed set in
/// lexicographic order, then by partition in restricted-growth-string order.
pub fn enumerate_contractions(order_in: usize, order_out: usize) -> Result<Vec<ContractionSpec>> {
    ensure!(
        order_out < order_in,
        Contraction,
        "need order_in > order_out, got {order_in} -> {order_out}"
    );
    let removed_count = order_in - order_out;
    let mut specs = Vec::new();
    for removed in combinations(order_in, removed_count) {
        for labels in restricted_growth_strings(removed_count) {
            let blocks = labels.iter().copied().max().map_or(0, |b| b + 1);
            let mut groups = vec![Vec::new(); blocks];
            for (pos, &b) in labels.iter().enumerate() {
                groups[b].push(removed[pos]);
            }
            specs.push(ContractionSpec::new(order_in, groups)?);
        }
    }
    // stable sort keeps removed-set and partition order within a shape
    specs.sort_by_key(ContractionSpec::sorted_sizes);
    Ok(specs)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Set partitions of `n` items as restricted growth strings, lexicographic.
fn restricted_growth_strings(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        let limit = if cur.is_empty() { 0 } else { max + 1 };
        for b in 0..=limit {
            cur.push(b);
            rec(cur, max.max(b), n, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        out.push(Vec::new());
    } else {
        rec(&mut Vec::with_capacity(n), 0, n, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, HashSet};

    fn bell(n: usize) -> usize {
        restricted_growth_strings(n).len()
    }

    #[test]
    fn bell_numbers() {
        assert_eq!(
            (0..6).map(bell).collect::<Vec<_>>(),
            vec![1, 1, 2, 5, 15, 52]
        );
    }

    #[test]
    fn fifty_ways_from_five_to_two() {
        let specs = enumerate_contractions(5, 2).unwrap();
        assert_eq!(specs.len(), 50);
        let distinct: HashSet<_> = specs.iter().collect();
        assert_eq!(distinct.len(), 50);
        let mut by_tag = BTreeMap::new();
        for s in &specs {
            *by_tag.entry(s.case_tag()).or_insert(0) += 1;
            assert_eq!(s.order_out(), 2);
        }
        assert_eq!(by_tag["1+1+1"], 10);
        assert_eq!(by_tag["1+2"], 30);
        assert_eq!(by_tag["3"], 10);
        assert!(specs[..10].iter().all(ContractionSpec::is_projection));
    }

    #[test]
    fn small_catalogs() {
        let s = enumerate_contractions(3, 2).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(ContractionSpec::is_projection));
        let s = enumerate_contractions(2, 1).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].groups(), &[vec![0]]);
        assert_eq!(s[1].groups(), &[vec![1]]);
        assert!(enumerate_contractions(2, 2).is_err());
        assert!(enumerate_contractions(2, 3).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ContractionSpec::new(3, vec![vec![0, 1], vec![1]]).is_err());
        assert!(ContractionSpec::new(3, vec![vec![3]]).is_err());
        assert!(ContractionSpec::new(3, vec![vec![]]).is_err());
        let s = ContractionSpec::new(4, vec![vec![3, 1], vec![0]]).unwrap();
        assert_eq!(s.groups(), &[vec![0], vec![1, 3]]);
        assert_eq!(s.survivors(), vec![2]);
        assert_eq!(s.order_out(), 1);
        assert_eq!(s.case_tag(), "1+2");
        assert_eq!(s.to_string(), "[{0} {1,3}]");
    }

    #[test]
    fn ordering_is_stable() {
        assert_eq!(
            enumerate_contractions(5, 2).unwrap(),
            enumerate_contractions(5, 2).unwrap()
        );
        let s = enumerate_contractions(5, 2).unwrap();
        assert_eq!(s[0].groups(), &[vec![0], vec![1], vec![2]]);
        assert_eq!(s[9].groups(), &[vec![2], vec![3], vec![4]]);
        assert_eq!(s[49].groups(), &[vec![2, 3, 4]]);
    }
}
