//! Undirected weighted graphs with per-vertex feature vectors.

use std::collections::VecDeque;

use crate::error::{ensure, Result};
use crate::perm::Permutation;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    adjacency: Vec<f64>,
    label_dim: usize,
    labels: Vec<f64>,
}

impl Graph {
    /// `adjacency` is row-major `n×n`; `labels` holds `n` rows of equal length.
    pub fn new(n: usize, adjacency: Vec<f64>, labels: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(
            adjacency.len() == n * n,
            Graph,
            "adjacency has {} entries, expected {}",
            adjacency.len(),
            n * n
        );
        ensure!(
            labels.len() == n,
            Graph,
            "{} label rows for {n} vertices",
            labels.len()
        );
        let label_dim = labels.first().map_or(0, Vec::len);
        ensure!(
            labels.iter().all(|l| l.len() == label_dim),
            Graph,
            "label rows have unequal dimension"
        );
        for i in 0..n {
            ensure!(
                adjacency[i * n + i] == 0.0,
                Graph,
                "self-loop at vertex {i}"
            );
            for j in 0..i {
                ensure!(
                    adjacency[i * n + j] == adjacency[j * n + i],
                    Graph,
                    "adjacency not symmetric at ({i},{j})"
                );
            }
        }
        Ok(Self {
            n,
            adjacency,
            label_dim,
            labels: labels.into_iter().flatten().collect(),
        })
    }

    /// Unweighted graph from an undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], labels: Vec<Vec<f64>>) -> Result<Self> {
        let mut adjacency = vec![0.0; n * n];
        for &(a, b) in edges {
            ensure!(a < n && b < n, Graph, "edge ({a},{b}) out of range for {n} vertices");
            ensure!(a != b, Graph, "self-loop at vertex {a}");
            adjacency[a * n + b] = 1.0;
            adjacency[b * n + a] = 1.0;
        }
        Self::new(n, adjacency, labels)
    }

    /// Every vertex labelled with the scalar feature `1`.
    pub fn unlabeled(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_edges(n, edges, vec![vec![1.0]; n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn label(&self, i: usize) -> &[f64] {
        &self.labels[i * self.label_dim..(i + 1) * self.label_dim]
    }

    pub fn labels(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.label(i).to_vec()).collect()
    }

    /// Same topology, new per-vertex features.
    pub fn with_labels(&self, labels: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.n, self.adjacency.clone(), labels)
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.weight(i, j) != 0.0).collect()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n)
            .map(|i| (0..i).filter(|&j| self.weight(i, j) != 0.0).count())
            .sum()
    }

    /// Hop distances from `source`; `None` for unreachable vertices.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap();
            for w in self.neighbors(v) {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

/// Relabels vertex `i` as `σ(i)`: `A'[i][j] = A[σ⁻¹(i)][σ⁻¹(j)]` and
/// `l'_i = l_{σ⁻¹(i)}`.
pub fn permute_graph(g: &Graph, sigma: &Permutation) -> Result<Graph> {
    ensure!(
        sigma.len() == g.n,
        Graph,
        "permutation of length {} applied to a graph with {} vertices",
        sigma.len(),
        g.n
    );
    let n = g.n;
    let inv = sigma.inverse();
    let mut adjacency = vec![0.0; n * n];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let si = inv.apply(i);
        for j in 0..n {
            adjacency[i * n + j] = g.weight(si, inv.apply(j));
        }
        labels.push(g.label(si).to_vec());
    }
    Graph::new(n, adjacency, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The six-vertex example: a hub joined to a path end, a triangle and a
    /// second triangle (0-indexed).
    fn six_vertex_example() -> Graph {
        Graph::unlabeled(6, &[(0, 1), (1, 2), (2, 3), (3, 1), (1, 4), (4, 5), (5, 1)]).unwrap()
    }

    #[test]
    fn rejects_invalid_adjacency() {
        assert!(Graph::new(2, vec![0.0, 1.0, 0.0, 0.0], vec![vec![]; 2]).is_err());
        assert!(Graph::new(2, vec![1.0, 0.0, 0.0, 0.0], vec![vec![]; 2]).is_err());
        assert!(Graph::new(2, vec![0.0; 4], vec![vec![1.0], vec![]]).is_err());
        assert!(Graph::from_edges(3, &[(0, 0)], vec![vec![]; 3]).is_err());
    }

    #[test]
    fn identity_and_inverse_cancel() {
        let g = six_vertex_example()
            .with_labels((0..6).map(|i| vec![i as f64]).collect())
            .unwrap();
        assert_eq!(permute_graph(&g, &Permutation::identity(6)).unwrap(), g);
        let s = Permutation::new(vec![2, 0, 1, 5, 3, 4]).unwrap();
        let back = permute_graph(&permute_graph(&g, &s).unwrap(), &s.inverse()).unwrap();
        assert_eq!(back, g);
        assert!(permute_graph(&g, &Permutation::identity(5)).is_err());
    }

    #[test]
    fn relabelling_matches_the_renumbered_drawing() {
        // 1→3, 2→1, 3→2, 4→6, 5→4, 6→5 in 1-indexed form
        let sigma = Permutation::new(vec![2, 0, 1, 5, 3, 4]).unwrap();
        let g2 = permute_graph(&six_vertex_example(), &sigma).unwrap();
        let expected_rows: [&[usize]; 6] = [
            &[2, 3, 4, 5, 6],
            &[1, 6],
            &[1],
            &[1, 5],
            &[1, 4],
            &[1, 2],
        ];
        for (i, row) in expected_rows.iter().enumerate() {
            let nb: Vec<usize> = g2.neighbors(i).iter().map(|v| v + 1).collect();
            assert_eq!(&nb, row, "row {}", i + 1);
        }
    }

    #[test]
    fn labels_follow_their_vertex() {
        let g = Graph::from_edges(3, &[(0, 1)], vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = Permutation::new(vec![1, 2, 0]).unwrap();
        let g2 = permute_graph(&g, &s).unwrap();
        for i in 0..3 {
            assert_eq!(g2.label(s.apply(i)), g.label(i));
        }
        assert_eq!(g2.weight(1, 2), 1.0);
    }

    #[test]
    fn bfs_on_a_path() {
        let g = Graph::unlabeled(4, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.bfs_distances(0), vec![Some(0), Some(1), Some(2), None]);
        assert_eq!(g.edge_count(), 2);
    }
}
