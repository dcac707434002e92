//! Molecule-like stand-in graphs for smoke tests and timing when the real
//! benchmark files are not on disk. Not a substitute for measuring accuracy.
//!
//! Each graph is a chain of fused six-rings with carbon-like atoms (label 0),
//! a few random substituents, and one marker group on a ring atom. Class 1
//! carries an N bonded to two O leaves; class 0 carries an N bonded to one O
//! and one C leaf. Labels follow a 7-symbol alphabet like MUTAG's.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::Result;
use crate::graph::Graph;
use crate::model::Target;

pub const LABEL_COUNT: usize = 7;
const C: usize = 0;
const N: usize = 1;
const O: usize = 2;

struct Builder {
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl Builder {
    fn atom(&mut self, label: usize) -> usize {
        self.labels.push(label);
        self.labels.len() - 1
    }

    fn bond(&mut self, a: usize, b: usize) {
        self.edges.push((a, b));
    }
}

fn molecule(class: usize, rng: &mut ChaCha8Rng) -> (Graph, Vec<usize>) {
    let mut b = Builder {
        labels: Vec::new(),
        edges: Vec::new(),
    };
    // First ring, then each further ring shares one edge with the previous.
    let first: Vec<usize> = (0..6).map(|_| b.atom(C)).collect();
    for i in 0..6 {
        b.bond(first[i], first[(i + 1) % 6]);
    }
    let mut ring_atoms = first.clone();
    let mut shared = (first[2], first[3]);
    for _ in 1..rng.gen_range(1..=3) {
        let fresh: Vec<usize> = (0..4).map(|_| b.atom(C)).collect();
        b.bond(shared.1, fresh[0]);
        for w in fresh.windows(2) {
            b.bond(w[0], w[1]);
        }
        b.bond(fresh[3], shared.0);
        ring_atoms.extend(&fresh);
        shared = (fresh[1], fresh[2]);
    }
    // Only atoms with ring degree 2 take substituents, keeping valence ≤ 3.
    let mut degree = vec![0usize; b.labels.len()];
    for &(u, v) in &b.edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut free: Vec<usize> = ring_atoms.into_iter().filter(|&a| degree[a] == 2).collect();
    let marker_at = free.swap_remove(rng.gen_range(0..free.len()));
    let n = b.atom(N);
    b.bond(marker_at, n);
    let o = b.atom(O);
    b.bond(n, o);
    let other = b.atom(if class == 1 { O } else { C });
    b.bond(n, other);
    for &a in &free {
        if rng.gen_bool(0.3) {
            let label = *[C, C, O, 3, 4, 5, 6].get(rng.gen_range(0..7)).unwrap();
            let s = b.atom(label);
            b.bond(a, s);
        }
    }
    let labels = b.labels;
    let onehot = labels
        .iter()
        .map(|&l| {
            let mut v = vec![0.0; LABEL_COUNT];
            v[l] = 1.0;
            v
        })
        .collect();
    let g = Graph::from_edges(labels.len(), &b.edges, onehot).expect("well-formed molecule");
    (g, labels)
}

/// `count` graphs alternating between the two classes, deterministic in
/// `seed`.
pub fn molecule_like(count: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 2;
        let (g, l) = molecule(class, &mut rng);
        graphs.push(g);
        labels.push(l);
        targets.push(Target::Class(class));
    }
    Dataset::new("molecule-like", graphs, labels, LABEL_COUNT, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_classes() {
        let ds = molecule_like(40, 3).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.num_classes(), 2);
        for (g, l) in ds.graphs.iter().zip(&ds.node_labels) {
            assert!((9..=30).contains(&g.n()), "{}", g.n());
            assert!((0..g.n()).all(|i| g.neighbors(i).len() <= 3));
            assert!((0..g.n()).all(|i| g.bfs_distances(0)[i].is_some()));
            assert_eq!(l.iter().filter(|&&x| x == N).count(), 1);
        }
        assert_eq!(molecule_like(40, 3).unwrap(), ds);
        assert_ne!(molecule_like(40, 4).unwrap(), ds);
    }

    #[test]
    fn marker_group_decides_the_class() {
        let ds = molecule_like(20, 9).unwrap();
        for i in 0..ds.len() {
            let (g, l) = (&ds.graphs[i], &ds.node_labels[i]);
            let n = l.iter().position(|&x| x == N).unwrap();
            let oxygens = g.neighbors(n).iter().filter(|&&u| l[u] == O).count();
            assert_eq!(ds.class_of(i), Some(oxygens - 1));
        }
    }
}
