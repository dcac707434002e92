//! Layered composition schemes: one node per vertex per level, each node's
//! receptive field the union of its children's fields, plus a root.

use crate::error::{ensure, Result};
use crate::graph::Graph;
use crate::perm::Permutation;
use crate::tensor::DenseTensor;

/// Ordered set of vertices a neuron's activation refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReceptiveField {
    vertices: Vec<usize>,
    level: usize,
}

impl ReceptiveField {
    pub fn new(vertices: Vec<usize>, level: usize) -> Result<Self> {
        let mut sorted = vertices.clone();
        sorted.sort_unstable();
        ensure!(
            sorted.windows(2).all(|w| w[0] != w[1]),
            Invalid,
            "receptive field {vertices:?} has duplicates"
        );
        ensure!(
            level > 0 || vertices.len() == 1,
            Invalid,
            "level-0 fields are singletons, got {vertices:?}"
        );
        Ok(Self { vertices, level })
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Position of `vertex` inside the field.
    pub fn position(&self, vertex: usize) -> Option<usize> {
        self.vertices.iter().position(|&v| v == vertex)
    }

    /// The same vertex set reordered: position `π(a)` holds the vertex that
    /// was at position `a`.
    pub fn reordered(&self, pi: &Permutation) -> Result<Self> {
        ensure!(
            pi.len() == self.len(),
            Permutation,
            "permutation of length {} for a field of size {}",
            pi.len(),
            self.len()
        );
        Ok(Self {
            vertices: pi.reorder(&self.vertices),
            level: self.level,
        })
    }
}

/// Nodes `(level, vertex)` for levels `0..=L`, plus a root collecting every
/// level-`L` node.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionScheme {
    n: usize,
    fields: Vec<Vec<ReceptiveField>>,
    children: Vec<Vec<Vec<usize>>>,
}

impl CompositionScheme {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of aggregation levels `L`.
    pub fn levels(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn field(&self, level: usize, vertex: usize) -> &ReceptiveField {
        &self.fields[level][vertex]
    }

    pub fn level_fields(&self, level: usize) -> &[ReceptiveField] {
        &self.fields[level]
    }

    /// Child vertices (one level down) of node `(level, vertex)`; empty at level 0.
    pub fn children(&self, level: usize, vertex: usize) -> &[usize] {
        &self.children[level][vertex]
    }

    /// Node id of `(level, vertex)`; the root is `root_id()`.
    pub fn node_id(&self, level: usize, vertex: usize) -> usize {
        level * self.n + vertex
    }

    pub fn root_id(&self) -> usize {
        self.fields.len() * self.n
    }

    /// Child node ids of any node, root included.
    pub fn child_edges(&self, node: usize) -> Vec<usize> {
        if node == self.root_id() {
            let l = self.levels();
            return (0..self.n).map(|v| self.node_id(l, v)).collect();
        }
        let (level, vertex) = (node / self.n, node % self.n);
        if level == 0 {
            return Vec::new();
        }
        self.children[level][vertex]
            .iter()
            .map(|&c| self.node_id(level - 1, c))
            .collect()
    }

    /// Vertices covered by the root.
    pub fn root_field(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.fields[self.levels()]
            .iter()
            .flat_map(|f| f.vertices().iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Builds the layered scheme. Children of `(ℓ, i)` are the level-`ℓ−1` nodes
/// of the closed neighbourhood `N(i) ∪ {i}`; fields are stored ascending.
pub fn build_scheme(g: &Graph, levels: usize) -> Result<CompositionScheme> {
    ensure!(levels >= 1, Invalid, "a scheme needs at least one level");
    let n = g.n();
    let closed: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut nb = g.neighbors(i);
            nb.push(i);
            nb.sort_unstable();
            nb
        })
        .collect();
    let mut fields = Vec::with_capacity(levels + 1);
    let mut children = Vec::with_capacity(levels + 1);
    fields.push(
        (0..n)
            .map(|i| ReceptiveField::new(vec![i], 0))
            .collect::<Result<Vec<_>>>()?,
    );
    children.push(vec![Vec::new(); n]);
    for level in 1..=levels {
        let prev: &Vec<ReceptiveField> = &fields[level - 1];
        let mut level_fields = Vec::with_capacity(n);
        for nb in &closed {
            let mut member = vec![false; n];
            for &c in nb {
                for &v in prev[c].vertices() {
                    member[v] = true;
                }
            }
            let vertices = (0..n).filter(|&v| member[v]).collect();
            level_fields.push(ReceptiveField::new(vertices, level)?);
        }
        fields.push(level_fields);
        children.push(closed.clone());
    }
    Ok(CompositionScheme {
        n,
        fields,
        children,
    })
}

/// True iff `σ` maps every node of `s1` onto the node of `s2` at the same
/// level for vertex `σ(i)`, with matching field and children as sets.
pub fn scheme_isomorphism_check(
    s1: &CompositionScheme,
    s2: &CompositionScheme,
    sigma: &Permutation,
) -> bool {
    if s1.n != s2.n || s1.levels() != s2.levels() || sigma.len() != s1.n {
        return false;
    }
    let mapped_set = |xs: &[usize]| {
        let mut v: Vec<usize> = xs.iter().map(|&x| sigma.apply(x)).collect();
        v.sort_unstable();
        v
    };
    let sorted = |xs: &[usize]| {
        let mut v = xs.to_vec();
        v.sort_unstable();
        v
    };
    for level in 0..=s1.levels() {
        for i in 0..s1.n {
            let j = sigma.apply(i);
            if mapped_set(s1.field(level, i).vertices()) != sorted(s2.field(level, j).vertices()) {
                return false;
            }
            if mapped_set(s1.children(level, i)) != sorted(s2.children(level, j)) {
                return false;
            }
        }
    }
    mapped_set(&s1.root_field()) == s2.root_field()
}

/// `[A↓]_{a,b} = A[p_a][p_b]` for the field `P = (p_1..p_m)`.
pub fn restrict_adjacency(g: &Graph, field: &ReceptiveField) -> Result<DenseTensor> {
    let p = field.vertices();
    for &v in p {
        ensure!(v < g.n(), Graph, "vertex {v} out of range for {} vertices", g.n());
    }
    let m = p.len();
    let mut data = Vec::with_capacity(m * m);
    for &a in p {
        for &b in p {
            data.push(g.weight(a, b));
        }
    }
    DenseTensor::new(vec![m, m], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::permute_graph;
    use crate::perm::all_permutations;
    use crate::tensor::permute_action;

    fn path3() -> Graph {
        Graph::unlabeled(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn path_fields_include_self() {
        let s = build_scheme(&path3(), 1).unwrap();
        // middle vertex sees the whole path, an end vertex sees itself and the middle
        assert_eq!(s.field(1, 1).vertices(), &[0, 1, 2]);
        assert_eq!(s.field(1, 0).vertices(), &[0, 1]);
        assert_eq!(s.field(0, 2).vertices(), &[2]);
        assert_eq!(s.children(1, 0), &[0, 1]);
    }

    #[test]
    fn single_vertex_and_isolated_vertices() {
        let g = Graph::unlabeled(1, &[]).unwrap();
        let s = build_scheme(&g, 3).unwrap();
        for l in 0..=3 {
            assert_eq!(s.field(l, 0).vertices(), &[0]);
        }
        let g = Graph::unlabeled(3, &[(0, 1)]).unwrap();
        let s = build_scheme(&g, 2).unwrap();
        assert_eq!(s.field(2, 2).vertices(), &[2]);
        assert!(build_scheme(&g, 0).is_err());
    }

    #[test]
    fn complete_graph_saturates() {
        let edges: Vec<_> = (0..4).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
        let s = build_scheme(&Graph::unlabeled(4, &edges).unwrap(), 2).unwrap();
        for i in 0..4 {
            assert_eq!(s.field(2, i).vertices(), &[0, 1, 2, 3]);
        }
        assert_eq!(s.root_field(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn child_edges_point_one_level_down() {
        let s = build_scheme(&path3(), 2).unwrap();
        assert_eq!(s.child_edges(s.root_id()), vec![6, 7, 8]);
        assert_eq!(s.child_edges(s.node_id(2, 0)), vec![3, 4]);
        assert!(s.child_edges(s.node_id(0, 1)).is_empty());
    }

    #[test]
    fn isomorphism_check_identity_and_relabelling() {
        let g = Graph::unlabeled(5, &[(0, 1), (1, 2), (2, 3), (1, 4)]).unwrap();
        let s = build_scheme(&g, 2).unwrap();
        assert!(scheme_isomorphism_check(&s, &s, &Permutation::identity(5)));
        for sigma in all_permutations(5) {
            let s2 = build_scheme(&permute_graph(&g, &sigma).unwrap(), 2).unwrap();
            assert!(scheme_isomorphism_check(&s, &s2, &sigma));
        }
    }

    #[test]
    fn non_isomorphic_graphs_never_match() {
        // path on 4 vertices vs star on 4 vertices
        let p = build_scheme(&Graph::unlabeled(4, &[(0, 1), (1, 2), (2, 3)]).unwrap(), 2).unwrap();
        let st = build_scheme(&Graph::unlabeled(4, &[(0, 1), (0, 2), (0, 3)]).unwrap(), 2).unwrap();
        assert!(all_permutations(4)
            .iter()
            .all(|sigma| !scheme_isomorphism_check(&p, &st, sigma)));
    }

    #[test]
    fn restriction_examples() {
        let g = path3();
        let all = ReceptiveField::new(vec![0, 1, 2], 1).unwrap();
        assert_eq!(restrict_adjacency(&g, &all).unwrap().data(), g.adjacency());
        let ends = ReceptiveField::new(vec![0, 2], 1).unwrap();
        assert_eq!(restrict_adjacency(&g, &ends).unwrap(), DenseTensor::zeros(vec![2, 2]));
        let bad = ReceptiveField::new(vec![0, 3], 1).unwrap();
        assert!(restrict_adjacency(&g, &bad).is_err());
    }

    #[test]
    fn restriction_is_a_second_order_p_tensor() {
        let g = Graph::unlabeled(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]).unwrap();
        let field = ReceptiveField::new(vec![0, 1, 3, 4], 1).unwrap();
        let base = restrict_adjacency(&g, &field).unwrap();
        for pi in all_permutations(4) {
            let moved = restrict_adjacency(&g, &field.reordered(&pi).unwrap()).unwrap();
            assert_eq!(moved, permute_action(&base, &pi).unwrap());
        }
    }

    #[test]
    fn field_validation() {
        assert!(ReceptiveField::new(vec![1, 1], 1).is_err());
        assert!(ReceptiveField::new(vec![0, 1], 0).is_err());
    }
}
