use crate::error::{ensure, Result};
use crate::graph::Graph;

/// Per-vertex concatenation of `H_1(i) … H_depth(i)`, where `H_j(i)` holds the
/// relative label frequencies among vertices at shortest-path distance
/// exactly `j` from `i` (zero when there are none).
pub fn histogram_features(
    g: &Graph,
    labels: &[usize],
    depth: usize,
    label_count: usize,
) -> Result<Vec<Vec<f64>>> {
    ensure!(labels.len() == g.n(), Dataset, "{} labels for {} vertices", labels.len(), g.n());
    ensure!(
        labels.iter().all(|&l| l < label_count),
        Dataset,
        "label out of range 0..{label_count}"
    );
    let d = label_count;
    Ok((0..g.n())
        .map(|i| {
            let mut feat = vec![0.0; depth * d];
            let mut counts = vec![0usize; depth];
            for (v, dist) in g.bfs_distances(i).into_iter().enumerate() {
                if let Some(j) = dist.filter(|&j| j >= 1 && j <= depth) {
                    feat[(j - 1) * d + labels[v]] += 1.0;
                    counts[j - 1] += 1;
                }
            }
            for (j, &c) in counts.iter().enumerate() {
                if c > 0 {
                    for x in &mut feat[j * d..(j + 1) * d] {
                        *x /= c as f64;
                    }
                }
            }
            feat
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perm::Permutation;

    #[test]
    fn single_vertex_is_all_zero() {
        let g = Graph::unlabeled(1, &[]).unwrap();
        let f = histogram_features(&g, &[0], 10, 3).unwrap();
        assert_eq!(f, vec![vec![0.0; 30]]);
    }

    #[test]
    fn path_histograms() {
        let g = Graph::unlabeled(3, &[(0, 1), (1, 2)]).unwrap();
        let f = histogram_features(&g, &[0, 1, 0], 10, 2).unwrap();
        assert_eq!(&f[0][0..2], &[0.0, 1.0]);
        assert_eq!(&f[0][2..4], &[1.0, 0.0]);
        assert!(f[0][4..].iter().all(|&x| x == 0.0));
        // the middle vertex sees both ends at distance 1
        assert_eq!(&f[1][0..2], &[1.0, 0.0]);
    }

    #[test]
    fn blocks_sum_to_one_or_zero() {
        let g = Graph::unlabeled(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 5)]).unwrap();
        let labels = [0, 1, 2, 0, 1, 2];
        for row in histogram_features(&g, &labels, 10, 3).unwrap() {
            for block in row.chunks(3) {
                let s: f64 = block.iter().sum();
                assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_follow_relabelling() {
        let g = Graph::unlabeled(5, &[(0, 1), (1, 2), (2, 3), (1, 4)]).unwrap();
        let labels = [0, 1, 1, 0, 2];
        let sigma = Permutation::new(vec![3, 0, 4, 1, 2]).unwrap();
        let g2 = crate::graph::permute_graph(&g, &sigma).unwrap();
        let labels2 = sigma.reorder(&labels);
        let f = histogram_features(&g, &labels, 4, 3).unwrap();
        let f2 = histogram_features(&g2, &labels2, 4, 3).unwrap();
        for i in 0..5 {
            assert_eq!(f[i], f2[sigma.apply(i)]);
        }
    }
}
