//! Datasets in the graph-kernel benchmark text format, histogram base
//! features, stratified splits and target standardization.

mod features;
mod split;
pub mod synthetic;
mod tu;

pub use features::histogram_features;
pub use split::{stratified_split, SplitPlan};
pub use tu::{load_tu_dataset, write_tu_dataset};

use crate::error::{ensure, Result};
use crate::graph::Graph;
use crate::model::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    /// Discrete vertex labels in `0..label_count` per graph.
    pub node_labels: Vec<Vec<usize>>,
    pub label_count: usize,
    pub targets: Vec<Target>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        graphs: Vec<Graph>,
        node_labels: Vec<Vec<usize>>,
        label_count: usize,
        targets: Vec<Target>,
    ) -> Result<Self> {
        ensure!(
            graphs.len() == targets.len() && graphs.len() == node_labels.len(),
            Dataset,
            "{} graphs, {} label lists, {} targets",
            graphs.len(),
            node_labels.len(),
            targets.len()
        );
        for (g, l) in graphs.iter().zip(&node_labels) {
            ensure!(l.len() == g.n(), Dataset, "label list does not match graph size");
            ensure!(
                l.iter().all(|&x| x < label_count),
                Dataset,
                "node label out of range 0..{label_count}"
            );
        }
        let kinds = targets.iter().filter(|t| matches!(t, Target::Class(_))).count();
        ensure!(
            kinds == 0 || kinds == targets.len(),
            Dataset,
            "targets mix classes and real values"
        );
        if let Some(Target::Real(first)) = targets.first() {
            ensure!(
                targets
                    .iter()
                    .all(|t| matches!(t, Target::Real(y) if y.len() == first.len())),
                Dataset,
                "real targets have unequal dimension"
            );
        }
        Ok(Self {
            name: name.into(),
            graphs,
            node_labels,
            label_count,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn task(&self) -> Task {
        match self.targets.first() {
            Some(Target::Real(_)) => Task::Regression,
            _ => Task::Classification,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.targets
            .iter()
            .filter_map(|t| match t {
                Target::Class(c) => Some(c + 1),
                Target::Real(_) => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn target_dim(&self) -> usize {
        match self.targets.first() {
            Some(Target::Real(y)) => y.len(),
            _ => 0,
        }
    }

    /// Width of the model output needed for this dataset.
    pub fn output_dim(&self) -> usize {
        match self.task() {
            Task::Classification => self.num_classes(),
            Task::Regression => self.target_dim(),
        }
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        match self.targets[i] {
            Target::Class(c) => Some(c),
            Target::Real(_) => None,
        }
    }

    /// Replaces every vertex feature with the one-hot encoding of its label.
    pub fn with_one_hot_features(&self) -> Result<Self> {
        self.map_features(|g, labels| {
            Ok(labels
                .iter()
                .map(|&l| {
                    let mut v = vec![0.0; self.label_count];
                    v[l] = 1.0;
                    v
                })
                .collect::<Vec<_>>())
            .and_then(|f| g.with_labels(f))
        })
    }

    /// Replaces every vertex feature with its distance-histogram vector.
    pub fn with_histogram_features(&self, depth: usize) -> Result<Self> {
        self.map_features(|g, labels| {
            g.with_labels(histogram_features(g, labels, depth, self.label_count)?)
        })
    }

    fn map_features(&self, f: impl Fn(&Graph, &[usize]) -> Result<Graph>) -> Result<Self> {
        let graphs = self
            .graphs
            .iter()
            .zip(&self.node_labels)
            .map(|(g, l)| f(g, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            graphs,
            ..self.clone()
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            node_labels: indices.iter().map(|&i| self.node_labels[i].clone()).collect(),
            label_count: self.label_count,
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

/// Per-dimension statistics used to standardize real targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetStats {
    pub fn normalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Standardizes every target dimension to mean 0 and population standard
/// deviation 1.
pub fn normalize_targets(ds: &Dataset) -> Result<(Dataset, TargetStats)> {
    ensure!(
        ds.task() == Task::Regression && !ds.is_empty(),
        Dataset,
        "normalization needs a non-empty regression dataset"
    );
    let dim = ds.target_dim();
    let rows: Vec<&Vec<f64>> = ds
        .targets
        .iter()
        .map(|t| match t {
            Target::Real(y) => y,
            Target::Class(_) => unreachable!("checked regression"),
        })
        .collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for d in 0..dim {
        mean[d] = rows.iter().map(|y| y[d]).sum::<f64>() / n;
        let var = rows.iter().map(|y| (y[d] - mean[d]).powi(2)).sum::<f64>() / n;
        ensure!(var > 0.0, Dataset, "target dimension {d} has zero variance");
        std[d] = var.sqrt();
    }
    let stats = TargetStats { mean, std };
    let targets = rows
        .iter()
        .map(|y| Target::Real(stats.normalize(y)))
        .collect();
    Ok((
        Dataset {
            targets,
            ..ds.clone()
        },
        stats,
    ))
}
