use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Task};
use crate::error::{ensure, CcnError, Result};
use crate::graph::Graph;
use crate::model::Target;

fn dataset_prefix(dir: &Path) -> Result<String> {
    if let Some(name) = dir.file_name().and_then(|n| n.to_str()) {
        if dir.join(format!("{name}_A.txt")).is_file() {
            return Ok(name.to_string());
        }
    }
    let entries = fs::read_dir(dir)
        .map_err(|e| CcnError::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut found = Vec::new();
    for entry in entries.flatten() {
        if let Some(stem) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix("_A.txt"))
        {
            found.push(stem.to_string());
        }
    }
    found.sort();
    match found.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(CcnError::Dataset(format!(
            "no *_A.txt edge file in {}",
            dir.display()
        ))),
        many => Err(CcnError::Dataset(format!(
            "several datasets in {}: {many:?}",
            dir.display()
        ))),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CcnError::Dataset(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_ints(path: &Path) -> Result<Vec<i64>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| {
            l.parse::<i64>().map_err(|_| {
                CcnError::Dataset(format!("{}:{n}: expected an integer, got {l:?}", path.display()))
            })
        })
        .collect()
}

/// Remaps arbitrary integer codes to `0..C` in ascending code order.
/// Node labels keep their integer value so that two files over the same
/// alphabet agree even when one of them lacks some labels; negative codes
/// shift everything up by the smallest one.
fn node_label_codes(codes: &[i64]) -> (Vec<usize>, usize) {
    let lo = codes.iter().copied().min().unwrap_or(0).min(0);
    let hi = codes.iter().copied().max().unwrap_or(-1);
    (
        codes.iter().map(|&c| (c - lo) as usize).collect(),
        (hi - lo + 1).max(0) as usize,
    )
}

fn remap(codes: &[i64]) -> (Vec<usize>, usize) {
    let distinct: BTreeSet<i64> = codes.iter().copied().collect();
    let index: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    (codes.iter().map(|c| index[c]).collect(), distinct.len())
}

/// Reads a dataset directory holding `DS_A.txt`, `DS_graph_indicator.txt`,
/// `DS_node_labels.txt` and either `DS_graph_labels.txt` (classes) or
/// `DS_graph_attributes.txt` (real targets). Vertex features are the one-hot
/// node labels.
pub fn load_tu_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ds = dataset_prefix(dir)?;
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{ds}_{suffix}.txt")) };
    for needed in ["A", "graph_indicator", "node_labels"] {
        ensure!(
            file(needed).is_file(),
            Dataset,
            "missing file {}",
            file(needed).display()
        );
    }

    let indicator = parse_ints(&file("graph_indicator"))?;
    let n_vertices = indicator.len();
    ensure!(n_vertices > 0, Dataset, "empty graph indicator");
    ensure!(
        indicator.iter().all(|&g| g >= 1),
        Dataset,
        "graph ids must be 1-indexed"
    );
    let n_graphs = *indicator.iter().max().unwrap() as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_graphs];
    let mut local = vec![0usize; n_vertices];
    for (v, &g) in indicator.iter().enumerate() {
        let g = g as usize - 1;
        local[v] = members[g].len();
        members[g].push(v);
    }
    for (g, m) in members.iter().enumerate() {
        ensure!(!m.is_empty(), Dataset, "graph {} has no vertices", g + 1);
    }

    let raw_labels = parse_ints(&file("node_labels"))?;
    ensure!(
        raw_labels.len() == n_vertices,
        Dataset,
        "{} node labels for {n_vertices} vertices",
        raw_labels.len()
    );
    let (node_codes, label_count) = node_label_codes(&raw_labels);

    let a_path = file("A");
    let mut edges: HashSet<(usize, usize)> = HashSet::new();
    for (line, text) in read_lines(&a_path)? {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let parsed: Vec<usize> = parts
            .iter()
            .filter_map(|p| p.parse::<usize>().ok())
            .collect();
        ensure!(
            parts.len() == 2 && parsed.len() == 2,
            Dataset,
            "{}:{line}: expected \"i, j\", got {text:?}",
            a_path.display()
        );
        let (i, j) = (parsed[0], parsed[1]);
        ensure!(
            (1..=n_vertices).contains(&i) && (1..=n_vertices).contains(&j),
            Dataset,
            "{}:{line}: vertex id out of range 1..={n_vertices}",
            a_path.display()
        );
        ensure!(
            indicator[i - 1] == indicator[j - 1],
            Dataset,
            "{}:{line}: edge ({i}, {j}) joins two graphs",
            a_path.display()
        );
        ensure!(i != j, Dataset, "{}:{line}: self-loop at {i}", a_path.display());
        edges.insert((i - 1, j - 1));
    }
    let mut sorted_edges: Vec<(usize, usize)> = edges.iter().copied().collect();
    sorted_edges.sort_unstable();
    for &(i, j) in &sorted_edges {
        ensure!(
            edges.contains(&(j, i)),
            Dataset,
            "edge list not symmetric: ({}, {}) present without ({}, {})",
            i + 1,
            j + 1,
            j + 1,
            i + 1
        );
    }
    let mut per_graph: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_graphs];
    for &(i, j) in &sorted_edges {
        if i < j {
            per_graph[indicator[i] as usize - 1].push((local[i], local[j]));
        }
    }

    let targets: Vec<Target> = if file("graph_labels").is_file() {
        let raw = parse_ints(&file("graph_labels"))?;
        ensure!(
            raw.len() == n_graphs,
            Dataset,
            "{} graph labels for {n_graphs} graphs",
            raw.len()
        );
        remap(&raw).0.into_iter().map(Target::Class).collect()
    } else if file("graph_attributes").is_file() {
        let path = file("graph_attributes");
        let rows = read_lines(&path)?
            .into_iter()
            .map(|(n, l)| {
                l.split(',')
                    .map(|x| {
                        x.trim().parse::<f64>().map_err(|_| {
                            CcnError::Dataset(format!("{}:{n}: bad number {x:?}", path.display()))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
                    .map(Target::Real)
            })
            .collect::<Result<Vec<_>>>()?;
        ensure!(
            rows.len() == n_graphs,
            Dataset,
            "{} graph attribute rows for {n_graphs} graphs",
            rows.len()
        );
        rows
    } else {
        return Err(CcnError::Dataset(format!(
            "missing file {} (or {})",
            file("graph_labels").display(),
            file("graph_attributes").display()
        )));
    };

    let mut graphs = Vec::with_capacity(n_graphs);
    let mut node_labels = Vec::with_capacity(n_graphs);
    for (g, m) in members.iter().enumerate() {
        let labels: Vec<usize> = m.iter().map(|&v| node_codes[v]).collect();
        let onehot = labels
            .iter()
            .map(|&l| {
                let mut x = vec![0.0; label_count];
                x[l] = 1.0;
                x
            })
            .collect();
        graphs.push(Graph::from_edges(m.len(), &per_graph[g], onehot)?);
        node_labels.push(labels);
    }
    Dataset::new(ds, graphs, node_labels, label_count, targets)
}

/// Writes `ds` in the same text format under `dir/<name>_*.txt`.
pub fn write_tu_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut a = String::new();
    let mut indicator = String::new();
    let mut nodes = String::new();
    let mut offset = 0;
    for (gi, (g, labels)) in ds.graphs.iter().zip(&ds.node_labels).enumerate() {
        for i in 0..g.n() {
            indicator.push_str(&format!("{}\n", gi + 1));
            nodes.push_str(&format!("{}\n", labels[i]));
            for j in g.neighbors(i) {
                a.push_str(&format!("{}, {}\n", offset + i + 1, offset + j + 1));
            }
        }
        offset += g.n();
    }
    let name = &ds.name;
    fs::write(dir.join(format!("{name}_A.txt")), a)?;
    fs::write(dir.join(format!("{name}_graph_indicator.txt")), indicator)?;
    fs::write(dir.join(format!("{name}_node_labels.txt")), nodes)?;
    let targets: String = ds
        .targets
        .iter()
        .map(|t| match t {
            Target::Class(c) => format!("{c}\n"),
            Target::Real(y) => {
                let cells: Vec<String> = y.iter().map(|v| format!("{v:?}")).collect();
                format!("{}\n", cells.join(", "))
            }
        })
        .collect();
    let target_file = match ds.task() {
        Task::Classification => "graph_labels",
        Task::Regression => "graph_attributes",
    };
    fs::write(dir.join(format!("{name}_{target_file}.txt")), targets)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, files: &[(&str, &str)]) {
        fs::create_dir_all(dir).unwrap();
        for (suffix, text) in files {
            fs::write(dir.join(format!("{name}_{suffix}.txt")), text).unwrap();
        }
    }

    const TRIANGLES_A: &str = "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n5, 6\n6, 5\n4, 6\n6, 4\n";

    fn triangles(dir: &Path) {
        write(
            dir,
            "TRI",
            &[
                ("A", TRIANGLES_A),
                ("graph_indicator", "1\n1\n1\n2\n2\n2\n"),
                ("graph_labels", "-1\n1\n"),
                ("node_labels", "0\n1\n2\n2\n2\n0\n"),
            ],
        );
    }

    #[test]
    fn two_triangles() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("TRI");
        triangles(&dir);
        let ds = load_tu_dataset(&dir).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.targets, vec![Target::Class(0), Target::Class(1)]);
        let tri = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(ds.graphs[0].adjacency(), &tri);
        assert_eq!(ds.graphs[1].adjacency(), &tri);
        assert_eq!(ds.node_labels[1], vec![2, 2, 0]);
        assert_eq!(ds.graphs[0].label(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn write_then_read() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("TRI");
        triangles(&dir);
        let ds = load_tu_dataset(&dir).unwrap();
        let out = tmp.path().join("copy");
        write_tu_dataset(&ds, &out).unwrap();
        assert_eq!(load_tu_dataset(&out).unwrap(), ds);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let base = [
            ("A", "1, 2\n2, 1\n"),
            ("graph_indicator", "1\n1\n"),
            ("graph_labels", "0\n"),
            ("node_labels", "0\n0\n"),
        ];
        let case = |name: &str, replace: (&str, &str)| {
            let dir = tmp.path().join(name);
            let files: Vec<(&str, &str)> = base
                .iter()
                .map(|&(s, t)| if s == replace.0 { (s, replace.1) } else { (s, t) })
                .collect();
            write(&dir, name, &files);
            load_tu_dataset(&dir)
        };
        assert!(case("OK", ("A", "1, 2\n2, 1\n")).is_ok());
        assert!(case("ASYM", ("A", "1, 2\n")).is_err());
        assert!(case("DANGLE", ("A", "1, 3\n3, 1\n")).is_err());
        assert!(case("GARBAGE", ("A", "1 2\n")).is_err());
        assert!(case("SHORT", ("node_labels", "0\n")).is_err());

        let dir = tmp.path().join("MISSING");
        write(&dir, "MISSING", &base[..3]);
        let err = load_tu_dataset(&dir).unwrap_err().to_string();
        assert!(err.contains("node_labels"), "{err}");
    }

    #[test]
    fn node_labels_keep_their_codes() {
        assert_eq!(node_label_codes(&[0, 5, 2]), (vec![0, 5, 2], 6));
        assert_eq!(node_label_codes(&[-1, 1]), (vec![0, 2], 3));
    }
}
