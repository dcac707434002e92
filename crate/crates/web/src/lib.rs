//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Each export takes plain strings and numbers and returns text, so the
//! page needs no JS glue beyond what `wasm-bindgen --target web` emits.

use ccn::graph::{permute_graph, Graph};
use ccn::harness::cmd_enumerate;
use ccn::model::{Model, ModelConfig};
use ccn::scheme::build_scheme;
use ccn::{CcnError, Permutation, Result};
use wasm_bindgen::prelude::*;

fn js(e: CcnError) -> JsError {
    JsError::new(&e.to_string())
}

/// Parses `"0-1 1-2, 2-0"` into edge pairs.
pub fn parse_edges(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (a, b) = t
                .split_once('-')
                .ok_or_else(|| CcnError::Invalid(format!("edge {t:?} is not of the form a-b")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CcnError::Invalid(format!("bad vertex {s:?} in edge {t:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn parse_permutation(text: &str) -> Result<Permutation> {
    let mapping = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| CcnError::Invalid(format!("bad index {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Permutation::new(mapping)
}

/// The contraction catalog, one `index  tag  spec` line per entry.
pub fn catalog_text(order_in: usize, order_out: usize) -> Result<String> {
    Ok(cmd_enumerate(order_in, order_out)?.join("\n"))
}

/// Receptive fields per level for an unlabeled graph.
pub fn fields_text(n: usize, edges: &str, levels: usize) -> Result<String> {
    let g = Graph::unlabeled(n, &parse_edges(edges)?)?;
    let scheme = build_scheme(&g, levels)?;
    let mut out = String::new();
    for level in 0..=levels {
        out.push_str(&format!("level {level}\n"));
        for (v, f) in scheme.level_fields(level).iter().enumerate() {
            out.push_str(&format!("  {v}: {:?}\n", f.vertices()));
        }
    }
    Ok(out)
}

/// Outputs of a seeded second-order model on `G` and on `σG`.
pub fn invariance_text(n: usize, edges: &str, sigma: &str, seed: u64) -> Result<String> {
    let g = Graph::unlabeled(n, &parse_edges(edges)?)?;
    let sigma = parse_permutation(sigma)?;
    let moved = permute_graph(&g, &sigma)?;
    let model = Model::init(
        ModelConfig {
            order: 2,
            widths: vec![4, 8],
            use_adjacency: true,
            contraction_count: 10,
            input_dim: 1,
            output_dim: 3,
        },
        seed,
    )?;
    let a = model.forward(&g, &build_scheme(&g, 2)?)?;
    let b = model.forward(&moved, &build_scheme(&moved, 2)?)?;
    let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(format!(
        "f(G)  = {a:.6?}\nf(σG) = {b:.6?}\nmax |difference| / scale = {:.3e}",
        diff / scale
    ))
}

#[wasm_bindgen]
pub fn catalog(order_in: usize, order_out: usize) -> std::result::Result<String, JsError> {
    catalog_text(order_in, order_out).map_err(js)
}

#[wasm_bindgen]
pub fn fields(n: usize, edges: &str, levels: usize) -> std::result::Result<String, JsError> {
    fields_text(n, edges, levels).map_err(js)
}

#[wasm_bindgen]
pub fn invariance(n: usize, edges: &str, sigma: &str, seed: u32) -> std::result::Result<String, JsError> {
    invariance_text(n, edges, sigma, u64::from(seed)).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_parse_and_reject() {
        assert_eq!(parse_edges("0-1 1-2,2-0").unwrap(), [(0, 1), (1, 2), (2, 0)]);
        assert!(parse_edges("0-x").is_err());
        assert!(parse_edges("01").is_err());
    }

    #[test]
    fn catalog_has_fifty_second_order_entries() {
        assert_eq!(catalog_text(5, 2).unwrap().lines().count(), 50);
        assert!(catalog_text(2, 2).is_err());
    }

    #[test]
    fn triangle_fields_grow_to_everything() {
        let text = fields_text(3, "0-1 1-2", 2).unwrap();
        assert!(text.contains("level 2\n  0: [0, 1, 2]"), "{text}");
    }
}
