//! A full network: level-0 lift of vertex features, `L` aggregation levels
//! over a composition scheme, and the invariant readout.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::graph::Graph;
use crate::layers::{
    contraction_input_order, record_aggregate_shared, record_readout, ChildInput,
    ChildProjections, LayerParams,
    NodeActivation, ReadoutParams,
};
use crate::scheme::{restrict_adjacency, CompositionScheme};
use crate::tensor::{enumerate_contractions, DenseTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Tensor order of every activation (0, 1 or 2 in shipped configs).
    pub order: usize,
    /// Output channels per level, `widths.len()` levels.
    pub widths: Vec<usize>,
    pub use_adjacency: bool,
    /// How many contractions of the canonical catalog each layer uses.
    pub contraction_count: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.widths.is_empty(), Config, "at least one level is required");
        ensure!(self.widths.iter().all(|&w| w > 0), Config, "widths must be positive");
        ensure!(self.input_dim > 0, Config, "input dimension must be positive");
        ensure!(self.output_dim > 0, Config, "output dimension must be positive");
        ensure!(self.contraction_count > 0, Config, "contraction count must be positive");
        Ok(())
    }

    /// Indices of the contractions used by every layer: a prefix of the
    /// canonical catalog.
    pub fn contraction_subset(&self) -> Result<Vec<usize>> {
        let total =
            enumerate_contractions(contraction_input_order(self.order, self.use_adjacency), self.order)?
                .len();
        Ok((0..self.contraction_count.min(total)).collect())
    }
}

/// Widths `base, 2·base, 4·base, …`.
pub fn doubling_widths(base: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|l| base << l).collect()
}

/// Widths obtained when no channel cap is applied: every contraction of every
/// input channel becomes an output channel, so level `ℓ` has `s·c_{ℓ−1}`.
pub fn uncapped_widths(
    order: usize,
    use_adjacency: bool,
    contraction_count: usize,
    input_dim: usize,
    levels: usize,
) -> Result<Vec<usize>> {
    let total =
        enumerate_contractions(contraction_input_order(order, use_adjacency), order)?.len();
    let s = contraction_count.min(total);
    let mut widths = Vec::with_capacity(levels);
    let mut c = input_dim;
    for _ in 0..levels {
        c *= s;
        widths.push(c);
    }
    Ok(widths)
}

/// Per-sample supervision target.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Real(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    pub readout: ReadoutParams,
}

fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    let n: usize = shape.iter().product();
    DenseTensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

impl Model {
    /// Glorot-uniform mixing weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subset = config.contraction_subset()?;
        let s = subset.len();
        let mut layers = Vec::with_capacity(config.levels());
        let mut c_in = config.input_dim;
        for &c_out in &config.widths {
            let weight = glorot(vec![c_out, s, c_in], s * c_in, c_out, &mut rng);
            layers.push(LayerParams::new(
                weight,
                DenseTensor::zeros(vec![c_out]),
                config.order,
                config.use_adjacency,
                subset.clone(),
            )?);
            c_in = c_out;
        }
        let readout = ReadoutParams {
            weight: glorot(vec![config.output_dim, c_in], c_in, config.output_dim, &mut rng),
            bias: DenseTensor::zeros(vec![config.output_dim]),
        };
        Ok(Self {
            config,
            layers,
            readout,
        })
    }

    /// All trainable arrays: `(weight, bias)` per level, then the readout.
    pub fn parameters(&self) -> Vec<DenseTensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out.push(self.readout.weight.clone());
        out.push(self.readout.bias.clone());
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.layers.len() {
            out.push(format!("level{}.weight", i + 1));
            out.push(format!("level{}.bias", i + 1));
        }
        out.push("readout.weight".into());
        out.push("readout.bias".into());
        out
    }

    pub fn set_parameters(&mut self, params: Vec<DenseTensor>) -> Result<()> {
        ensure!(
            params.len() == 2 * self.layers.len() + 2,
            Shape,
            "{} arrays for a model with {} parameter arrays",
            params.len(),
            2 * self.layers.len() + 2
        );
        let current = self.parameters();
        for (p, c) in params.iter().zip(&current) {
            ensure!(
                p.shape() == c.shape(),
                Shape,
                "parameter shape {:?}, expected {:?}",
                p.shape(),
                c.shape()
            );
        }
        let mut it = params.into_iter();
        for l in &mut self.layers {
            l.weight = it.next().unwrap();
            l.bias = it.next().unwrap();
        }
        self.readout.weight = it.next().unwrap();
        self.readout.bias = it.next().unwrap();
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(DenseTensor::len).sum()
    }

    /// Records the forward pass and returns every level's packed node
    /// activations plus the readout output.
    fn record_levels(
        &self,
        tape: &mut Tape,
        g: &Graph,
        scheme: &CompositionScheme,
        params: &[Var],
    ) -> Result<(Vec<Vec<Var>>, Var)> {
        ensure!(
            params.len() == 2 * self.layers.len() + 2,
            Shape,
            "expected {} parameter handles",
            2 * self.layers.len() + 2
        );
        ensure!(
            scheme.n() == g.n() && scheme.levels() == self.layers.len(),
            Invalid,
            "scheme has {} vertices and {} levels, graph {} vertices, model {} levels",
            scheme.n(),
            scheme.levels(),
            g.n(),
            self.layers.len()
        );
        ensure!(
            g.label_dim() == self.config.input_dim,
            Shape,
            "vertex features have dimension {}, model expects {}",
            g.label_dim(),
            self.config.input_dim
        );
        let k = self.config.order;
        let mut lift_shape = vec![self.config.input_dim];
        lift_shape.extend(std::iter::repeat(1).take(k));
        let mut levels = Vec::with_capacity(self.layers.len() + 1);
        levels.push(
            (0..g.n())
                .map(|v| {
                    let t = DenseTensor::new(lift_shape.clone(), g.label(v).to_vec())?;
                    Ok(tape.leaf(t))
                })
                .collect::<Result<Vec<_>>>()?,
        );
        for (li, layer) in self.layers.iter().enumerate() {
            let level = li + 1;
            let (w, b) = (params[2 * li], params[2 * li + 1]);
            let prev = &levels[li];
            let mut current = Vec::with_capacity(g.n());
            let mut memo = ChildProjections::default();
            for v in 0..g.n() {
                let parent = scheme.field(level, v);
                let children: Vec<ChildInput<'_>> = scheme
                    .children(level, v)
                    .iter()
                    .map(|&c| ChildInput {
                        vertex: c,
                        field: scheme.field(level - 1, c),
                        activation: prev[c],
                    })
                    .collect();
                let adjacency = if layer.use_adjacency {
                    Some(tape.leaf(restrict_adjacency(g, parent)?))
                } else {
                    None
                };
                current.push(record_aggregate_shared(
                    tape, parent, &children, layer, w, b, adjacency, &mut memo,
                )?);
            }
            levels.push(current);
        }
        let n = self.layers.len();
        let out = record_readout(tape, &levels[n], params[2 * n], params[2 * n + 1])?;
        Ok((levels, out))
    }

    /// Records the forward pass on `tape`; `params` are leaves holding
    /// [`Model::parameters`] in order. Returns the graph representation.
    pub fn record(
        &self,
        tape: &mut Tape,
        g: &Graph,
        scheme: &CompositionScheme,
        params: &[Var],
    ) -> Result<Var> {
        Ok(self.record_levels(tape, g, scheme, params)?.1)
    }

    /// Records the forward pass with fresh parameter leaves.
    pub fn record_with_leaves(
        &self,
        tape: &mut Tape,
        g: &Graph,
        scheme: &CompositionScheme,
    ) -> Result<(Vec<Var>, Var)> {
        let leaves: Vec<Var> = self.parameters().into_iter().map(|p| tape.leaf(p)).collect();
        let out = self.record(tape, g, scheme, &leaves)?;
        Ok((leaves, out))
    }

    /// The graph representation `φ(G)`.
    pub fn forward(&self, g: &Graph, scheme: &CompositionScheme) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, out) = self.record_with_leaves(&mut tape, g, scheme)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Node activations at every level `0..=L`.
    pub fn activations(
        &self,
        g: &Graph,
        scheme: &CompositionScheme,
    ) -> Result<Vec<Vec<NodeActivation>>> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.parameters().into_iter().map(|p| tape.leaf(p)).collect();
        let (levels, _) = self.record_levels(&mut tape, g, scheme, &leaves)?;
        levels
            .iter()
            .enumerate()
            .map(|(l, vars)| {
                vars.iter()
                    .enumerate()
                    .map(|(v, &var)| {
                        NodeActivation::unpack(scheme.field(l, v).clone(), tape.value(var))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Records the task loss: softmax cross-entropy for classes, mean squared
/// error for real targets.
pub fn record_loss(tape: &mut Tape, output: Var, target: &Target) -> Result<Var> {
    match target {
        Target::Class(c) => tape.softmax_cross_entropy(output, *c),
        Target::Real(y) => tape.mean_squared_error(output, y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::build_scheme;

    fn config(order: usize, adj: bool) -> ModelConfig {
        ModelConfig {
            order,
            widths: vec![3, 6],
            use_adjacency: adj,
            contraction_count: 10,
            input_dim: 2,
            output_dim: 2,
        }
    }

    fn triangle_with_tail() -> Graph {
        Graph::from_edges(
            4,
            &[(0, 1), (1, 2), (2, 0), (2, 3)],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]],
        )
        .unwrap()
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let a = Model::init(config(2, true), 7).unwrap();
        let b = Model::init(config(2, true), 7).unwrap();
        let c = Model::init(config(2, true), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = &a.layers[0].weight;
        let bound = (6.0 / (10 * 2 + 3) as f64).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
        assert!(a.layers[0].bias.data().iter().all(|&x| x == 0.0));
        assert_eq!(w.shape(), &[3, 10, 2]);
    }

    #[test]
    fn forward_shapes_for_every_order() {
        let g = triangle_with_tail();
        let s = build_scheme(&g, 2).unwrap();
        for order in 0..=2 {
            for adj in [false, true] {
                let m = Model::init(config(order, adj), 1).unwrap();
                let out = m.forward(&g, &s).unwrap();
                assert_eq!(out.len(), 2);
                let acts = m.activations(&g, &s).unwrap();
                assert_eq!(acts.len(), 3);
                assert_eq!(acts[2][0].channels().len(), 6);
                assert_eq!(acts[2][0].order(), order);
            }
        }
    }

    #[test]
    fn single_vertex_depends_only_on_its_label() {
        let m = Model::init(config(2, true), 3).unwrap();
        let run = |l: Vec<f64>| {
            let g = Graph::from_edges(1, &[], vec![l]).unwrap();
            m.forward(&g, &build_scheme(&g, 2).unwrap()).unwrap()
        };
        assert_eq!(run(vec![0.3, 0.7]), run(vec![0.3, 0.7]));
    }

    #[test]
    fn first_order_uncapped_widths_double() {
        assert_eq!(uncapped_widths(1, false, 10, 1, 3).unwrap(), vec![2, 4, 8]);
        assert_eq!(doubling_widths(8, 3), vec![8, 16, 32]);
    }

    #[test]
    fn parameters_round_trip() {
        let mut m = Model::init(config(1, false), 2).unwrap();
        let p = m.parameters();
        assert_eq!(p.len(), m.parameter_names().len());
        let doubled: Vec<_> = p.iter().map(|t| t.scale(2.0)).collect();
        m.set_parameters(doubled.clone()).unwrap();
        assert_eq!(m.parameters(), doubled);
        assert!(m.set_parameters(p[..2].to_vec()).is_err());
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let m = Model::init(config(0, false), 2).unwrap();
        let g = Graph::unlabeled(2, &[(0, 1)]).unwrap();
        assert!(m.forward(&g, &build_scheme(&g, 2).unwrap()).is_err());
    }
}
