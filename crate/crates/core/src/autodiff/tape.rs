//! Tape-based reverse-mode differentiation over [`DenseTensor`] values.
//!
//! Every operation evaluates eagerly and appends a node holding its value,
//! so node ids are topologically ordered by construction. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints.

use std::rc::Rc;

use crate::error::{ensure, CcnError, Result};
use crate::layers::{
    promote_map, promote_map_adjoint, scatter_promoted, scatter_promoted_adjoint,
};
use crate::tensor::{
    contract, contract_adjoint, elementwise_product, mixed_product, mixed_product_adjoint,
    split_product_spec, strides, tensor_product, ContractionSpec, DenseTensor,
};

/// One input of [`Tape::scatter`]: `(tensor, promotion map, slot)`.
pub type ScatterPart = (Var, Rc<[usize]>, usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate adjoint corruptions, used as negative controls for the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointFault {
    /// Flips the sign of every contraction adjoint.
    ContractSign,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    TensorProduct(Var, Var),
    Elementwise {
        a: Var,
        b: Var,
        dims: Vec<usize>,
    },
    Contract {
        a: Var,
        spec: ContractionSpec,
    },
    MixedProduct {
        a: Var,
        b: Var,
        mixed: Vec<(Vec<usize>, Vec<usize>)>,
    },
    Promote {
        a: Var,
        map: Vec<usize>,
        lead: usize,
    },
    Stack {
        slots: Vec<Option<Var>>,
    },
    Scatter {
        parts: Vec<ScatterPart>,
        parent_m: usize,
        width: Option<usize>,
    },
    LinComb {
        inputs: Vec<Var>,
        coeffs: Vec<f64>,
    },
    Mix {
        parts: Vec<(Var, Option<Var>)>,
        weight: Var,
        bias: Var,
    },
    MixSlice {
        a: Var,
        weight: Var,
        slot: usize,
    },
    SumProducts {
        parts: Vec<(Var, Option<Var>)>,
        bias: Var,
    },
    Relu(Var),
    Affine {
        x: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
    },
    MeanSquaredError {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseTensor,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

/// Adjoints indexed by [`Var`]; `None` where no gradient reached a node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if none reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> DenseTensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseTensor::zeros(shape.to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: AdjointFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: DenseTensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn tensor_product(&mut self, a: Var, b: Var) -> Var {
        let value = tensor_product(self.value(a), self.value(b));
        self.push(Op::TensorProduct(a, b), value)
    }

    pub fn elementwise_product(&mut self, a: Var, b: Var, dims: &[usize]) -> Result<Var> {
        let value = elementwise_product(self.value(a), self.value(b), dims)?;
        Ok(self.push(
            Op::Elementwise {
                a,
                b,
                dims: dims.to_vec(),
            },
            value,
        ))
    }

    pub fn contract(&mut self, a: Var, spec: &ContractionSpec) -> Result<Var> {
        let value = contract(self.value(a), spec)?;
        Ok(self.push(
            Op::Contract {
                a,
                spec: spec.clone(),
            },
            value,
        ))
    }

    pub fn project(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let spec = ContractionSpec::projection(self.value(a).order(), dims)?;
        self.contract(a, &spec)
    }

    /// Contraction of `a ⊗ b` without materializing the product; recorded as
    /// single-factor contractions followed by a joint product.
    pub fn contract_product(&mut self, a: Var, b: Var, spec: &ContractionSpec) -> Result<Var> {
        let split = split_product_spec(self.value(a).order(), self.value(b).order(), spec)?;
        let a1 = if split.a_spec.groups().is_empty() {
            a
        } else {
            self.contract(a, &split.a_spec)?
        };
        let b1 = if split.b_spec.groups().is_empty() {
            b
        } else {
            self.contract(b, &split.b_spec)?
        };
        self.mixed_product(a1, b1, split.mixed)
    }

    /// Product of `a` and `b` contracted over groups that each tie axes of
    /// `a` to axes of `b`; see [`crate::tensor::mixed_product`].
    pub fn mixed_product(
        &mut self,
        a: Var,
        b: Var,
        mixed: Vec<(Vec<usize>, Vec<usize>)>,
    ) -> Result<Var> {
        let value = mixed_product(self.value(a), self.value(b), &mixed)?;
        Ok(self.push(Op::MixedProduct { a, b, mixed }, value))
    }

    /// Promotion of a tensor whose first `lead` axes are channels and whose
    /// remaining axes index child positions; `map[a]` is the parent position
    /// of child position `a`.
    pub fn promote(&mut self, a: Var, map: &[usize], parent_m: usize, lead: usize) -> Result<Var> {
        let value = promote_map(self.value(a), map, parent_m, lead)?;
        Ok(self.push(
            Op::Promote {
                a,
                map: map.to_vec(),
                lead,
            },
            value,
        ))
    }

    /// Sum of promotions of channel-leading tensors into a parent field of
    /// size `parent_m`, or with `width` their stack along a new trailing axis.
    /// `parts` holds `(tensor, map, slot)` as in [`Tape::promote`] and
    /// [`Tape::stack`].
    pub fn scatter(
        &mut self,
        parts: &[ScatterPart],
        parent_m: usize,
        width: Option<usize>,
    ) -> Result<Var> {
        let values: Vec<(&DenseTensor, &[usize], usize)> = parts
            .iter()
            .map(|(v, map, slot)| (self.value(*v), &map[..], *slot))
            .collect();
        let value = scatter_promoted(&values, parent_m, width)?;
        Ok(self.push(
            Op::Scatter {
                parts: parts.to_vec(),
                parent_m,
                width,
            },
            value,
        ))
    }

    /// Stacks equal-shaped tensors along a new trailing axis with one slot
    /// per entry; `None` slots are zero.
    pub fn stack(&mut self, slots: &[Option<Var>]) -> Result<Var> {
        let shape = slots
            .iter()
            .flatten()
            .map(|&v| self.value(v).shape().to_vec())
            .next()
            .ok_or_else(|| CcnError::Shape("stack needs at least one filled slot".into()))?;
        let width = slots.len();
        let inner: usize = shape.iter().product();
        let mut sources = Vec::with_capacity(width);
        for (j, slot) in slots.iter().enumerate() {
            let src = match slot {
                Some(v) => {
                    let t = self.value(*v);
                    ensure!(
                        t.shape() == shape.as_slice(),
                        Shape,
                        "stack slot {j} has shape {:?}, expected {shape:?}",
                        t.shape()
                    );
                    Some(t.data())
                }
                None => None,
            };
            sources.push(src);
        }
        let mut data = Vec::with_capacity(inner * width);
        for x in 0..inner {
            data.extend(sources.iter().map(|src| src.map_or(0.0, |d| d[x])));
        }
        let mut out_shape = shape;
        out_shape.push(width);
        let value = DenseTensor::new(out_shape, data)?;
        Ok(self.push(
            Op::Stack {
                slots: slots.to_vec(),
            },
            value,
        ))
    }

    pub fn linear_combination(&mut self, inputs: &[Var], coeffs: &[f64]) -> Result<Var> {
        let refs: Vec<&DenseTensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = crate::tensor::linear_combination(&refs, coeffs)?;
        Ok(self.push(
            Op::LinComb {
                inputs: inputs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            value,
        ))
    }

    pub fn sum(&mut self, inputs: &[Var]) -> Result<Var> {
        self.linear_combination(inputs, &vec![1.0; inputs.len()])
    }

    /// Channel mixing: `out[i, x] = Σ_j Σ_c W[i, j, c] · q_j[c, x] + b[i]`,
    /// where every `q_j` has shape `[s0, rest..]`, `W` is `[s', s, s0]` and
    /// `b` is `[s']`.
    pub fn mix(&mut self, qs: &[Var], weight: Var, bias: Var) -> Result<Var> {
        let parts: Vec<(Var, Option<Var>)> = qs.iter().map(|&q| (q, None)).collect();
        self.mix_products(&parts, weight, bias)
    }

    /// [`Tape::mix`] with inputs given as products `q_j = a_j ⊗ b_j` (or just
    /// `a_j` when `b_j` is `None`). Channels of `a_j` are mixed before the
    /// product is formed, so the product is never materialized.
    pub fn mix_products(
        &mut self,
        parts: &[(Var, Option<Var>)],
        weight: Var,
        bias: Var,
    ) -> Result<Var> {
        let w = self.value(weight);
        let b = self.value(bias);
        ensure!(w.order() == 3, Shape, "mixing weight must be order 3");
        let (s_out, s, s0) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        ensure!(parts.len() == s, Shape, "{} inputs for a weight expecting {s}", parts.len());
        ensure!(b.shape() == [s_out], Shape, "bias shape {:?} for {s_out} outputs", b.shape());
        let rest_of = |(a, f): &(Var, Option<Var>)| {
            let mut shape = self.value(*a).shape().get(1..).unwrap_or(&[]).to_vec();
            if let Some(f) = f {
                shape.extend_from_slice(self.value(*f).shape());
            }
            shape
        };
        let rest_shape = parts.first().map(rest_of).unwrap_or_default();
        let rest: usize = rest_shape.iter().product();
        let mut out = vec![0.0; s_out * rest];
        for (i, row) in out.chunks_mut(rest.max(1)).enumerate().take(s_out) {
            row.iter_mut().for_each(|x| *x = b.data()[i]);
        }
        for (j, part) in parts.iter().enumerate() {
            let a = self.value(part.0);
            ensure!(
                a.order() >= 1 && a.shape()[0] == s0 && rest_of(part) == rest_shape,
                Shape,
                "mixing input {j} has shape {:?}, expected [{s0}, {rest_shape:?}]",
                rest_of(part)
            );
            match part.1 {
                None => {
                    let active = active_channels(a.data(), rest);
                    for i in 0..s_out {
                        let row = &mut out[i * rest..(i + 1) * rest];
                        combine_channels(row, weight_row(w, i, j), a.data(), &active);
                    }
                }
                Some(f) => add_outer(&mut out, &mix_channels(w, j, a.data()), self.value(f).data()),
            }
        }
        let mut shape = vec![s_out];
        shape.extend_from_slice(&rest_shape);
        let value = DenseTensor::new(shape, out)?;
        Ok(self.push(
            Op::Mix {
                parts: parts.to_vec(),
                weight,
                bias,
            },
            value,
        ))
    }

    /// One slot of channel mixing without bias: `out[i, x] = Σ_c W[i, j, c] ·
    /// a[c, x]` for a fixed `j`.
    pub fn mix_slice(&mut self, a: Var, weight: Var, j: usize) -> Result<Var> {
        let (av, w) = (self.value(a), self.value(weight));
        ensure!(w.order() == 3, Shape, "mixing weight must be order 3");
        ensure!(j < w.shape()[1], Shape, "slot {j} of a weight with {} slots", w.shape()[1]);
        ensure!(
            av.order() >= 1 && av.shape()[0] == w.shape()[2],
            Shape,
            "mixing input of shape {:?} for {} input channels",
            av.shape(),
            w.shape()[2]
        );
        let mut shape = av.shape().to_vec();
        shape[0] = w.shape()[0];
        let value = DenseTensor::new(shape, mix_channels(w, j, av.data()))?;
        Ok(self.push(Op::MixSlice { a, weight, slot: j }, value))
    }

    /// `out[i, x, y] = b[i] + Σ_j p_j[i, x] · f_j[y]`, where `f_j` is absent
    /// (a plain sum) for parts given as `(p_j, None)`.
    pub fn sum_products(&mut self, parts: &[(Var, Option<Var>)], bias: Var) -> Result<Var> {
        let b = self.value(bias);
        ensure!(b.order() == 1, Shape, "bias must be a vector");
        let s_out = b.len();
        let shape_of = |(p, f): &(Var, Option<Var>)| {
            let mut shape = self.value(*p).shape().to_vec();
            if let Some(f) = f {
                shape.extend_from_slice(self.value(*f).shape());
            }
            shape
        };
        let shape = parts
            .first()
            .map(shape_of)
            .ok_or_else(|| CcnError::Shape("sum of products needs a part".into()))?;
        ensure!(shape.first() == Some(&s_out), Shape, "parts have shape {shape:?}, bias {s_out}");
        let rest = shape[1..].iter().product::<usize>();
        let mut out = Vec::with_capacity(s_out * rest);
        for &x in b.data() {
            out.extend(std::iter::repeat_n(x, rest));
        }
        for part in parts {
            ensure!(shape_of(part) == shape, Shape, "part shape {:?}, expected {shape:?}", shape_of(part));
            let p = self.value(part.0).data();
            match part.1 {
                None => out.iter_mut().zip(p).for_each(|(o, &x)| *o += x),
                Some(f) => add_outer(&mut out, p, self.value(f).data()),
            }
        }
        let value = DenseTensor::new(shape, out)?;
        Ok(self.push(
            Op::SumProducts {
                parts: parts.to_vec(),
                bias,
            },
            value,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    /// `y = W x + b` for a vector `x`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, w, b) = (self.value(x), self.value(weight), self.value(bias));
        ensure!(xv.order() == 1, Shape, "affine input must be a vector");
        ensure!(
            w.order() == 2 && w.shape()[1] == xv.len(),
            Shape,
            "affine weight {:?} for input of length {}",
            w.shape(),
            xv.len()
        );
        let rows = w.shape()[0];
        ensure!(b.shape() == [rows], Shape, "affine bias {:?} for {rows} rows", b.shape());
        let cols = xv.len();
        let data = (0..rows)
            .map(|i| {
                b.data()[i]
                    + (0..cols)
                        .map(|j| w.data()[i * cols + j] * xv.data()[j])
                        .sum::<f64>()
            })
            .collect();
        let value = DenseTensor::vector(data);
        Ok(self.push(Op::Affine { x, weight, bias }, value))
    }

    /// Scalar `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        ensure!(z.order() == 1, Shape, "logits must be a vector");
        ensure!(target < z.len(), Invalid, "class {target} out of range for {} logits", z.len());
        let lse = log_sum_exp(z.data());
        let value = DenseTensor::scalar(lse - z.data()[target]);
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, target }, value))
    }

    /// Scalar mean of `(pred - target)²`.
    pub fn mean_squared_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        ensure!(
            p.len() == target.len() && !target.is_empty(),
            Shape,
            "prediction of length {} vs target of length {}",
            p.len(),
            target.len()
        );
        let mse = p
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(
            Op::MeanSquaredError {
                pred,
                target: target.to_vec(),
            },
            DenseTensor::scalar(mse),
        ))
    }

    /// Reverse sweep from `output` with the given seed; `output` and `seed`
    /// must both be scalars.
    pub fn backward(&self, output: Var, seed: &DenseTensor) -> Result<Gradients> {
        ensure!(
            seed.order() == 0,
            Shape,
            "seed must be a scalar, got shape {:?}",
            seed.shape()
        );
        ensure!(
            self.value(output).order() == 0,
            Shape,
            "backward needs a scalar output, got shape {:?}",
            self.value(output).shape()
        );
        let mut grads: Vec<Option<DenseTensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for t in (0..=output.0).rev() {
            let Some(g) = grads[t].take() else { continue };
            self.propagate(t, &g, &mut grads)?;
            grads[t] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// [`Tape::backward`] with unit seed.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, &DenseTensor::scalar(1.0))
    }

    fn propagate(&self, t: usize, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) -> Result<()> {
        let node = &self.nodes[t];
        match &node.op {
            Op::Leaf => {}
            Op::TensorProduct(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (nb, na) = (bv.len(), av.len());
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                for i in 0..na {
                    let row = &g.data()[i * nb..(i + 1) * nb];
                    ga[i] = row.iter().zip(bv.data()).map(|(x, y)| x * y).sum();
                    for (acc, &x) in gb.iter_mut().zip(row) {
                        *acc += x * av.data()[i];
                    }
                }
                accumulate(grads, *a, DenseTensor::new(av.shape().to_vec(), ga)?)?;
                accumulate(grads, *b, DenseTensor::new(bv.shape().to_vec(), gb)?)?;
            }
            Op::Elementwise { a, b, dims } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, elementwise_product(g, bv, dims)?)?;
                // gradient for b sums g·A over the axes of A not in dims
                let prod = {
                    let mut p = g.clone();
                    for (x, y) in p.data_mut().iter_mut().zip(av.data()) {
                        *x *= y;
                    }
                    p
                };
                let mut gb = DenseTensor::zeros(bv.shape().to_vec());
                let bs = strides(bv.shape());
                let mut idx = vec![0; av.order()];
                for &val in prod.data() {
                    let off: usize = dims.iter().zip(&bs).map(|(&d, &s)| idx[d] * s).sum();
                    gb.data_mut()[off] += val;
                    crate::tensor::next_index(&mut idx, av.shape());
                }
                accumulate(grads, *b, gb)?;
            }
            Op::Contract { a, spec } => {
                let mut ga = contract_adjoint(g, self.value(*a).shape(), spec)?;
                if self.fault == Some(AdjointFault::ContractSign) {
                    ga = ga.scale(-1.0);
                }
                accumulate(grads, *a, ga)?;
            }
            Op::MixedProduct { a, b, mixed } => {
                let (ga, gb) = mixed_product_adjoint(g, self.value(*a), self.value(*b), mixed)?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Promote { a, map, lead } => {
                let ga = promote_map_adjoint(g, self.value(*a).shape(), map, *lead)?;
                accumulate(grads, *a, ga)?;
            }
            Op::Stack { slots } => {
                let width = slots.len();
                for (j, slot) in slots.iter().enumerate() {
                    if let Some(v) = slot {
                        let shape = self.value(*v).shape().to_vec();
                        let data = g.data().iter().skip(j).step_by(width).copied().collect();
                        accumulate(grads, *v, DenseTensor::new(shape, data)?)?;
                    }
                }
            }
            Op::Scatter {
                parts,
                parent_m,
                width,
            } => {
                for (v, map, slot) in parts {
                    let shape = self.value(*v).shape();
                    let gv = scatter_promoted_adjoint(g, shape, map, *slot, *parent_m, *width)?;
                    accumulate(grads, *v, gv)?;
                }
            }
            Op::LinComb { inputs, coeffs } => {
                for (&v, &c) in inputs.iter().zip(coeffs) {
                    accumulate(grads, v, g.scale(c))?;
                }
            }
            Op::Mix {
                parts,
                weight,
                bias,
            } => {
                let w = self.value(*weight);
                let (s_out, s, s0) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let rest = g.len() / s_out.max(1);
                let gd = g.data();
                let mut gw = vec![0.0; w.len()];
                let gb: Vec<f64> = (0..s_out)
                    .map(|i| gd[i * rest..(i + 1) * rest].iter().sum())
                    .collect();
                for (j, &(av, fv)) in parts.iter().enumerate() {
                    let a = self.value(av);
                    let ad = a.data();
                    let u = a.len() / s0.max(1);
                    // h[i, x] = Σ_y g[i, x, y] f[y]: the gradient reaching the
                    // mixed channels of `a` before the product with `f`.
                    let h: Vec<f64> = match fv {
                        None => gd.to_vec(),
                        Some(f) => {
                            let fd = self.value(f).data();
                            gd.chunks(fd.len().max(1))
                                .map(|block| block.iter().zip(fd).map(|(x, y)| x * y).sum())
                                .collect()
                        }
                    };
                    if let Some(f) = fv {
                        let fd = self.value(f).data();
                        let mixed = mix_channels(w, j, ad);
                        let mut gf = vec![0.0; fd.len()];
                        for (block, &p) in gd.chunks(fd.len().max(1)).zip(&mixed) {
                            for (acc, &x) in gf.iter_mut().zip(block) {
                                *acc += p * x;
                            }
                        }
                        let shape = self.value(f).shape().to_vec();
                        accumulate(grads, f, DenseTensor::new(shape, gf)?)?;
                    }
                    let mut ga = vec![0.0; a.len()];
                    for i in 0..s_out {
                        let hrow = &h[i * u..(i + 1) * u];
                        for c in 0..s0 {
                            let widx = (i * s + j) * s0 + c;
                            let src = &ad[c * u..(c + 1) * u];
                            gw[widx] += hrow.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
                            let coef = w.data()[widx];
                            if coef != 0.0 {
                                for (acc, &x) in ga[c * u..(c + 1) * u].iter_mut().zip(hrow) {
                                    *acc += coef * x;
                                }
                            }
                        }
                    }
                    accumulate(grads, av, DenseTensor::new(a.shape().to_vec(), ga)?)?;
                }
                accumulate(grads, *weight, DenseTensor::new(w.shape().to_vec(), gw)?)?;
                accumulate(grads, *bias, DenseTensor::vector(gb))?;
            }
            Op::MixSlice { a, weight, slot } => {
                let (av, w) = (self.value(*a), self.value(*weight));
                let (s_out, s, s0) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let u = av.len() / s0.max(1);
                let (ad, gd) = (av.data(), g.data());
                let mut gw = vec![0.0; w.len()];
                let mut ga = vec![0.0; av.len()];
                for i in 0..s_out {
                    let grow = &gd[i * u..(i + 1) * u];
                    for c in 0..s0 {
                        let widx = (i * s + slot) * s0 + c;
                        let src = &ad[c * u..(c + 1) * u];
                        gw[widx] = grow.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
                        let coef = w.data()[widx];
                        if coef != 0.0 {
                            for (acc, &x) in ga[c * u..(c + 1) * u].iter_mut().zip(grow) {
                                *acc += coef * x;
                            }
                        }
                    }
                }
                accumulate(grads, *a, DenseTensor::new(av.shape().to_vec(), ga)?)?;
                accumulate(grads, *weight, DenseTensor::new(w.shape().to_vec(), gw)?)?;
            }
            Op::SumProducts { parts, bias } => {
                let s_out = self.value(*bias).len();
                let rest = g.len() / s_out.max(1);
                let gd = g.data();
                let gb: Vec<f64> = gd.chunks(rest.max(1)).take(s_out).map(|r| r.iter().sum()).collect();
                for &(pv, fv) in parts {
                    let p = self.value(pv);
                    match fv {
                        None => accumulate(grads, pv, g.clone())?,
                        Some(f) => {
                            let fd = self.value(f).data();
                            let n = fd.len().max(1);
                            let gp: Vec<f64> = gd
                                .chunks(n)
                                .map(|block| block.iter().zip(fd).map(|(x, y)| x * y).sum())
                                .collect();
                            let mut gf = vec![0.0; fd.len()];
                            for (block, &x) in gd.chunks(n).zip(p.data()) {
                                for (acc, &y) in gf.iter_mut().zip(block) {
                                    *acc += x * y;
                                }
                            }
                            accumulate(grads, pv, DenseTensor::new(p.shape().to_vec(), gp)?)?;
                            let shape = self.value(f).shape().to_vec();
                            accumulate(grads, f, DenseTensor::new(shape, gf)?)?;
                        }
                    }
                }
                accumulate(grads, *bias, DenseTensor::vector(gb))?;
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (x, &y) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if y <= 0.0 {
                        *x = 0.0;
                    }
                }
                accumulate(grads, *a, ga)?;
            }
            Op::Affine { x, weight, bias } => {
                let (xv, w) = (self.value(*x), self.value(*weight));
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                let mut gw = vec![0.0; rows * cols];
                let mut gx = vec![0.0; cols];
                for i in 0..rows {
                    let gi = g.data()[i];
                    for j in 0..cols {
                        gw[i * cols + j] = gi * xv.data()[j];
                        gx[j] += gi * w.data()[i * cols + j];
                    }
                }
                accumulate(grads, *x, DenseTensor::vector(gx))?;
                accumulate(grads, *weight, DenseTensor::new(vec![rows, cols], gw)?)?;
                accumulate(grads, *bias, g.clone())?;
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let z = self.value(*logits).data();
                let lse = log_sum_exp(z);
                let scale = g.item();
                let data = z
                    .iter()
                    .enumerate()
                    .map(|(i, &zi)| scale * ((zi - lse).exp() - f64::from(u8::from(i == *target))))
                    .collect();
                accumulate(grads, *logits, DenseTensor::vector(data))?;
            }
            Op::MeanSquaredError { pred, target } => {
                let p = self.value(*pred);
                let k = 2.0 * g.item() / target.len() as f64;
                let data = p.data().iter().zip(target).map(|(a, b)| k * (a - b)).collect();
                accumulate(grads, *pred, DenseTensor::new(p.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}

/// `W[i, j, ..]` for a mixing weight of shape `[s', s, s0]`.
fn weight_row(w: &DenseTensor, i: usize, j: usize) -> &[f64] {
    let (s, s0) = (w.shape()[1], w.shape()[2]);
    &w.data()[(i * s + j) * s0..(i * s + j + 1) * s0]
}

/// Channels of `src` (one row of `n` values each) with a nonzero entry.
/// Histogram inputs and post-ReLU activations have many all-zero channels.
fn active_channels(src: &[f64], n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    src.chunks(n)
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&x| x != 0.0))
        .map(|(c, _)| c)
        .collect()
}

/// `row += Σ_c coefs[c] · src[c, ..]` over the listed channels, where `src`
/// holds one row per channel.
fn combine_channels(row: &mut [f64], coefs: &[f64], src: &[f64], active: &[usize]) {
    let n = row.len();
    let line = |c: usize| &src[c * n..(c + 1) * n];
    // Four channels per pass over the output row.
    let mut quads = active.chunks_exact(4);
    for q in &mut quads {
        let k = [coefs[q[0]], coefs[q[1]], coefs[q[2]], coefs[q[3]]];
        let (q0, q1, q2, q3) = (line(q[0]), line(q[1]), line(q[2]), line(q[3]));
        for x in 0..n {
            row[x] += k[0] * q0[x] + k[1] * q1[x] + k[2] * q2[x] + k[3] * q3[x];
        }
    }
    for &c in quads.remainder() {
        for (o, &x) in row.iter_mut().zip(line(c)) {
            *o += coefs[c] * x;
        }
    }
}

/// `out[i, x] = Σ_c W[i, j, c] · a[c, x]` for every output channel `i`.
fn mix_channels(w: &DenseTensor, j: usize, a: &[f64]) -> Vec<f64> {
    let (s_out, s0) = (w.shape()[0], w.shape()[2]);
    let u = a.len() / s0.max(1);
    let active = active_channels(a, u);
    let mut out = vec![0.0; s_out * u];
    for i in 0..s_out {
        combine_channels(&mut out[i * u..(i + 1) * u], weight_row(w, i, j), a, &active);
    }
    out
}

/// `out[i, x, y] += p[i, x] · f[y]`, with `out` and `p` row-major.
fn add_outer(out: &mut [f64], p: &[f64], f: &[f64]) {
    match f {
        [y] => {
            for (o, &x) in out.iter_mut().zip(p) {
                *o += x * y;
            }
        }
        _ => {
            for (block, &x) in out.chunks_mut(f.len().max(1)).zip(p) {
                if x != 0.0 {
                    for (o, &y) in block.iter_mut().zip(f) {
                        *o += x * y;
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<DenseTensor>], v: Var, g: DenseTensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
