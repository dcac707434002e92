//! Covariant aggregation: promotion of child activations into the parent's
//! receptive field, stacking, the adjacency product, contraction, channel
//! mixing and the invariant readout.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autodiff::{ScatterPart, Tape, Var};
use crate::error::{ensure, CcnError, Result};
use crate::scheme::ReceptiveField;
use crate::tensor::{
    enumerate_contractions, split_product_spec, tensor_product, ContractionSpec, DenseTensor,
    SplitProduct,
};

/// Activation of one node: `c` channels, each a cubic tensor over the field.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeActivation {
    field: ReceptiveField,
    channels: Vec<DenseTensor>,
}

impl NodeActivation {
    pub fn new(field: ReceptiveField, channels: Vec<DenseTensor>) -> Result<Self> {
        ensure!(!channels.is_empty(), Shape, "activation needs at least one channel");
        let order = channels[0].order();
        let m = field.len();
        for (i, c) in channels.iter().enumerate() {
            ensure!(
                c.order() == order && c.shape().iter().all(|&n| n == m),
                Shape,
                "channel {i} has shape {:?}, expected order {order} with extent {m}",
                c.shape()
            );
        }
        Ok(Self { field, channels })
    }

    pub fn field(&self) -> &ReceptiveField {
        &self.field
    }

    pub fn channels(&self) -> &[DenseTensor] {
        &self.channels
    }

    pub fn order(&self) -> usize {
        self.channels[0].order()
    }

    /// Channels packed as one tensor with a leading channel axis.
    pub fn packed(&self) -> DenseTensor {
        let mut shape = vec![self.channels.len()];
        shape.extend_from_slice(self.channels[0].shape());
        let data = self.channels.iter().flat_map(|c| c.data().iter().copied()).collect();
        DenseTensor::new(shape, data).expect("channels share a shape")
    }

    /// Splits a tensor with a leading channel axis into an activation.
    pub fn unpack(field: ReceptiveField, packed: &DenseTensor) -> Result<Self> {
        ensure!(packed.order() >= 1, Shape, "packed activation needs a channel axis");
        let c = packed.shape()[0];
        let inner_shape = packed.shape()[1..].to_vec();
        let inner: usize = inner_shape.iter().product();
        let channels = (0..c)
            .map(|i| {
                DenseTensor::new(
                    inner_shape.clone(),
                    packed.data()[i * inner..(i + 1) * inner].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(field, channels)
    }
}

/// Zero/one matrix `χ ∈ {0,1}^{m×m'}` with `χ[i][j] = 1` iff the parent's
/// `j`-th vertex is the child's `i`-th vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct PromotionMatrix {
    rows: usize,
    cols: usize,
    chi: Vec<f64>,
}

impl PromotionMatrix {
    pub fn new(rows: usize, cols: usize, chi: Vec<f64>) -> Result<Self> {
        ensure!(chi.len() == rows * cols, Shape, "χ needs {} entries", rows * cols);
        let mut col_used = vec![false; cols];
        for i in 0..rows {
            let row = &chi[i * cols..(i + 1) * cols];
            ensure!(
                row.iter().all(|&x| x == 0.0 || x == 1.0),
                Invalid,
                "χ must be zero/one"
            );
            let ones: Vec<usize> = (0..cols).filter(|&j| row[j] == 1.0).collect();
            ensure!(ones.len() == 1, Invalid, "row {i} of χ has {} ones", ones.len());
            ensure!(!col_used[ones[0]], Invalid, "column {} of χ used twice", ones[0]);
            col_used[ones[0]] = true;
        }
        Ok(Self { rows, cols, chi })
    }

    pub fn between(child: &ReceptiveField, parent: &ReceptiveField) -> Result<Self> {
        let (m, mp) = (child.len(), parent.len());
        let mut chi = vec![0.0; m * mp];
        for (i, &v) in child.vertices().iter().enumerate() {
            let j = parent.position(v).ok_or_else(|| {
                CcnError::Invalid(format!("child vertex {v} is not in the parent field"))
            })?;
            chi[i * mp + j] = 1.0;
        }
        Self::new(m, mp, chi)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.chi[i * self.cols + j]
    }

    /// Parent position of each child position.
    pub fn map(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| (0..self.cols).find(|&j| self.get(i, j) == 1.0).unwrap())
            .collect()
    }
}

/// Promotion by explicit contraction with `χᵀ` on every index:
/// `F̃[i1..ik] = Σ χᵀ[i1][j1] … χᵀ[ik][jk] F[j1..jk]`.
pub fn promote(child: &DenseTensor, chi: &PromotionMatrix) -> Result<DenseTensor> {
    let m = chi.rows();
    ensure!(
        child.shape().iter().all(|&n| n == m),
        Shape,
        "child of shape {:?} does not match χ with {m} rows",
        child.shape()
    );
    let mp = chi.cols();
    let mut current = child.clone();
    // one mode product per axis: axis a goes from extent m to extent m'
    for axis in 0..child.order() {
        let shape = current.shape().to_vec();
        let before: usize = shape[..axis].iter().product();
        let after: usize = shape[axis + 1..].iter().product();
        let mut next_shape = shape.clone();
        next_shape[axis] = mp;
        let mut data = vec![0.0; before * mp * after];
        for b in 0..before {
            for i in 0..mp {
                for j in 0..m {
                    let w = chi.get(j, i);
                    if w == 0.0 {
                        continue;
                    }
                    for a in 0..after {
                        data[(b * mp + i) * after + a] +=
                            w * current.data()[(b * m + j) * after + a];
                    }
                }
            }
        }
        current = DenseTensor::new(next_shape, data)?;
    }
    Ok(current)
}

/// Calls `f(child_offset, parent_offset)` for every entry of an order-`order`
/// block promoted through `map`, in child row-major order.
fn for_each_promoted(map: &[usize], parent_m: usize, order: usize, mut f: impl FnMut(usize, usize)) {
    match order {
        0 => f(0, 0),
        1 => map.iter().enumerate().for_each(|(a, &p)| f(a, p)),
        2 => {
            let m = map.len();
            for (a, &p) in map.iter().enumerate() {
                for (b, &q) in map.iter().enumerate() {
                    f(a * m + b, p * parent_m + q);
                }
            }
        }
        _ => promotion_table(map, parent_m, order)
            .into_iter()
            .enumerate()
            .for_each(|(i, p)| f(i, p)),
    }
}

fn promotion_table(map: &[usize], parent_m: usize, order: usize) -> Vec<usize> {
    let m = map.len();
    let mut table = vec![0usize];
    for _ in 0..order {
        let mut next = Vec::with_capacity(table.len() * m);
        for &base in &table {
            for &p in map {
                next.push(base * parent_m + p);
            }
        }
        table = next;
    }
    table
}

/// Promotion as an index scatter, for tensors whose first `lead` axes are
/// channels. `map[a]` is the parent position of child position `a`.
pub(crate) fn promote_map(
    t: &DenseTensor,
    map: &[usize],
    parent_m: usize,
    lead: usize,
) -> Result<DenseTensor> {
    ensure!(t.order() >= lead, Shape, "tensor has fewer than {lead} leading axes");
    let order = t.order() - lead;
    ensure!(
        t.shape()[lead..].iter().all(|&n| n == map.len()),
        Shape,
        "child shape {:?} does not match a field of size {}",
        t.shape(),
        map.len()
    );
    ensure!(
        map.iter().all(|&p| p < parent_m),
        Shape,
        "promotion map {map:?} out of range for parent size {parent_m}"
    );
    let table = promotion_table(map, parent_m, order);
    let lead_size: usize = t.shape()[..lead].iter().product();
    let child_block = table.len();
    let parent_block = parent_m.pow(order as u32);
    let mut out = vec![0.0; lead_size * parent_block];
    for l in 0..lead_size {
        let src = &t.data()[l * child_block..(l + 1) * child_block];
        let dst = &mut out[l * parent_block..(l + 1) * parent_block];
        for (&x, &p) in src.iter().zip(&table) {
            dst[p] = x;
        }
    }
    let mut shape = t.shape()[..lead].to_vec();
    shape.extend(std::iter::repeat(parent_m).take(order));
    DenseTensor::new(shape, out)
}

/// Promotions of several channel-leading tensors `[c, m_i^k]` into one
/// parent field of size `parent_m`, summed, or with `width` stacked along a
/// new trailing axis at each part's slot. `parts` holds `(tensor, map, slot)`;
/// slots are ignored when summing.
pub(crate) fn scatter_promoted(
    parts: &[(&DenseTensor, &[usize], usize)],
    parent_m: usize,
    width: Option<usize>,
) -> Result<DenseTensor> {
    let (first, _, _) = parts
        .first()
        .ok_or_else(|| CcnError::Shape("scatter needs at least one part".into()))?;
    ensure!(first.order() >= 1, Shape, "scattered tensors need a channel axis");
    let (c, order) = (first.shape()[0], first.order() - 1);
    let w = width.unwrap_or(1);
    let parent_block = parent_m.pow(order as u32);
    let mut out = vec![0.0; c * parent_block * w];
    for &(t, map, slot) in parts {
        ensure!(
            t.order() == order + 1
                && t.shape()[0] == c
                && t.shape()[1..].iter().all(|&n| n == map.len()),
            Shape,
            "scattered part of shape {:?} does not match [{c}, {}^{order}]",
            t.shape(),
            map.len()
        );
        ensure!(
            map.iter().all(|&p| p < parent_m) && slot < width.unwrap_or(usize::MAX),
            Shape,
            "map {map:?} or slot {slot} out of range for parent size {parent_m}"
        );
        let slot = if width.is_some() { slot } else { 0 };
        let child_block = map.len().pow(order as u32);
        let src = t.data();
        for_each_promoted(map, parent_m, order, |i, p| {
            for l in 0..c {
                out[(l * parent_block + p) * w + slot] += src[l * child_block + i];
            }
        });
    }
    let mut shape = vec![c];
    shape.extend(std::iter::repeat(parent_m).take(order));
    shape.extend(width);
    DenseTensor::new(shape, out)
}

/// Adjoint of [`scatter_promoted`] for one part of shape `shape`.
pub(crate) fn scatter_promoted_adjoint(
    grad: &DenseTensor,
    shape: &[usize],
    map: &[usize],
    slot: usize,
    parent_m: usize,
    width: Option<usize>,
) -> Result<DenseTensor> {
    let (c, order) = (shape[0], shape.len() - 1);
    let w = width.unwrap_or(1);
    let parent_block = parent_m.pow(order as u32);
    ensure!(
        grad.len() == c * parent_block * w,
        Shape,
        "scatter gradient has {} entries, expected {}",
        grad.len(),
        c * parent_block * w
    );
    let slot = if width.is_some() { slot } else { 0 };
    let child_block = map.len().pow(order as u32);
    let g = grad.data();
    let mut out = vec![0.0; c * child_block];
    for_each_promoted(map, parent_m, order, |i, p| {
        for l in 0..c {
            out[l * child_block + i] = g[(l * parent_block + p) * w + slot];
        }
    });
    DenseTensor::new(shape.to_vec(), out)
}

/// Adjoint of [`promote_map`]: gathers the child's entries back out.
pub(crate) fn promote_map_adjoint(
    grad: &DenseTensor,
    child_shape: &[usize],
    map: &[usize],
    lead: usize,
) -> Result<DenseTensor> {
    let order = child_shape.len() - lead;
    let parent_m = if order == 0 {
        1
    } else {
        grad.shape()[lead]
    };
    let table = promotion_table(map, parent_m, order);
    let lead_size: usize = child_shape[..lead].iter().product();
    let child_block = table.len();
    let parent_block = parent_m.pow(order as u32);
    ensure!(
        grad.len() == lead_size * parent_block,
        Shape,
        "promotion gradient has {} entries, expected {}",
        grad.len(),
        lead_size * parent_block
    );
    let mut out = vec![0.0; lead_size * child_block];
    for l in 0..lead_size {
        let src = &grad.data()[l * parent_block..(l + 1) * parent_block];
        for (x, &p) in out[l * child_block..(l + 1) * child_block]
            .iter_mut()
            .zip(&table)
        {
            *x = src[p];
        }
    }
    DenseTensor::new(child_shape.to_vec(), out)
}

/// Stacks promoted tensors as slices of a tensor one order higher: the last
/// index ranges over the `width` parent positions, and slice `slots[u]`
/// holds `promoted[u]`; unclaimed slices are zero.
pub fn stack(promoted: &[DenseTensor], slots: &[usize], width: usize) -> Result<DenseTensor> {
    ensure!(
        promoted.len() == slots.len(),
        Shape,
        "{} tensors but {} slots",
        promoted.len(),
        slots.len()
    );
    ensure!(!promoted.is_empty(), Shape, "nothing to stack");
    let shape = promoted[0].shape().to_vec();
    ensure!(
        shape.iter().all(|&n| n == width),
        Shape,
        "promoted shape {shape:?} does not match parent extent {width}"
    );
    let mut tape = Tape::new();
    let mut filled: Vec<Option<Var>> = vec![None; width];
    for (t, &slot) in promoted.iter().zip(slots) {
        ensure!(slot < width, Shape, "slot {slot} out of range for width {width}");
        ensure!(filled[slot].is_none(), Invalid, "two children claim slice {slot}");
        filled[slot] = Some(tape.leaf(t.clone()));
    }
    let out = tape.stack(&filled)?;
    Ok(tape.value(out).clone())
}

/// `T ⊗ A↓` for a cubic stacked tensor and the restricted adjacency.
pub fn adjacency_product(t: &DenseTensor, a_restricted: &DenseTensor) -> Result<DenseTensor> {
    ensure!(
        a_restricted.order() == 2 && a_restricted.is_cubic(),
        Shape,
        "restricted adjacency must be square"
    );
    let m = a_restricted.shape()[0];
    ensure!(
        t.order() >= 1 && t.shape().iter().all(|&n| n == m),
        Shape,
        "stacked tensor {:?} does not match adjacency extent {m}",
        t.shape()
    );
    Ok(tensor_product(t, a_restricted))
}

/// Parameters of one aggregation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `s' × s × s0`: output channels × contractions × input channels.
    pub weight: DenseTensor,
    pub bias: DenseTensor,
    pub order: usize,
    pub use_adjacency: bool,
    /// Indices into `enumerate_contractions(order_in, order)`.
    pub contraction_subset: Vec<usize>,
    specs: Vec<ContractionSpec>,
    /// Each spec shifted past the channel axis, split against the adjacency
    /// factor when the layer uses it.
    channel_specs: Vec<ChannelSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct ChannelSpec {
    spec: ContractionSpec,
    split: Option<SplitProduct>,
    /// The contraction applied to the stacked children: `spec` itself, or
    /// its stacked-side factor when split.
    stacked: ContractionSpec,
    /// For a projection `stacked`: the same projection on a child's own
    /// axes, and whether the slot axis survives.
    child: Option<(ContractionSpec, bool)>,
}

impl ChannelSpec {
    fn new(spec: &ContractionSpec, order: usize, use_adjacency: bool) -> Result<Self> {
        // Stacked input: channel axis, `order` field axes and the slot axis.
        let spec = spec.shifted(1);
        let split = if use_adjacency {
            Some(split_product_spec(order + 2, 2, &spec)?)
        } else {
            None
        };
        let stacked = split.as_ref().map_or(&spec, |s| &s.a_spec).clone();
        let child = if stacked.is_projection() {
            let removed = stacked.removed();
            let slot_axis = order + 1;
            let field_axes: Vec<usize> = removed.iter().copied().filter(|&a| a < slot_axis).collect();
            let child_spec = ContractionSpec::projection(order + 1, &field_axes)?;
            Some((child_spec, !removed.contains(&slot_axis)))
        } else {
            None
        };
        Ok(Self {
            spec,
            split,
            stacked,
            child,
        })
    }
}

impl LayerParams {
    pub fn new(
        weight: DenseTensor,
        bias: DenseTensor,
        order: usize,
        use_adjacency: bool,
        contraction_subset: Vec<usize>,
    ) -> Result<Self> {
        let catalog = enumerate_contractions(contraction_input_order(order, use_adjacency), order)?;
        let specs = contraction_subset
            .iter()
            .map(|&i| {
                catalog.get(i).cloned().ok_or_else(|| {
                    CcnError::Invalid(format!(
                        "contraction id {i} out of range for a catalog of {}",
                        catalog.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ensure!(!specs.is_empty(), Invalid, "layer needs at least one contraction");
        ensure!(weight.order() == 3, Shape, "weight must be s' × s × s0");
        ensure!(
            weight.shape()[1] == specs.len(),
            Shape,
            "weight has {} contraction slots for {} contractions",
            weight.shape()[1],
            specs.len()
        );
        ensure!(
            bias.shape() == [weight.shape()[0]],
            Shape,
            "bias {:?} for {} output channels",
            bias.shape(),
            weight.shape()[0]
        );
        let channel_specs = specs
            .iter()
            .map(|spec| ChannelSpec::new(spec, order, use_adjacency))
            .collect::<Result<_>>()?;
        Ok(Self {
            weight,
            bias,
            order,
            use_adjacency,
            contraction_subset,
            specs,
            channel_specs,
        })
    }

    pub fn specs(&self) -> &[ContractionSpec] {
        &self.specs
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Order of the tensor the contractions act on: `k+1` after stacking, `k+3`
/// after the adjacency product.
pub fn contraction_input_order(order: usize, use_adjacency: bool) -> usize {
    order + 1 + if use_adjacency { 2 } else { 0 }
}

/// One child as seen by its parent: the child's own vertex, its field and its
/// packed activation `[c, m_child^k]`.
#[derive(Debug, Clone)]
pub struct ChildInput<'a> {
    pub vertex: usize,
    pub field: &'a ReceptiveField,
    pub activation: Var,
}

/// Contractions of one recorded tensor, memoized by spec. Projections over
/// several axes are taken one axis at a time so they share partial sums.
struct Contractions {
    source: Var,
    done: Vec<(ContractionSpec, Var)>,
}

impl Contractions {
    fn new(source: Var) -> Self {
        Self {
            source,
            done: Vec::new(),
        }
    }

    fn get(&mut self, tape: &mut Tape, spec: &ContractionSpec) -> Result<Var> {
        if spec.groups().is_empty() {
            return Ok(self.source);
        }
        if let Some((_, v)) = self.done.iter().find(|(s, _)| s == spec) {
            return Ok(*v);
        }
        let v = if spec.is_projection() && spec.groups().len() > 1 {
            let mut axes = spec.removed();
            let last = axes.pop().expect("at least two axes");
            let partial = self.get(tape, &ContractionSpec::projection(spec.order_in(), &axes)?)?;
            tape.project(partial, &[last - axes.len()])?
        } else {
            tape.contract(self.source, spec)?
        };
        self.done.push((spec.clone(), v));
        Ok(v)
    }
}

/// Projections of child activations, shared by every parent that sees the
/// same child on one tape.
#[derive(Default)]
pub struct ChildProjections {
    projected: BTreeMap<Var, Contractions>,
    /// `(tensor, weight, slot)` to the tensor mixed by `W[:, slot, :]`.
    mixed: BTreeMap<(Var, Var, usize), Var>,
}

impl ChildProjections {
    fn project(&mut self, tape: &mut Tape, act: Var, spec: &ContractionSpec) -> Result<Var> {
        self.projected
            .entry(act)
            .or_insert_with(|| Contractions::new(act))
            .get(tape, spec)
    }

    fn mix(&mut self, tape: &mut Tape, a: Var, weight: Var, j: usize) -> Result<Var> {
        if let Some(&v) = self.mixed.get(&(a, weight, j)) {
            return Ok(v);
        }
        let v = tape.mix_slice(a, weight, j)?;
        self.mixed.insert((a, weight, j), v);
        Ok(v)
    }
}

/// The stacked, promoted children `[c, m^k, m]` of one parent, built only
/// when a contraction needs it. A projection of the stack equals the sum or
/// stack of the children's own projections promoted into the parent field,
/// which skips the mostly-zero dense tensor.
struct StackedInput {
    /// `(activation, promotion map, slot)` per child.
    kids: Vec<ScatterPart>,
    width: usize,
    order: usize,
    dense: Option<Contractions>,
    done: Vec<(ContractionSpec, Var)>,
}

impl StackedInput {
    fn new(kids: Vec<ScatterPart>, width: usize, order: usize) -> Self {
        Self {
            kids,
            width,
            order,
            dense: None,
            done: Vec::new(),
        }
    }

    fn contract(
        &mut self,
        tape: &mut Tape,
        plan: &ChannelSpec,
        memo: &mut ChildProjections,
    ) -> Result<Var> {
        let spec = &plan.stacked;
        if let Some((_, v)) = self.done.iter().find(|(s, _)| s == spec) {
            return Ok(*v);
        }
        let v = if let Some((child_spec, stack)) = &plan.child {
            let mut parts = Vec::with_capacity(self.kids.len());
            for (act, map, slot) in &self.kids {
                parts.push((memo.project(tape, *act, child_spec)?, map.clone(), *slot));
            }
            tape.scatter(&parts, self.width, stack.then_some(self.width))?
        } else {
            self.dense(tape)?.get(tape, spec)?
        };
        self.done.push((spec.clone(), v));
        Ok(v)
    }

    /// `W[:, j, :]` applied to the stacked contraction of `plan`. Mixing
    /// acts on channels only, so for projections it is applied to each
    /// child's projection before promotion and shared through `memo`.
    fn mixed(
        &mut self,
        tape: &mut Tape,
        plan: &ChannelSpec,
        weight: Var,
        j: usize,
        memo: &mut ChildProjections,
    ) -> Result<Var> {
        let Some((child_spec, stack)) = &plan.child else {
            let a = self.contract(tape, plan, memo)?;
            return tape.mix_slice(a, weight, j);
        };
        let mut parts = Vec::with_capacity(self.kids.len());
        for (act, map, slot) in &self.kids {
            let projected = memo.project(tape, *act, child_spec)?;
            parts.push((memo.mix(tape, projected, weight, j)?, map.clone(), *slot));
        }
        tape.scatter(&parts, self.width, stack.then_some(self.width))
    }

    fn dense(&mut self, tape: &mut Tape) -> Result<&mut Contractions> {
        if self.dense.is_none() {
            let mut slots: Vec<Option<Var>> = vec![None; self.width];
            for (act, map, slot) in &self.kids {
                slots[*slot] = Some(if self.order == 0 {
                    *act
                } else {
                    tape.promote(*act, map, self.width, 1)?
                });
            }
            self.dense = Some(Contractions::new(tape.stack(&slots)?));
        }
        Ok(self.dense.as_mut().expect("just built"))
    }
}

/// Records the aggregation (promote, stack, adjacency product, contract, mix,
/// ReLU) on `tape` and returns the packed output `[s', m^k]`.
pub fn record_aggregate(
    tape: &mut Tape,
    parent: &ReceptiveField,
    children: &[ChildInput<'_>],
    layer: &LayerParams,
    weight: Var,
    bias: Var,
    adjacency: Option<Var>,
) -> Result<Var> {
    let mut memo = ChildProjections::default();
    record_aggregate_shared(tape, parent, children, layer, weight, bias, adjacency, &mut memo)
}

/// [`record_aggregate`] reusing child projections already recorded in
/// `memo` by sibling parents.
#[allow(clippy::too_many_arguments)]
pub fn record_aggregate_shared(
    tape: &mut Tape,
    parent: &ReceptiveField,
    children: &[ChildInput<'_>],
    layer: &LayerParams,
    weight: Var,
    bias: Var,
    adjacency: Option<Var>,
    memo: &mut ChildProjections,
) -> Result<Var> {
    let width = parent.len();
    let k = layer.order;
    let mut kids: Vec<ScatterPart> = Vec::with_capacity(children.len());
    let mut claimed = vec![false; width];
    for child in children {
        let slot = parent.position(child.vertex).ok_or_else(|| {
            CcnError::Invalid(format!("child vertex {} not in parent field", child.vertex))
        })?;
        ensure!(!claimed[slot], Invalid, "two children claim slice {slot}");
        claimed[slot] = true;
        let act = tape.value(child.activation);
        ensure!(
            act.order() == k + 1,
            Shape,
            "child activation has order {} (with channel axis), layer order is {k}",
            act.order()
        );
        let map: Rc<[usize]> = child
            .field
            .vertices()
            .iter()
            .map(|&v| {
                parent.position(v).ok_or_else(|| {
                    CcnError::Invalid(format!("vertex {v} of a child not in parent field"))
                })
            })
            .collect::<Result<_>>()?;
        kids.push((child.activation, map, slot));
    }
    ensure!(!kids.is_empty(), Invalid, "aggregation needs at least one child");
    let mut stacked = StackedInput::new(kids, width, k);
    let mut from_adjacency = adjacency.map(Contractions::new);
    let mut parts = Vec::with_capacity(layer.specs().len());
    for (j, plan) in layer.channel_specs.iter().enumerate() {
        let part = match (&plan.split, from_adjacency.as_mut()) {
            (Some(split), Some(adj)) => {
                let b = adj.get(tape, &split.b_spec)?;
                if split.mixed.is_empty() {
                    (stacked.mixed(tape, plan, weight, j, memo)?, Some(b))
                } else {
                    let a = stacked.contract(tape, plan, memo)?;
                    let q = tape.mixed_product(a, b, split.mixed.clone())?;
                    (tape.mix_slice(q, weight, j)?, None)
                }
            }
            (Some(_), None) => {
                return Err(CcnError::Invalid(
                    "layer uses the adjacency product but none was supplied".into(),
                ))
            }
            (None, _) => (stacked.mixed(tape, plan, weight, j, memo)?, None),
        };
        parts.push(part);
    }
    let out = tape.sum_products(&parts, bias)?;
    Ok(tape.relu(out))
}

/// Aggregates child activations into the parent node's activation.
pub fn aggregate(
    parent: &ReceptiveField,
    children: &[(usize, NodeActivation)],
    layer: &LayerParams,
    adjacency: &DenseTensor,
) -> Result<NodeActivation> {
    let mut tape = Tape::new();
    let packed: Vec<(usize, Var)> = children
        .iter()
        .map(|(v, act)| {
            ensure!(
                act.order() == layer.order,
                Shape,
                "child order {} does not match layer order {}",
                act.order(),
                layer.order
            );
            ensure!(
                act.channels().len() == layer.in_channels(),
                Shape,
                "child has {} channels, layer expects {}",
                act.channels().len(),
                layer.in_channels()
            );
            Ok((*v, tape.leaf(act.packed())))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<ChildInput<'_>> = children
        .iter()
        .zip(&packed)
        .map(|((_, act), &(vertex, var))| ChildInput {
            vertex,
            field: act.field(),
            activation: var,
        })
        .collect();
    let w = tape.leaf(layer.weight.clone());
    let b = tape.leaf(layer.bias.clone());
    let a = tape.leaf(adjacency.clone());
    let out = record_aggregate(&mut tape, parent, &inputs, layer, w, b, Some(a))?;
    NodeActivation::unpack(parent.clone(), tape.value(out))
}

/// Final affine map of the readout: `weight` is `out × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
}

/// Records the readout: every channel of every node fully projected to a
/// scalar, summed over nodes, then mapped by the affine head.
pub fn record_readout(tape: &mut Tape, inputs: &[Var], weight: Var, bias: Var) -> Result<Var> {
    ensure!(!inputs.is_empty(), Invalid, "readout over no nodes");
    let mut scalars = Vec::with_capacity(inputs.len());
    for &v in inputs {
        let order = tape.value(v).order();
        let spec = ContractionSpec::full_projection(order - 1).shifted(1);
        scalars.push(tape.contract(v, &spec)?);
    }
    let pooled = tape.sum(&scalars)?;
    tape.affine(pooled, weight, bias)
}

pub fn readout(root_inputs: &[NodeActivation], params: &ReadoutParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let inputs: Vec<Var> = root_inputs.iter().map(|a| tape.leaf(a.packed())).collect();
    let w = tape.leaf(params.weight.clone());
    let b = tape.leaf(params.bias.clone());
    let out = record_readout(&mut tape, &inputs, w, b)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perm::{all_permutations, Permutation};
    use crate::tensor::{contract, linear_combination, permute_action};

    fn field(v: &[usize], level: usize) -> ReceptiveField {
        ReceptiveField::new(v.to_vec(), level).unwrap()
    }

    #[test]
    fn promotion_identity_and_placement() {
        let p = field(&[1, 2, 3], 1);
        let chi = PromotionMatrix::between(&p, &p).unwrap();
        let t = DenseTensor::new(vec![3, 3], (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(promote(&t, &chi).unwrap(), t);

        let child = field(&[2, 3], 1);
        let chi = PromotionMatrix::between(&child, &p).unwrap();
        let v = DenseTensor::vector(vec![5.0, 7.0]);
        assert_eq!(promote(&v, &chi).unwrap(), DenseTensor::vector(vec![0.0, 5.0, 7.0]));
        assert!(promote(&DenseTensor::vector(vec![1.0; 3]), &chi).is_err());
        assert!(PromotionMatrix::between(&p, &child).is_err());
    }

    #[test]
    fn promotion_matrix_validation() {
        assert!(PromotionMatrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).is_err());
        assert!(PromotionMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).is_err());
        assert!(PromotionMatrix::new(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn scatter_promotion_matches_chi_contraction() {
        let parent = field(&[0, 2, 4, 5], 2);
        let child = field(&[5, 0, 4], 1);
        let chi = PromotionMatrix::between(&child, &parent).unwrap();
        let t = DenseTensor::new(vec![3, 3], (0..9).map(|x| x as f64 - 3.5).collect()).unwrap();
        let a = promote(&t, &chi).unwrap();
        let b = promote_map(&t, &chi.map(), 4, 0).unwrap();
        assert_eq!(a, b);
        let g = DenseTensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let back = promote_map_adjoint(&g, &[3, 3], &chi.map(), 0).unwrap();
        // gather equals χ-contraction with the transposed roles
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(back.get(&[i, j]), g.get(&[chi.map()[i], chi.map()[j]]));
            }
        }
    }

    #[test]
    fn stacking_examples() {
        let single = DenseTensor::new(vec![1, 1], vec![3.0]).unwrap();
        let s = stack(&[single.clone()], &[0], 1).unwrap();
        assert_eq!(s.shape(), &[1, 1, 1]);
        assert_eq!(s.data(), single.data());

        let s = stack(
            &[DenseTensor::scalar(4.0), DenseTensor::scalar(9.0)],
            &[0, 2],
            3,
        )
        .unwrap();
        assert_eq!(s, DenseTensor::vector(vec![4.0, 0.0, 9.0]));
        assert!(stack(
            &[DenseTensor::scalar(1.0), DenseTensor::scalar(2.0)],
            &[1, 1],
            3
        )
        .is_err());
    }

    #[test]
    fn adjacency_product_orders() {
        let t = DenseTensor::zeros(vec![3, 3, 3]);
        let a = DenseTensor::zeros(vec![3, 3]);
        let h = adjacency_product(&t, &a).unwrap();
        assert_eq!(h.order(), 5);
        assert!(h.data().iter().all(|&x| x == 0.0));
        assert!(adjacency_product(&t, &DenseTensor::zeros(vec![2, 2])).is_err());
    }

    fn zeroth_layer(w: f64) -> LayerParams {
        LayerParams::new(
            DenseTensor::new(vec![1, 1, 1], vec![w]).unwrap(),
            DenseTensor::vector(vec![0.0]),
            0,
            false,
            vec![0],
        )
        .unwrap()
    }

    #[test]
    fn zeroth_order_aggregation_sums_children() {
        let parent = field(&[0, 1, 2], 1);
        let children: Vec<(usize, NodeActivation)> = (0..3)
            .map(|v| {
                (
                    v,
                    NodeActivation::new(field(&[v], 0), vec![DenseTensor::scalar(v as f64 + 1.0)])
                        .unwrap(),
                )
            })
            .collect();
        let adj = DenseTensor::zeros(vec![3, 3]);
        let out = aggregate(&parent, &children, &zeroth_layer(1.0), &adj).unwrap();
        assert_eq!(out.channels()[0].item(), 6.0);
    }

    #[test]
    fn first_order_matches_hand_rolled_matrix_form() {
        // two children over a parent of size 2, one input channel
        let parent = field(&[0, 1], 1);
        let c0 = NodeActivation::new(field(&[0, 1], 1), vec![DenseTensor::vector(vec![1.0, 2.0])])
            .unwrap();
        let c1 = NodeActivation::new(field(&[1], 0), vec![DenseTensor::vector(vec![3.0])]).unwrap();
        let w = [0.5, -1.0, 2.0, 0.25];
        let b = [0.1, -20.0];
        let layer = LayerParams::new(
            DenseTensor::new(vec![2, 2, 1], w.to_vec()).unwrap(),
            DenseTensor::vector(b.to_vec()),
            1,
            false,
            vec![0, 1],
        )
        .unwrap();
        let out = aggregate(
            &parent,
            &[(0, c0), (1, c1)],
            &layer,
            &DenseTensor::zeros(vec![2, 2]),
        )
        .unwrap();
        // T columns are the promoted children: [1,2] and [0,3]
        let t = [[1.0, 0.0], [2.0, 3.0]];
        let tt1 = [t[0][0] + t[1][0], t[0][1] + t[1][1]]; // Tᵀ1: sum over rows
        let t1 = [t[0][0] + t[0][1], t[1][0] + t[1][1]]; // T1: sum over columns
        for i in 0..2 {
            for a in 0..2 {
                let pre = w[i * 2] * tt1[a] + w[i * 2 + 1] * t1[a] + b[i];
                assert!((out.channels()[i].get(&[a]) - pre.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn second_order_aggregation_is_covariant() {
        let parent_vertices = [0, 1, 2, 3];
        let child_fields: [&[usize]; 3] = [&[0, 1], &[1, 2, 3], &[0, 3]];
        let child_vertex = [0, 2, 3];
        let acts: Vec<NodeActivation> = child_fields
            .iter()
            .enumerate()
            .map(|(u, f)| {
                let m = f.len();
                let data = (0..m * m).map(|x| ((x * 7 + u * 3) % 5) as f64 - 2.0).collect();
                NodeActivation::new(field(f, 1), vec![DenseTensor::new(vec![m, m], data).unwrap()])
                    .unwrap()
            })
            .collect();
        let adj_full = [
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
        ];
        let specs: Vec<usize> = (0..12).collect();
        let weight = DenseTensor::new(
            vec![2, 12, 1],
            (0..24).map(|x| ((x % 7) as f64 - 3.0) * 0.3).collect(),
        )
        .unwrap();
        let layer = LayerParams::new(weight, DenseTensor::vector(vec![0.5, -0.25]), 2, true, specs)
            .unwrap();
        let run = |pi: &Permutation| {
            let parent = field(&pi.reorder(&parent_vertices), 2);
            let a = DenseTensor::matrix(
                &parent
                    .vertices()
                    .iter()
                    .map(|&x| parent.vertices().iter().map(|&y| adj_full[x][y]).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let children: Vec<(usize, NodeActivation)> =
                child_vertex.iter().copied().zip(acts.iter().cloned()).collect();
            aggregate(&parent, &children, &layer, &a).unwrap()
        };
        let base = run(&Permutation::identity(4));
        for pi in all_permutations(4) {
            let moved = run(&pi);
            for (c, m) in base.channels().iter().zip(moved.channels()) {
                assert_eq!(&permute_action(c, &pi).unwrap(), m);
            }
        }
    }

    /// Promote, stack, multiply by the adjacency and contract one channel at
    /// a time, then mix: the aggregation rule spelled out densely.
    fn dense_aggregate(
        parent: &ReceptiveField,
        children: &[(usize, NodeActivation)],
        layer: &LayerParams,
        adjacency: &DenseTensor,
    ) -> Vec<DenseTensor> {
        let slots: Vec<usize> = children.iter().map(|(v, _)| parent.position(*v).unwrap()).collect();
        let s = layer.specs().len();
        let mut q = Vec::new();
        for c in 0..layer.in_channels() {
            let promoted: Vec<DenseTensor> = children
                .iter()
                .map(|(_, act)| {
                    let chi = PromotionMatrix::between(act.field(), parent).unwrap();
                    promote(&act.channels()[c], &chi).unwrap()
                })
                .collect();
            let mut t = stack(&promoted, &slots, parent.len()).unwrap();
            if layer.use_adjacency {
                t = adjacency_product(&t, adjacency).unwrap();
            }
            q.push(layer.specs().iter().map(|spec| contract(&t, spec).unwrap()).collect::<Vec<_>>());
        }
        (0..layer.out_channels())
            .map(|i| {
                let mut acc = q[0][0].scale(0.0);
                for (c, qc) in q.iter().enumerate() {
                    for (j, qj) in qc.iter().enumerate() {
                        let w = layer.weight.data()[(i * s + j) * layer.in_channels() + c];
                        acc = linear_combination(&[&acc, qj], &[1.0, w]).unwrap();
                    }
                }
                let b = layer.bias.data()[i];
                let data = acc.data().iter().map(|x| (x + b).max(0.0)).collect();
                DenseTensor::new(acc.shape().to_vec(), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn aggregation_matches_dense_definition() {
        let parent = field(&[0, 1, 2, 3], 2);
        let child_fields: [&[usize]; 3] = [&[0, 1], &[1, 2, 3], &[0, 3]];
        let adj = DenseTensor::matrix(&[
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        for (order, use_adjacency) in [(2, true), (1, true), (1, false), (2, false)] {
            let children: Vec<(usize, NodeActivation)> = child_fields
                .iter()
                .zip([0, 2, 3])
                .map(|(f, v)| {
                    let m = f.len();
                    let channels = (0..2)
                        .map(|c| {
                            let n = m.pow(order as u32);
                            let data = (0..n).map(|x| ((x * 5 + v + c * 3) % 7) as f64 * 0.5 - 1.5).collect();
                            DenseTensor::new(vec![m; order], data).unwrap()
                        })
                        .collect();
                    (v, NodeActivation::new(field(f, 1), channels).unwrap())
                })
                .collect();
            let count = enumerate_contractions(contraction_input_order(order, use_adjacency), order)
                .unwrap()
                .len();
            let weight = DenseTensor::new(
                vec![3, count, 2],
                (0..6 * count).map(|x| ((x * 3) % 7) as f64 * 0.2 - 0.6).collect(),
            )
            .unwrap();
            let bias = DenseTensor::vector(vec![0.3, -0.1, 0.0]);
            let layer = LayerParams::new(weight, bias, order, use_adjacency, (0..count).collect()).unwrap();
            let fast = aggregate(&parent, &children, &layer, &adj).unwrap();
            let dense = dense_aggregate(&parent, &children, &layer, &adj);
            assert!(dense.iter().any(|b| b.data().iter().any(|&x| x > 0.0)));
            for (a, b) in fast.channels().iter().zip(&dense) {
                let tol = 1e-12 * b.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
                assert!(a.max_abs_diff(b) <= tol, "order {order}, adjacency {use_adjacency}");
            }
        }
    }

    #[test]
    fn readout_examples() {
        let params = ReadoutParams {
            weight: DenseTensor::new(vec![1, 1], vec![1.0]).unwrap(),
            bias: DenseTensor::vector(vec![0.0]),
        };
        let act = NodeActivation::new(
            field(&[0, 1], 1),
            vec![DenseTensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()],
        )
        .unwrap();
        assert_eq!(readout(&[act], &params).unwrap(), vec![10.0]);

        let zero = NodeActivation::new(field(&[0], 0), vec![DenseTensor::zeros(vec![1, 1]); 2])
            .unwrap();
        let params = ReadoutParams {
            weight: DenseTensor::new(vec![3, 2], vec![1.0; 6]).unwrap(),
            bias: DenseTensor::vector(vec![0.5, -1.0, 2.0]),
        };
        assert_eq!(readout(&[zero], &params).unwrap(), vec![0.5, -1.0, 2.0]);
    }
}
