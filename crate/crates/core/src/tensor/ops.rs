use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{next_index, strides, ContractionSpec, DenseTensor};
use crate::error::{ensure, Result};
use crate::perm::Permutation;

// Plans depend only on shapes and index groups, and a forward pass reuses a
// handful of them thousands of times. Bounded so odd workloads cannot grow it
// without limit.
const PLAN_CACHE_LIMIT: usize = 4096;

type MixedKey = (Vec<usize>, Vec<usize>, Vec<(Vec<usize>, Vec<usize>)>);

thread_local! {
    static CONTRACT_PLANS: RefCell<HashMap<(Vec<usize>, ContractionSpec), Rc<ContractPlan>>> =
        RefCell::new(HashMap::new());
    static MIXED_PLANS: RefCell<HashMap<MixedKey, Rc<MixedPlan>>> = RefCell::new(HashMap::new());
}

fn cached<K: std::hash::Hash + Eq, V>(
    cache: &'static std::thread::LocalKey<RefCell<HashMap<K, Rc<V>>>>,
    key: K,
    build: impl FnOnce() -> Result<V>,
) -> Result<Rc<V>> {
    if let Some(hit) = cache.with(|c| c.borrow().get(&key).cloned()) {
        return Ok(hit);
    }
    let plan = Rc::new(build()?);
    cache.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() >= PLAN_CACHE_LIMIT {
            c.clear();
        }
        c.insert(key, Rc::clone(&plan));
    });
    Ok(plan)
}

/// `C[i.., j..] = A[i..] * B[j..]`.
pub fn tensor_product(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let mut shape = a.shape().to_vec();
    shape.extend_from_slice(b.shape());
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &x in a.data() {
        data.extend(b.data().iter().map(|&y| x * y));
    }
    DenseTensor { shape, data }
}

/// `C[i1..ik] = A[i1..ik] * B[i_dims[0] .. i_dims[p-1]]`.
pub fn elementwise_product(a: &DenseTensor, b: &DenseTensor, dims: &[usize]) -> Result<DenseTensor> {
    ensure!(
        dims.len() == b.order(),
        Shape,
        "{} dims given for an order-{} factor",
        dims.len(),
        b.order()
    );
    let mut seen = vec![false; a.order()];
    for (q, &d) in dims.iter().enumerate() {
        ensure!(d < a.order(), Shape, "dim {d} out of range for order {}", a.order());
        ensure!(!seen[d], Shape, "dim {d} listed twice");
        seen[d] = true;
        ensure!(
            a.shape()[d] == b.shape()[q],
            Shape,
            "extent {} of dim {d} does not match factor extent {}",
            a.shape()[d],
            b.shape()[q]
        );
    }
    let b_strides = strides(b.shape());
    let mut out = a.clone();
    if a.is_empty() {
        return Ok(out);
    }
    let mut idx = vec![0; a.order()];
    let mut flat = 0;
    loop {
        let off: usize = dims
            .iter()
            .zip(&b_strides)
            .map(|(&d, &s)| idx[d] * s)
            .sum();
        out.data[flat] *= b.data[off];
        flat += 1;
        if !next_index(&mut idx, a.shape()) {
            break;
        }
    }
    Ok(out)
}

/// Sum along the listed dimensions; survivors keep their relative order.
pub fn project(a: &DenseTensor, dims: &[usize]) -> Result<DenseTensor> {
    let spec = ContractionSpec::projection(a.order(), dims)?;
    contract(a, &spec)
}

/// Row-major enumeration of `Σ idx[axis] * strides[axis]` over `extents`.
fn offset_table(extents: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = extents.iter().product();
    let mut table = Vec::with_capacity(n);
    if n == 0 {
        return table;
    }
    let mut idx = vec![0; extents.len()];
    let mut offset = 0;
    'outer: loop {
        table.push(offset);
        for axis in (0..extents.len()).rev() {
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < extents[axis] {
                continue 'outer;
            }
            offset -= extents[axis] * strides[axis];
            idx[axis] = 0;
        }
        break;
    }
    table
}

/// Input offsets split into an outer table over surviving axes and an inner
/// table over the shared diagonal index of every group.
struct ContractPlan {
    out_shape: Vec<usize>,
    outer: Vec<usize>,
    inner: Vec<usize>,
}

fn contract_plan(shape: &[usize], spec: &ContractionSpec) -> Result<Rc<ContractPlan>> {
    cached(&CONTRACT_PLANS, (shape.to_vec(), spec.clone()), || {
        build_contract_plan(shape, spec)
    })
}

fn build_contract_plan(shape: &[usize], spec: &ContractionSpec) -> Result<ContractPlan> {
    ensure!(
        spec.order_in() == shape.len(),
        Contraction,
        "spec for order {} applied to order-{} tensor",
        spec.order_in(),
        shape.len()
    );
    let st = strides(shape);
    let survivors = spec.survivors();
    let out_shape: Vec<usize> = survivors.iter().map(|&i| shape[i]).collect();
    let out_strides: Vec<usize> = survivors.iter().map(|&i| st[i]).collect();
    let mut group_extents = Vec::with_capacity(spec.groups().len());
    let mut group_strides = Vec::with_capacity(spec.groups().len());
    for g in spec.groups() {
        let n = shape[g[0]];
        ensure!(
            g.iter().all(|&i| shape[i] == n),
            Contraction,
            "extent mismatch inside group {g:?} of shape {shape:?}"
        );
        group_extents.push(n);
        group_strides.push(g.iter().map(|&i| st[i]).sum());
    }
    Ok(ContractPlan {
        outer: offset_table(&out_shape, &out_strides),
        inner: offset_table(&group_extents, &group_strides),
        out_shape,
    })
}

/// Generalized contraction: every group is tied by one shared diagonal index
/// and summed over; surviving indices keep their original relative order.
pub fn contract(a: &DenseTensor, spec: &ContractionSpec) -> Result<DenseTensor> {
    if let [g] = spec.groups() {
        if let ([axis], true) = (g.as_slice(), spec.order_in() == a.order()) {
            return Ok(sum_axis(a, *axis));
        }
    }
    let plan = contract_plan(a.shape(), spec)?;
    let data = plan
        .outer
        .iter()
        .map(|&base| plan.inner.iter().map(|&off| a.data[base + off]).sum())
        .collect();
    Ok(DenseTensor {
        shape: plan.out_shape.clone(),
        data,
    })
}

/// Sum over one axis as row additions over the contiguous trailing block.
fn sum_axis(a: &DenseTensor, axis: usize) -> DenseTensor {
    let n = a.shape[axis];
    let post: usize = a.shape[axis + 1..].iter().product();
    let pre: usize = a.shape[..axis].iter().product();
    let mut data = Vec::with_capacity(pre * post);
    if n == 0 {
        data.resize(pre * post, 0.0);
    } else if post == 1 {
        data.extend(a.data.chunks(n).map(|block| block.iter().sum::<f64>()));
    } else if post > 0 {
        for block in a.data.chunks(n * post) {
            let start = data.len();
            data.extend_from_slice(&block[..post]);
            let out = &mut data[start..];
            for row in block[post..].chunks_exact(post) {
                for x in 0..post {
                    out[x] += row[x];
                }
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    DenseTensor { shape, data }
}

/// Adjoint of [`contract`]: broadcasts `grad` back along each contracted
/// diagonal, zero elsewhere.
pub fn contract_adjoint(
    grad: &DenseTensor,
    in_shape: &[usize],
    spec: &ContractionSpec,
) -> Result<DenseTensor> {
    let plan = contract_plan(in_shape, spec)?;
    ensure!(
        plan.out_shape == grad.shape(),
        Shape,
        "gradient shape {:?} does not match contraction output {:?}",
        grad.shape(),
        plan.out_shape
    );
    let mut out = DenseTensor::zeros(in_shape.to_vec());
    for (&base, &g) in plan.outer.iter().zip(&grad.data) {
        for &off in &plan.inner {
            out.data[base + off] += g;
        }
    }
    Ok(out)
}

/// A contraction of `A ⊗ B` split into the parts acting on `A` alone, on `B`
/// alone, and the groups that straddle both factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitProduct {
    pub a_spec: ContractionSpec,
    pub b_spec: ContractionSpec,
    /// Straddling groups as `(axes of reduced A, axes of reduced B)`.
    pub mixed: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn split_product_spec(
    order_a: usize,
    order_b: usize,
    spec: &ContractionSpec,
) -> Result<SplitProduct> {
    ensure!(
        spec.order_in() == order_a + order_b,
        Contraction,
        "spec for order {} applied to a product of orders {order_a} and {order_b}",
        spec.order_in()
    );
    let mut a_groups = Vec::new();
    let mut b_groups = Vec::new();
    let mut mixed_raw = Vec::new();
    for g in spec.groups() {
        let (ga, gb): (Vec<usize>, Vec<usize>) = g.iter().partition(|&&i| i < order_a);
        let gb: Vec<usize> = gb.iter().map(|&i| i - order_a).collect();
        match (ga.is_empty(), gb.is_empty()) {
            (false, true) => a_groups.push(ga),
            (true, false) => b_groups.push(gb),
            _ => mixed_raw.push((ga, gb)),
        }
    }
    let a_spec = ContractionSpec::new(order_a, a_groups)?;
    let b_spec = ContractionSpec::new(order_b, b_groups)?;
    let a_surv = a_spec.survivors();
    let b_surv = b_spec.survivors();
    let rank = |surv: &[usize], i: usize| surv.iter().position(|&s| s == i).unwrap();
    let mixed = mixed_raw
        .into_iter()
        .map(|(ga, gb)| {
            (
                ga.iter().map(|&i| rank(&a_surv, i)).collect(),
                gb.iter().map(|&i| rank(&b_surv, i)).collect(),
            )
        })
        .collect();
    Ok(SplitProduct {
        a_spec,
        b_spec,
        mixed,
    })
}

struct MixedPlan {
    out_shape: Vec<usize>,
    outer_a: Vec<usize>,
    outer_b: Vec<usize>,
    inner_a: Vec<usize>,
    inner_b: Vec<usize>,
}

fn mixed_plan(
    a_shape: &[usize],
    b_shape: &[usize],
    mixed: &[(Vec<usize>, Vec<usize>)],
) -> Result<Rc<MixedPlan>> {
    let key = (a_shape.to_vec(), b_shape.to_vec(), mixed.to_vec());
    cached(&MIXED_PLANS, key, || build_mixed_plan(a_shape, b_shape, mixed))
}

fn build_mixed_plan(
    a_shape: &[usize],
    b_shape: &[usize],
    mixed: &[(Vec<usize>, Vec<usize>)],
) -> Result<MixedPlan> {
    let sa = strides(a_shape);
    let sb = strides(b_shape);
    let mut in_group_a = vec![false; a_shape.len()];
    let mut in_group_b = vec![false; b_shape.len()];
    let mut extents = Vec::new();
    let mut inner_sa = Vec::new();
    let mut inner_sb = Vec::new();
    for (ga, gb) in mixed {
        let n = ga
            .first()
            .map(|&i| a_shape[i])
            .or_else(|| gb.first().map(|&i| b_shape[i]))
            .unwrap_or(1);
        let mut s_a = 0;
        for &i in ga {
            ensure!(a_shape[i] == n, Contraction, "extent mismatch in straddling group");
            ensure!(!in_group_a[i], Contraction, "axis {i} of A used twice");
            in_group_a[i] = true;
            s_a += sa[i];
        }
        let mut s_b = 0;
        for &i in gb {
            ensure!(b_shape[i] == n, Contraction, "extent mismatch in straddling group");
            ensure!(!in_group_b[i], Contraction, "axis {i} of B used twice");
            in_group_b[i] = true;
            s_b += sb[i];
        }
        extents.push(n);
        inner_sa.push(s_a);
        inner_sb.push(s_b);
    }
    let mut out_shape = Vec::new();
    let mut out_sa = Vec::new();
    let mut out_sb = Vec::new();
    for (i, &n) in a_shape.iter().enumerate() {
        if !in_group_a[i] {
            out_shape.push(n);
            out_sa.push(sa[i]);
            out_sb.push(0);
        }
    }
    for (i, &n) in b_shape.iter().enumerate() {
        if !in_group_b[i] {
            out_shape.push(n);
            out_sa.push(0);
            out_sb.push(sb[i]);
        }
    }
    Ok(MixedPlan {
        outer_a: offset_table(&out_shape, &out_sa),
        outer_b: offset_table(&out_shape, &out_sb),
        inner_a: offset_table(&extents, &inner_sa),
        inner_b: offset_table(&extents, &inner_sb),
        out_shape,
    })
}

/// Contraction of `A ⊗ B` over groups that each tie axes of `A` to axes of
/// `B`, without materializing the product. Output axes are the untied axes of
/// `A` followed by the untied axes of `B`. With no groups this is the plain
/// tensor product.
pub fn mixed_product(
    a: &DenseTensor,
    b: &DenseTensor,
    mixed: &[(Vec<usize>, Vec<usize>)],
) -> Result<DenseTensor> {
    if mixed.is_empty() {
        return Ok(tensor_product(a, b));
    }
    let plan = mixed_plan(a.shape(), b.shape(), mixed)?;
    let data = plan
        .outer_a
        .iter()
        .zip(&plan.outer_b)
        .map(|(&ba, &bb)| {
            plan.inner_a
                .iter()
                .zip(&plan.inner_b)
                .map(|(&oa, &ob)| a.data[ba + oa] * b.data[bb + ob])
                .sum()
        })
        .collect();
    Ok(DenseTensor {
        shape: plan.out_shape.clone(),
        data,
    })
}

/// Gradients of [`mixed_product`] with respect to both factors.
pub fn mixed_product_adjoint(
    grad: &DenseTensor,
    a: &DenseTensor,
    b: &DenseTensor,
    mixed: &[(Vec<usize>, Vec<usize>)],
) -> Result<(DenseTensor, DenseTensor)> {
    let plan = mixed_plan(a.shape(), b.shape(), mixed)?;
    ensure!(
        plan.out_shape == grad.shape(),
        Shape,
        "gradient shape {:?} does not match product output {:?}",
        grad.shape(),
        plan.out_shape
    );
    let mut ga = DenseTensor::zeros(a.shape().to_vec());
    let mut gb = DenseTensor::zeros(b.shape().to_vec());
    for ((&ba, &bb), &g) in plan.outer_a.iter().zip(&plan.outer_b).zip(&grad.data) {
        if g == 0.0 {
            continue;
        }
        for (&oa, &ob) in plan.inner_a.iter().zip(&plan.inner_b) {
            ga.data[ba + oa] += g * b.data[bb + ob];
            gb.data[bb + ob] += g * a.data[ba + oa];
        }
    }
    Ok((ga, gb))
}

/// `contract(tensor_product(a, b), spec)` computed factor-wise: single-factor
/// groups are reduced first, straddling groups are summed jointly.
pub fn contract_product(
    a: &DenseTensor,
    b: &DenseTensor,
    spec: &ContractionSpec,
) -> Result<DenseTensor> {
    let split = split_product_spec(a.order(), b.order(), spec)?;
    let a1 = contract(a, &split.a_spec)?;
    let b1 = contract(b, &split.b_spec)?;
    mixed_product(&a1, &b1, &split.mixed)
}

/// The k-fold permutation action: `F'[π(j1)..π(jk)] = F[j1..jk]`.
pub fn permute_action(a: &DenseTensor, pi: &Permutation) -> Result<DenseTensor> {
    if a.order() == 0 {
        return Ok(a.clone());
    }
    let m = pi.len();
    ensure!(
        a.shape().iter().all(|&n| n == m),
        Shape,
        "permutation of length {m} cannot act on shape {:?}",
        a.shape()
    );
    let st = a.strides();
    let mut out = DenseTensor::zeros(a.shape().to_vec());
    if a.is_empty() {
        return Ok(out);
    }
    let mut idx = vec![0; a.order()];
    let mut flat = 0;
    loop {
        let dst: usize = idx.iter().zip(&st).map(|(&j, &s)| pi.apply(j) * s).sum();
        out.data[dst] = a.data[flat];
        flat += 1;
        if !next_index(&mut idx, a.shape()) {
            break;
        }
    }
    Ok(out)
}

/// `(P_π ⊗ P_π) f` for a vectorized `m×m` matrix `f`, using the explicit
/// `m²×m²` Kronecker matrix.
pub fn kron_action_order2(f: &DenseTensor, pi: &Permutation) -> Result<DenseTensor> {
    ensure!(f.order() == 1, Shape, "expected an order-1 tensor, got order {}", f.order());
    let len = f.len();
    let m = pi.len();
    ensure!(
        m * m == len,
        Shape,
        "length {len} is not the square of the permutation length {m}"
    );
    let p = pi.matrix();
    let mut kron = vec![0.0; len * len];
    for i1 in 0..m {
        for i2 in 0..m {
            let row = i1 * m + i2;
            for j1 in 0..m {
                for j2 in 0..m {
                    kron[row * len + j1 * m + j2] = p[i1 * m + j1] * p[i2 * m + j2];
                }
            }
        }
    }
    let data = (0..len)
        .map(|r| (0..len).map(|c| kron[r * len + c] * f.data[c]).sum())
        .collect();
    Ok(DenseTensor {
        shape: vec![len],
        data,
    })
}

/// Elementwise `Σ α_j A_j`.
pub fn linear_combination(tensors: &[&DenseTensor], coeffs: &[f64]) -> Result<DenseTensor> {
    ensure!(
        tensors.len() == coeffs.len(),
        Shape,
        "{} tensors but {} coefficients",
        tensors.len(),
        coeffs.len()
    );
    ensure!(!tensors.is_empty(), Shape, "empty linear combination");
    let shape = tensors[0].shape();
    let mut out = DenseTensor::zeros(shape.to_vec());
    for (t, &c) in tensors.iter().zip(coeffs) {
        ensure!(
            t.shape() == shape,
            Shape,
            "shape {:?} does not match {:?}",
            t.shape(),
            shape
        );
        for (o, &x) in out.data.iter_mut().zip(&t.data) {
            *o += c * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DenseTensor {
        DenseTensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tensor_product_examples() {
        let t = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(tensor_product(&DenseTensor::scalar(1.0), &t), t);
        let c = tensor_product(
            &DenseTensor::vector(vec![1.0, 2.0]),
            &DenseTensor::vector(vec![3.0, 4.0]),
        );
        assert_eq!(c, mat(&[&[3.0, 4.0], &[6.0, 8.0]]));
        let a = DenseTensor::zeros(vec![2, 2]);
        let b = DenseTensor::zeros(vec![2, 2, 2]);
        assert_eq!(tensor_product(&a, &b).order(), 5);
    }

    #[test]
    fn elementwise_examples() {
        let a = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = DenseTensor::vector(vec![2.0, 3.0]);
        assert_eq!(
            elementwise_product(&a, &b, &[0]).unwrap(),
            mat(&[&[2.0, 0.0], &[0.0, 3.0]])
        );
        let t = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = DenseTensor::ones(vec![2]);
        assert_eq!(elementwise_product(&t, &ones, &[1]).unwrap(), t);
        let h = elementwise_product(&t, &t, &[0, 1]).unwrap();
        assert_eq!(h, mat(&[&[1.0, 4.0], &[9.0, 16.0]]));
        assert!(elementwise_product(&t, &DenseTensor::vector(vec![1.0; 3]), &[0]).is_err());
        assert!(elementwise_product(&t, &t, &[0, 0]).is_err());
    }

    #[test]
    fn projection_examples() {
        let t = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(project(&t, &[0]).unwrap(), DenseTensor::vector(vec![4.0, 6.0]));
        assert_eq!(project(&t, &[0, 1]).unwrap(), DenseTensor::scalar(10.0));
        let s = DenseTensor::scalar(2.5);
        assert_eq!(project(&s, &[]).unwrap(), s);
        assert!(project(&t, &[1, 1]).is_err());
    }

    #[test]
    fn contraction_examples() {
        let eye = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let trace = ContractionSpec::new(2, vec![vec![0, 1]]).unwrap();
        assert_eq!(contract(&eye, &trace).unwrap(), DenseTensor::scalar(2.0));

        let t = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let both = ContractionSpec::new(2, vec![vec![0], vec![1]]).unwrap();
        assert_eq!(contract(&t, &both).unwrap(), project(&t, &[0, 1]).unwrap());

        let mut cube = DenseTensor::zeros(vec![2, 2, 2]);
        cube.set(&[0, 0, 0], 1.0);
        cube.set(&[1, 1, 1], 1.0);
        let triple = ContractionSpec::new(3, vec![vec![0, 1, 2]]).unwrap();
        assert_eq!(contract(&cube, &triple).unwrap(), DenseTensor::scalar(2.0));

        let bad = DenseTensor::zeros(vec![2, 3]);
        assert!(contract(&bad, &trace).is_err());
    }

    #[test]
    fn contraction_keeps_survivor_order() {
        // T[a,b,c] = 100a + 10b + c; contract {0,2}, keep b
        let mut t = DenseTensor::zeros(vec![3, 2, 3]);
        for a in 0..3 {
            for b in 0..2 {
                for c in 0..3 {
                    t.set(&[a, b, c], (100 * a + 10 * b + c) as f64);
                }
            }
        }
        let spec = ContractionSpec::new(3, vec![vec![0, 2]]).unwrap();
        let out = contract(&t, &spec).unwrap();
        // Σ_a 101a + 10b = 303 + 30b
        assert_eq!(out, DenseTensor::vector(vec![303.0, 333.0]));
    }

    #[test]
    fn permute_action_examples() {
        let v = DenseTensor::vector(vec![5.0, 7.0]);
        let swap = Permutation::swap(2, 0, 1);
        assert_eq!(permute_action(&v, &swap).unwrap(), DenseTensor::vector(vec![7.0, 5.0]));
        let t = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(permute_action(&t, &Permutation::identity(2)).unwrap(), t);
        assert!(permute_action(&DenseTensor::zeros(vec![2, 3]), &swap).is_err());
    }

    #[test]
    fn kron_swap_example() {
        let f = DenseTensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let swap = Permutation::swap(2, 0, 1);
        assert_eq!(
            kron_action_order2(&f, &swap).unwrap(),
            DenseTensor::vector(vec![4.0, 3.0, 2.0, 1.0])
        );
        assert_eq!(kron_action_order2(&f, &Permutation::identity(2)).unwrap(), f);
        assert!(kron_action_order2(&DenseTensor::vector(vec![1.0; 5]), &swap).is_err());
    }

    #[test]
    fn linear_combination_examples() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(linear_combination(&[&a], &[1.0]).unwrap(), a);
        assert_eq!(
            linear_combination(&[&a, &a], &[1.0, -1.0]).unwrap(),
            DenseTensor::zeros(vec![2, 2])
        );
        assert_eq!(
            linear_combination(&[&a, &b], &[2.0, 1.0]).unwrap(),
            mat(&[&[2.0, 5.0], &[7.0, 8.0]])
        );
        assert!(linear_combination(&[&a, &DenseTensor::zeros(vec![2])], &[1.0, 1.0]).is_err());
    }
}
