use crate::error::{ensure, Result};
use crate::tensor::DenseTensor;

use super::{AdjointFault, Tape, Var};
use crate::parallel::parallel_map;

/// Errors for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)` over the array.
    pub rel_norm: f64,
    /// Largest `|a − n| / max(|a|, |n|, floor)` over single coordinates.
    pub max_rel_elem: f64,
    pub max_abs: f64,
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub coordinates: usize,
}

impl GradCheckReport {
    /// Largest array-wise relative error.
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.rel_norm).fold(0.0, f64::max)
    }

    /// Largest coordinate-wise relative error.
    pub fn max_rel_elem(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_elem).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_abs).fold(0.0, f64::max)
    }

    /// Index of the array with the largest array-wise error.
    pub fn worst(&self) -> usize {
        (0..self.per_param.len())
            .max_by(|&a, &b| self.per_param[a].rel_norm.total_cmp(&self.per_param[b].rel_norm))
            .unwrap_or(0)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Checks the gradient of the scalar `f(params)` coordinate by coordinate
/// with central differences of step `h`.
///
/// `f` records its computation on the given tape, reading the parameters
/// through the supplied leaves. The analytic side runs on a tape with the
/// optional `fault` installed. Finite differences fan out over workers.
pub fn grad_check<F>(
    params: &[DenseTensor],
    f: F,
    h: f64,
    floor: f64,
    fault: Option<AdjointFault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    ensure!(h > 0.0 && floor > 0.0, Invalid, "step and floor must be positive");
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let grads = tape.backward_scalar(out)?;

    let eval = |ps: &[DenseTensor]| -> Result<f64> {
        let mut t = Tape::new();
        let leaves: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let out = f(&mut t, &leaves)?;
        Ok(t.value(out).item())
    };
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let numeric = parallel_map(&coords, |&(p, i)| -> Result<f64> {
        let mut work = params.to_vec();
        let orig = params[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - h;
        let minus = eval(&work)?;
        Ok((plus - minus) / (2.0 * h))
    });

    let mut per_param: Vec<ParamError> = Vec::with_capacity(params.len());
    let mut sums = vec![(0.0, 0.0, 0.0); params.len()];
    let mut elem = vec![(0.0f64, 0.0f64); params.len()];
    let analytic: Vec<DenseTensor> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    for (&(p, i), n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = analytic[p].data()[i];
        let d = (a - n).abs();
        sums[p].0 += d * d;
        sums[p].1 += a * a;
        sums[p].2 += n * n;
        elem[p].0 = elem[p].0.max(d / a.abs().max(n.abs()).max(floor));
        elem[p].1 = elem[p].1.max(d);
    }
    for (p, &(dd, aa, nn)) in sums.iter().enumerate() {
        per_param.push(ParamError {
            rel_norm: dd.sqrt() / aa.sqrt().max(nn.sqrt()).max(floor),
            max_rel_elem: elem[p].0,
            max_abs: elem[p].1,
        });
    }
    Ok(GradCheckReport {
        per_param,
        coordinates: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ContractionSpec;

    fn quadratic(tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let sq = tape.elementwise_product(v[0], v[0], &[0, 1])?;
        let spec = ContractionSpec::full_projection(2);
        tape.contract(sq, &spec)
    }

    #[test]
    fn passes_on_a_correct_gradient() {
        let x = DenseTensor::matrix(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let r = grad_check(&[x], quadratic, 1e-6, 1e-8, None).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        assert!(r.max_rel_elem() < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let x = DenseTensor::vector(vec![0.0, 0.0]);
        let r = grad_check(
            &[x],
            |tape, v| {
                let zero = tape.elementwise_product(v[0], v[0], &[0])?;
                let spec = ContractionSpec::full_projection(1);
                let s = tape.contract(zero, &spec)?;
                let c = tape.leaf(DenseTensor::scalar(3.0));
                tape.linear_combination(&[s, c], &[0.0, 1.0])
            },
            1e-6,
            1e-8,
            None,
        )
        .unwrap();
        assert_eq!(r.max_abs_error(), 0.0);
        assert!(r.passes(1e-4));
    }

    #[test]
    fn detects_a_sign_flipped_adjoint() {
        let x = DenseTensor::matrix(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let r = grad_check(&[x], quadratic, 1e-6, 1e-8, Some(AdjointFault::ContractSign)).unwrap();
        assert!(r.max_rel_error() > 1.0, "{r:?}");
        assert!(!r.passes(1e-4));
    }
}
