//! Central-difference gradient oracle.

use super::Tensor;
use crate::error::{Error, Result};

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Floor for the relative-error denominator; keeps tiny gradients from
/// amplifying finite-difference noise into spurious failures.
const REL_FLOOR: f64 = 1e-3;

/// Compare the analytic gradient of scalar-valued `f` at `x` against
/// central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("grad_check eps must be > 0, got {}", eps)));
    }
    let leaf = Tensor::param(x.shape(), x.data().to_vec())?;
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("f must be scalar-valued, got shape {:?}", out.shape()),
        ));
    }
    if !out.scalar()?.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    out.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let base = x.data().to_vec();
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(x.shape(), plus)?)?.scalar()?;
        let fm = f(&Tensor::from_vec(x.shape(), minus)?)?.scalar()?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let abs_err = (analytic[i] - numeric).abs();
        let rel_err = abs_err / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs_err);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let report = grad_check(|t| t.sum(), &x, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-9, "{:?}", report);
    }

    #[test]
    fn l2_norm_at_3_4() {
        let x = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let report = grad_check(|t| t.norm2_last(), &x, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn softmax_mean_composition() {
        let x = Tensor::from_vec(&[5], vec![0.1, -0.4, 1.2, 0.0, -2.0]).unwrap();
        let report = grad_check(|t| t.softmax(0)?.mean(), &x, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn rejects_non_scalar_f() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|t| t.relu(), &x, 1e-5).is_err());
    }
}
