//! Uncertainty-weighted regression loss.
//!
//! Per stage, each query contributes ||r - r_gt|| * (1 - u) + lambda * u
//! and the stage loss is the mean over queries. High uncertainty masks the
//! coordinate error but pays a flat lambda, so u is pushed up exactly when
//! the error exceeds lambda: d(loss)/du = lambda - ||err|| per query.
//! The total loss is the plain sum of the three stage losses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_inputs(r: &Tensor, u: &Tensor, r_gt: &Tensor, lambda: f64) -> Result<usize> {
    let n = u.numel();
    if r.shape() != [n, 2] || r_gt.shape() != [n, 2] {
        return Err(Error::shape(
            "stage_loss",
            format!("r {:?}, r_gt {:?}, u {:?}", r.shape(), r_gt.shape(), u.shape()),
        ));
    }
    if n == 0 {
        return Err(Error::Invalid("stage_loss: empty batch".to_string()));
    }
    if lambda <= 0.0 {
        return Err(Error::Invalid(format!("stage_loss: lambda must be > 0, got {}", lambda)));
    }
    if u.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Invalid("stage_loss: uncertainties must lie in [0,1]".to_string()));
    }
    Ok(n)
}

/// Mean over queries of ||r - r_gt|| (1 - u) + lambda u.
pub fn stage_loss(r: &Tensor, u: &Tensor, r_gt: &Tensor, lambda: f64) -> Result<Tensor> {
    check_inputs(r, u, r_gt, lambda)?;
    let err = r.sub(r_gt)?.norm2_last()?;
    let one_minus_u = u.neg()?.add_scalar(1.0)?;
    err.mul(&one_minus_u)?.add(&u.scale(lambda)?)?.mean()
}

/// Training variant that supervises queries with no valid correspondence:
/// their coordinate error is replaced by the constant `invalid_err`, which
/// exceeds lambda and therefore drives u toward 1, while the coordinate
/// branch receives no gradient from them.
pub fn masked_stage_loss(
    r: &Tensor,
    u: &Tensor,
    r_gt: &Tensor,
    valid: &[bool],
    lambda: f64,
    invalid_err: f64,
) -> Result<Tensor> {
    let n = check_inputs(r, u, r_gt, lambda)?;
    if valid.len() != n {
        return Err(Error::shape(
            "masked_stage_loss",
            format!("{} valid flags for {} queries", valid.len(), n),
        ));
    }
    if invalid_err <= 0.0 {
        return Err(Error::Invalid("masked_stage_loss: invalid_err must be > 0".to_string()));
    }
    let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let inv_fill: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { invalid_err }).collect();
    let mask_t = Tensor::from_vec(&[n], mask)?;
    let fill_t = Tensor::from_vec(&[n], inv_fill)?;
    let err = r.sub(r_gt)?.norm2_last()?;
    let err_sel = err.mul(&mask_t)?.add(&fill_t)?;
    let one_minus_u = u.neg()?.add_scalar(1.0)?;
    err_sel.mul(&one_minus_u)?.add(&u.scale(lambda)?)?.mean()
}

/// Sum of the three stage losses; all stages are supervised at once.
pub fn total_loss(l_c: &Tensor, l_m: &Tensor, l_f: &Tensor) -> Result<Tensor> {
    l_c.add(l_m)?.add(l_f)
}
