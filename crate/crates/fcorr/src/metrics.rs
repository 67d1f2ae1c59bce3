//! Flow-error metrics: AEPE, PCK, and the KITTI-style outlier ratio.
//!
//! Inputs are per-query displacement vectors in pixels plus a validity
//! mask; every metric averages over the valid entries only.

use crate::error::{Error, Result};

pub type Flow = (f64, f64);

/// Dense displacement field in pixels with per-pixel validity.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Row-major (dx, dy) per pixel.
    pub flow: Vec<Flow>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn new(width: usize, height: usize) -> FlowField {
        FlowField {
            width,
            height,
            flow: vec![(0.0, 0.0); width * height],
            valid: vec![false; width * height],
        }
    }
}

fn check_lens(op: &'static str, pred: &[Flow], gt: &[Flow], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Invalid(format!(
            "{}: length mismatch pred {} gt {} mask {}",
            op,
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid(format!("{}: empty mask", op)));
    }
    Ok(())
}

fn epe(p: Flow, g: Flow) -> f64 {
    let dx = p.0 - g.0;
    let dy = p.1 - g.1;
    (dx * dx + dy * dy).sqrt()
}

/// Average end-point error in pixels over the valid entries.
pub fn aepe(pred: &[Flow], gt: &[Flow], mask: &[bool]) -> Result<f64> {
    check_lens("aepe", pred, gt, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            sum += epe(pred[i], gt[i]);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Fraction of valid entries with end-point error strictly below
/// `thresh_px`.
pub fn pck(pred: &[Flow], gt: &[Flow], mask: &[bool], thresh_px: f64) -> Result<f64> {
    check_lens("pck", pred, gt, mask)?;
    if thresh_px <= 0.0 {
        return Err(Error::Invalid(format!("pck: threshold must be > 0, got {}", thresh_px)));
    }
    let mut hits = 0usize;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            if epe(pred[i], gt[i]) < thresh_px {
                hits += 1;
            }
            n += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Flow-outlier percentage under the KITTI rule: an entry is an outlier
/// iff its end-point error is >= 3 px AND >= 5% of the ground-truth flow
/// magnitude.
pub fn fl_ratio(pred: &[Flow], gt: &[Flow], mask: &[bool]) -> Result<f64> {
    check_lens("fl_ratio", pred, gt, mask)?;
    let mut outliers = 0usize;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            let e = epe(pred[i], gt[i]);
            let mag = (gt[i].0 * gt[i].0 + gt[i].1 * gt[i].1).sqrt();
            if e >= 3.0 && e >= 0.05 * mag {
                outliers += 1;
            }
            n += 1;
        }
    }
    Ok(100.0 * outliers as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_predictions() {
        let gt = vec![(1.0, 2.0), (-3.0, 0.5)];
        let mask = vec![true, true];
        assert_eq!(aepe(&gt, &gt, &mask).unwrap(), 0.0);
        assert_eq!(pck(&gt, &gt, &mask, 1.0).unwrap(), 1.0);
        assert_eq!(pck(&gt, &gt, &mask, 5.0).unwrap(), 1.0);
        assert_eq!(fl_ratio(&gt, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn single_point_345() {
        let pred = vec![(3.0, 4.0)];
        let gt = vec![(0.0, 0.0)];
        assert_eq!(aepe(&pred, &gt, &[true]).unwrap(), 5.0);
    }

    #[test]
    fn pck_two_point_example() {
        // one of two points off by 2 px
        let pred = vec![(0.0, 0.0), (2.0, 0.0)];
        let gt = vec![(0.0, 0.0), (0.0, 0.0)];
        let mask = vec![true, true];
        assert_eq!(pck(&pred, &gt, &mask, 1.0).unwrap(), 0.5);
        assert_eq!(pck(&pred, &gt, &mask, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn fl_rule_cases() {
        // EPE=4 with |gt|=100: 4% < 5% -> inlier
        let gt = vec![(100.0, 0.0)];
        let pred = vec![(96.0, 0.0)];
        assert_eq!(fl_ratio(&pred, &gt, &[true]).unwrap(), 0.0);
        // EPE=4 with |gt|=10: 4 >= 3 and 40% >= 5% -> outlier
        let gt2 = vec![(10.0, 0.0)];
        let pred2 = vec![(14.0, 0.0)];
        assert_eq!(fl_ratio(&pred2, &gt2, &[true]).unwrap(), 100.0);
        // everything under 3 px is an inlier regardless of magnitude
        let gt3 = vec![(0.1, 0.0)];
        let pred3 = vec![(2.0, 0.0)];
        assert_eq!(fl_ratio(&pred3, &gt3, &[true]).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let v = vec![(0.0, 0.0)];
        assert!(aepe(&v, &v, &[false]).is_err());
        assert!(pck(&v, &v, &[false], 1.0).is_err());
        assert!(fl_ratio(&v, &v, &[false]).is_err());
    }

    #[test]
    fn matches_bruteforce_reference() {
        // Independent naive reference computed with explicit indexing.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let pred: Vec<Flow> = (0..n)
                .map(|_| (rng.gen::<f64>() * 20.0 - 10.0, rng.gen::<f64>() * 20.0 - 10.0))
                .collect();
            let gt: Vec<Flow> = (0..n)
                .map(|_| (rng.gen::<f64>() * 20.0 - 10.0, rng.gen::<f64>() * 20.0 - 10.0))
                .collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
            mask[0] = true;
            let mut sum = 0.0;
            let mut cnt = 0.0;
            let mut under3 = 0.0;
            let mut out = 0.0;
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let dx = pred[i].0 - gt[i].0;
                let dy = pred[i].1 - gt[i].1;
                let e = f64::sqrt(dx * dx + dy * dy);
                sum += e;
                cnt += 1.0;
                if e < 3.0 {
                    under3 += 1.0;
                }
                let m = f64::sqrt(gt[i].0 * gt[i].0 + gt[i].1 * gt[i].1);
                if e >= 3.0 && e >= 0.05 * m {
                    out += 1.0;
                }
            }
            assert!((aepe(&pred, &gt, &mask).unwrap() - sum / cnt).abs() < 1e-12);
            assert!((pck(&pred, &gt, &mask, 3.0).unwrap() - under3 / cnt).abs() < 1e-12);
            assert!((fl_ratio(&pred, &gt, &mask).unwrap() - 100.0 * out / cnt).abs() < 1e-12);
        }
    }

    #[test]
    fn pck_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let n = 40;
            let pred: Vec<Flow> = (0..n).map(|_| (rng.gen::<f64>() * 8.0, 0.0)).collect();
            let gt = vec![(0.0, 0.0); n];
            let mask = vec![true; n];
            let p1 = pck(&pred, &gt, &mask, 1.0).unwrap();
            let p3 = pck(&pred, &gt, &mask, 3.0).unwrap();
            let p5 = pck(&pred, &gt, &mask, 5.0).unwrap();
            assert!(p1 <= p3 && p3 <= p5);
        }
    }
}
