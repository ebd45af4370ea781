//! Depth error metrics and distortion ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Depth ground truth annotated on a subset of pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    /// `[H, W]` metres; meaningful only where `valid` is 1.
    pub values: Tensor,
    /// `[H, W]` binary.
    pub valid: Tensor,
}

impl SparseDepth {
    pub fn new(values: Tensor, valid: Tensor) -> Result<Self> {
        values.expect_shape(valid.shape())?;
        for (&v, &m) in values.data().iter().zip(valid.data()) {
            if m != 0.0 && m != 1.0 {
                return Err(Error::config("validity mask must be binary"));
            }
            if m == 1.0 && !(v.is_finite() && v >= 0.0) {
                return Err(Error::config("valid depth must be finite and non-negative"));
            }
        }
        Ok(SparseDepth { values, valid })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&m| m == 1.0).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len() as f64
    }
}

fn flat_plane(pred: &Tensor) -> &[f64] {
    pred.data()
}

/// Root mean squared error over valid pixels. `pred` may be `[H, W]` or
/// `[1, H, W]`.
pub fn rmse(pred: &Tensor, gt: &SparseDepth) -> Result<f64> {
    let p = flat_plane(pred);
    if p.len() != gt.values.len() {
        return Err(Error::config(format!(
            "prediction {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.values.shape()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&y, &t), &m) in p.iter().zip(gt.values.data()).zip(gt.valid.data()) {
        if m == 1.0 {
            let d = y - t;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok((sum / n as f64).sqrt())
}

/// Masked mean depth: mean predicted depth over the pixels of `mask`,
/// regardless of ground-truth validity.
pub fn mmd(pred: &Tensor, mask: &Tensor) -> Result<f64> {
    let p = flat_plane(pred);
    if p.len() != mask.len() {
        return Err(Error::config("prediction and mask sizes differ"));
    }
    let mut sum = 0.0;
    let mut n = 0.0;
    for (&y, &m) in p.iter().zip(mask.data()) {
        sum += y * m;
        n += m;
    }
    if n == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n)
}

/// Mean ground-truth depth over the valid pixels of `mask`, if any.
pub fn mean_gt_depth(mask: &Tensor, gt: &SparseDepth) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&m, &v), &ok) in mask.data().iter().zip(gt.values.data()).zip(gt.valid.data()) {
        if m == 1.0 && ok == 1.0 {
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Indices of instances whose mean valid ground-truth depth is below
/// `threshold`. Instances without any valid pixel are dropped.
pub fn select_targets(instances: &[&Tensor], gt: &SparseDepth, threshold: f64) -> Vec<usize> {
    instances
        .iter()
        .enumerate()
        .filter_map(|(i, m)| match mean_gt_depth(m, gt) {
            Some(d) if d < threshold => Some(i),
            _ => None,
        })
        .collect()
}

pub const DEFAULT_TARGET_THRESHOLD: f64 = 50.0;

/// Clean versus adversarial metrics with their ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clean_rmse: f64,
    pub adv_rmse: f64,
    pub rmse_ratio: Option<f64>,
    pub clean_mmd: Option<f64>,
    pub adv_mmd: Option<f64>,
    pub mmd_ratio: Option<f64>,
}

/// `adversarial / clean`, absent when the clean value is not positive.
pub fn ratio(clean: f64, adversarial: f64) -> Option<f64> {
    (clean > 0.0 && clean.is_finite() && adversarial.is_finite()).then(|| adversarial / clean)
}

/// Builds a report; MMD entries are filled only for targeted runs.
pub fn ratio_report(
    clean_rmse: f64,
    adv_rmse: f64,
    mmds: Option<(f64, f64)>,
) -> MetricReport {
    MetricReport {
        clean_rmse,
        adv_rmse,
        rmse_ratio: ratio(clean_rmse, adv_rmse),
        clean_mmd: mmds.map(|m| m.0),
        adv_mmd: mmds.map(|m| m.1),
        mmd_ratio: mmds.and_then(|(c, a)| ratio(c, a)),
    }
}

/// Ratio rounded to one decimal with a trailing `×`, or `-` when absent.
pub fn format_ratio(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{v:.1}×"),
        None => "-".to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(data: Vec<f64>) -> Tensor {
        let n = (data.len() as f64).sqrt() as usize;
        Tensor::new(vec![n, n], data).unwrap()
    }

    #[test]
    fn rmse_basics() {
        let gt = SparseDepth::new(plane(vec![1.0, 2.0, 3.0, 4.0]), plane(vec![1.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(rmse(&gt.values, &gt).unwrap(), 0.0);
        let shifted = gt.values.map(|v| v + 3.0);
        assert!((rmse(&shifted, &gt).unwrap() - 3.0).abs() < 1e-12);
        let none = SparseDepth::new(plane(vec![1.0; 4]), plane(vec![0.0; 4])).unwrap();
        assert!(matches!(rmse(&none.values, &none), Err(Error::NoValidPixels)));
    }

    #[test]
    fn mmd_basics() {
        let mask = plane(vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(mmd(&Tensor::full(&[2, 2], 20.0), &mask).unwrap(), 20.0);
        assert_eq!(mmd(&plane(vec![10.0, 30.0, 99.0, 99.0]), &mask).unwrap(), 20.0);
        assert!(matches!(mmd(&mask, &Tensor::zeros(&[2, 2])), Err(Error::EmptyMask)));
    }

    #[test]
    fn target_selection() {
        let gt = SparseDepth::new(
            plane(vec![11.4, 11.4, 60.0, 60.0, 5.0, 5.0, 5.0, 5.0, 5.0]),
            plane(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        let near = plane(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let far = plane(vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let unlabelled = plane(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let kept = select_targets(&[&near, &far, &unlabelled], &gt, 50.0);
        assert_eq!(kept, vec![0]);
        // idempotent
        let again: Vec<usize> = select_targets(&[&near], &gt, 50.0);
        assert_eq!(again, vec![0]);
    }

    #[test]
    fn ratio_display_matches_reported_cells() {
        assert_eq!(format_ratio(ratio(4.22, 11.54)), "2.7×");
        assert_eq!(format_ratio(ratio(20.76, 72.35)), "3.5×");
        assert_eq!(format_ratio(ratio(5.0, 5.0)), "1.0×");
        assert_eq!(ratio(0.0, 3.0), None);
        let r = ratio_report(4.22, 11.54, None);
        assert_eq!(r.rmse_ratio, Some(11.54 / 4.22));
        assert_eq!(r.mmd_ratio, None);
    }

    proptest! {
        #[test]
        fn rmse_order_invariant(vals in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, any::<bool>()), 64)) {
            let pred = Tensor::new(vec![8, 8], vals.iter().map(|v| v.0).collect()).unwrap();
            let gtv = Tensor::new(vec![8, 8], vals.iter().map(|v| v.1).collect()).unwrap();
            let mut valid: Vec<f64> = vals.iter().map(|v| v.2 as u8 as f64).collect();
            valid[0] = 1.0;
            let gt = SparseDepth::new(gtv, Tensor::new(vec![8, 8], valid).unwrap()).unwrap();
            let rev = |t: &Tensor| Tensor::new(vec![8, 8], t.data().iter().rev().copied().collect()).unwrap();
            let gt_rev = SparseDepth::new(rev(&gt.values), rev(&gt.valid)).unwrap();
            let a = rmse(&pred, &gt).unwrap();
            let b = rmse(&rev(&pred), &gt_rev).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn mmd_is_linear(scale in 0.01f64..10.0, vals in proptest::collection::vec(0.0f64..100.0, 16)) {
            let pred = Tensor::new(vec![4, 4], vals).unwrap();
            let mask = Tensor::from_fn(&[4, 4], |i| (i % 3 == 0) as u8 as f64);
            let a = mmd(&pred.map(|v| v * scale), &mask).unwrap();
            let b = scale * mmd(&pred, &mask).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
