//! Feature-similarity and spatial-continuity losses and the schedules that
//! weight them against each other.
//!
//! The tensor functions take a `(1, q, H, W)` (or `(q, H, W)`) response map and
//! stay differentiable; labels enter as constants.

use candle_core::{DType, Device, Tensor};

use crate::config::{MuSchedule, Reduction};
use crate::error::{Error, Result};
use crate::types::{LabelMap, LossBreakdown, ResponseMap};

fn as_chw(resp: &Tensor) -> Result<Tensor> {
    match resp.rank() {
        4 if resp.dim(0)? == 1 => Ok(resp.squeeze(0)?),
        3 => Ok(resp.clone()),
        _ => Err(Error::ShapeMismatch(format!(
            "expected (1, q, H, W) responses, got {:?}",
            resp.dims()
        ))),
    }
}

/// Softmax cross-entropy between each pixel's response vector and its label.
///
/// `labels` is a `u32` tensor with `H*W` entries in row-major pixel order.
pub fn feature_similarity(resp: &Tensor, labels: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let chw = as_chw(resp)?;
    let (q, h, w) = chw.dims3()?;
    let n = h * w;
    if labels.elem_count() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a {h}x{w} response map",
            labels.elem_count()
        )));
    }
    let logits = chw.reshape((q, n))?.t()?; // (N, q)
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?; // (N, 1)
    let picked = shifted
        .contiguous()?
        .gather(&labels.reshape((n, 1))?.to_dtype(DType::U32)?, 1)?;
    let nll = (lse - picked)?;
    Ok(match reduction {
        Reduction::Mean => nll.mean_all()?,
        Reduction::Sum => nll.sum_all()?,
    })
}

/// L1 norm of horizontal plus vertical neighbour differences.
///
/// With `Reduction::Mean` the sum is divided by the number of difference
/// terms, `q * (H * (W - 1) + (H - 1) * W)`.
pub fn spatial_continuity(resp: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let chw = as_chw(resp)?;
    let (q, h, w) = chw.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::TooSmall { height: h, width: w });
    }
    let horizontal = (chw.narrow(2, 0, w - 1)? - chw.narrow(2, 1, w - 1)?)?.abs()?.sum_all()?;
    let vertical = (chw.narrow(1, 0, h - 1)? - chw.narrow(1, 1, h - 1)?)?.abs()?.sum_all()?;
    let total = (horizontal + vertical)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => {
            let terms = q * (h * (w - 1) + (h - 1) * w);
            (total / terms as f64)?
        }
    })
}

/// The balancing weight for `q_prime` clusters.
pub fn compute_mu(schedule: &MuSchedule, q_prime: usize) -> Result<f64> {
    if q_prime < 1 {
        return Err(Error::InvalidQPrime(q_prime));
    }
    let q = q_prime as f64;
    Ok(match *schedule {
        MuSchedule::Fsf { alpha } => q / alpha,
        MuSchedule::Scf { alpha } => alpha / q,
        MuSchedule::Fixed { mu } => mu,
    })
}

/// `sim + mu * con` as a differentiable scalar plus its parts.
pub fn combined(
    resp: &Tensor,
    labels: &Tensor,
    schedule: &MuSchedule,
    q_prime: usize,
    reduction: Reduction,
) -> Result<(Tensor, LossBreakdown)> {
    let mu = compute_mu(schedule, q_prime)?;
    let sim = feature_similarity(resp, labels, reduction)?;
    let con = spatial_continuity(resp, reduction)?;
    let total = (&sim + (&con * mu)?)?;
    let parts = LossBreakdown::new(scalar(&sim)?, scalar(&con)?, mu);
    Ok((total, parts))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn labels_tensor(labels: &LabelMap, device: &Device) -> Result<Tensor> {
    let data: Vec<u32> = labels.labels().iter().copied().collect();
    Ok(Tensor::from_vec(data, labels.height() * labels.width(), device)?)
}

fn check_dims(resp: &ResponseMap, labels: &LabelMap) -> Result<()> {
    if (resp.height(), resp.width()) != labels.dims() {
        return Err(Error::ShapeMismatch(format!(
            "responses are {}x{}, labels are {:?}",
            resp.height(),
            resp.width(),
            labels.dims()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of a response map against its labels.
pub fn feature_similarity_loss(resp: &ResponseMap, labels: &LabelMap) -> Result<f64> {
    feature_similarity_loss_with(resp, labels, Reduction::Mean)
}

pub fn feature_similarity_loss_with(
    resp: &ResponseMap,
    labels: &LabelMap,
    reduction: Reduction,
) -> Result<f64> {
    check_dims(resp, labels)?;
    let dev = Device::Cpu;
    let t = resp.to_tensor(&dev, DType::F64)?;
    scalar(&feature_similarity(&t, &labels_tensor(labels, &dev)?, reduction)?)
}

/// Mean absolute neighbour difference of a response map.
pub fn spatial_continuity_loss(resp: &ResponseMap) -> Result<f64> {
    spatial_continuity_loss_with(resp, Reduction::Mean)
}

pub fn spatial_continuity_loss_with(resp: &ResponseMap, reduction: Reduction) -> Result<f64> {
    let t = resp.to_tensor(&Device::Cpu, DType::F64)?;
    scalar(&spatial_continuity(&t, reduction)?)
}

pub fn combined_loss(
    resp: &ResponseMap,
    labels: &LabelMap,
    schedule: &MuSchedule,
    q_prime: usize,
    reduction: Reduction,
) -> Result<LossBreakdown> {
    check_dims(resp, labels)?;
    let dev = Device::Cpu;
    let t = resp.to_tensor(&dev, DType::F64)?;
    Ok(combined(&t, &labels_tensor(labels, &dev)?, schedule, q_prime, reduction)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::argmax_labels;
    use ndarray::Array3;

    fn map(h: usize, w: usize, q: usize, data: Vec<f64>) -> ResponseMap {
        ResponseMap::normalized(Array3::from_shape_vec((h, w, q), data).unwrap())
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let r = map(1, 1, 2, vec![0.0, 0.0]);
        let l = LabelMap::from_vec(1, 1, vec![0]).unwrap();
        let v = feature_similarity_loss(&r, &l).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit() {
        let r = map(1, 1, 2, vec![20.0, -20.0]);
        let l = LabelMap::from_vec(1, 1, vec![0]).unwrap();
        assert!(feature_similarity_loss(&r, &l).unwrap() < 1e-8);
    }

    #[test]
    fn label_shape_mismatch() {
        let r = map(2, 2, 2, vec![0.0; 8]);
        let l = LabelMap::from_vec(1, 2, vec![0, 1]).unwrap();
        assert!(matches!(feature_similarity_loss(&r, &l), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn hand_case_sum_and_mean() {
        let r = map(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(spatial_continuity_loss_with(&r, Reduction::Sum).unwrap(), 6.0);
        // four difference terms: two horizontal, two vertical
        assert_eq!(spatial_continuity_loss(&r).unwrap(), 1.5);
    }

    #[test]
    fn constant_map_has_no_continuity_loss() {
        let r = map(3, 4, 2, vec![0.7; 24]);
        assert_eq!(spatial_continuity_loss(&r).unwrap(), 0.0);
    }

    #[test]
    fn too_small() {
        let r = map(1, 4, 2, vec![0.0; 8]);
        assert!(matches!(spatial_continuity_loss(&r), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn mu_schedules() {
        assert!((compute_mu(&MuSchedule::fsf(), 100).unwrap() - 100.0 / 15.0).abs() < 1e-12);
        assert_eq!(compute_mu(&MuSchedule::scf(), 100).unwrap(), 0.5);
        assert_eq!(compute_mu(&MuSchedule::scf(), 50).unwrap(), 1.0);
        assert_eq!(compute_mu(&MuSchedule::Fixed { mu: 5.0 }, 7).unwrap(), 5.0);
        assert!(matches!(compute_mu(&MuSchedule::fsf(), 0), Err(Error::InvalidQPrime(0))));
    }

    #[test]
    fn schedule_monotonicity() {
        for q in 1..200 {
            let f0 = compute_mu(&MuSchedule::fsf(), q).unwrap();
            let f1 = compute_mu(&MuSchedule::fsf(), q + 1).unwrap();
            let s0 = compute_mu(&MuSchedule::scf(), q).unwrap();
            let s1 = compute_mu(&MuSchedule::scf(), q + 1).unwrap();
            assert!(f1 > f0);
            assert!(s1 < s0);
        }
    }

    #[test]
    fn fixed_zero_is_similarity_alone() {
        let r = map(2, 2, 2, vec![0.3, -0.2, 1.0, 0.5, -1.0, 2.0, 0.0, 0.1]);
        let l = argmax_labels(&r);
        let b = combined_loss(&r, &l, &MuSchedule::Fixed { mu: 0.0 }, l.unique_count(), Reduction::Mean)
            .unwrap();
        assert_eq!(b.total, b.sim);
    }

    #[test]
    fn schedules_share_parts() {
        let r = map(2, 3, 2, vec![0.3, -0.2, 1.0, 0.5, -1.0, 2.0, 0.0, 0.1, 0.4, 0.4, 0.9, -0.9]);
        let l = argmax_labels(&r);
        let a = combined_loss(&r, &l, &MuSchedule::fsf(), 2, Reduction::Mean).unwrap();
        let b = combined_loss(&r, &l, &MuSchedule::scf(), 2, Reduction::Mean).unwrap();
        assert_eq!(a.sim, b.sim);
        assert_eq!(a.con, b.con);
        assert_ne!(a.total, b.total);
        assert!((a.total - (a.sim + a.mu * a.con)).abs() <= 1e-9 * a.total.abs());
    }
}
