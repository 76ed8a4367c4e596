//! Pinball loss for quantile regression: a plain evaluator and the
//! graph-composed form used by training.
//!
//! For quantile level `tau` and residual `u = target - pred`, the per-element
//! penalty is `max(tau * u, (tau - 1) * u)`; the loss is the mean over every
//! element and every quantile level.

use crate::data::types::N_POLLUTANTS;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

fn check_taus(taus: &[f64]) -> Result<()> {
    if taus.is_empty() || !taus.iter().all(|t| t.is_finite() && *t > 0.0 && *t < 1.0) {
        return Err(Error::InvalidInput(format!("quantile levels {taus:?} must lie in (0, 1)")));
    }
    Ok(())
}

/// Mean pinball loss. `pred` carries one more trailing axis than `target`,
/// sized `taus.len()`; every leading axis must match.
pub fn quantile_loss(pred: &Tensor, target: &Tensor, taus: &[f64]) -> Result<f64> {
    check_taus(taus)?;
    let nq = taus.len();
    if pred.rank() != target.rank() + 1
        || pred.shape()[..target.rank()] != *target.shape()
        || pred.shape()[target.rank()] != nq
    {
        return Err(Error::ShapeMismatch {
            op: "quantile_loss",
            detail: format!(
                "pred {:?} must be target {:?} plus a trailing axis of {nq}",
                pred.shape(),
                target.shape()
            ),
        });
    }
    pred.check_finite("quantile_loss")?;
    target.check_finite("quantile_loss")?;
    let mut acc = 0.0;
    for (i, t) in target.data().iter().enumerate() {
        for (q, tau) in taus.iter().enumerate() {
            let u = t - pred.data()[i * nq + q];
            acc += (tau * u).max((tau - 1.0) * u);
        }
    }
    Ok(acc / (target.len() * nq) as f64)
}

/// Rearrange a `[N_s x 6]` window target into the `[(6 Q) x N_s]` layout of
/// the 6-hour head, repeating each value across its quantile rows.
pub fn expand_target_6h(target: &Tensor, nq: usize) -> Result<Tensor> {
    if target.rank() != 2 || target.cols() != N_POLLUTANTS {
        return Err(Error::ShapeMismatch {
            op: "expand_target_6h",
            detail: format!("target has shape {:?}, expected [N_s, {N_POLLUTANTS}]", target.shape()),
        });
    }
    let n_s = target.rows();
    Ok(Tensor::from_fn2(N_POLLUTANTS * nq, n_s, |r, s| target.at2(s, r / nq)))
}

/// Rearrange a `[5 x N_s x 6]` interpolation target into the
/// `[(5 * 6 * Q) x N_s]` layout of the interpolation head.
pub fn expand_target_interp(target: &Tensor, nq: usize) -> Result<Tensor> {
    if target.rank() != 3 || target.shape()[2] != N_POLLUTANTS {
        return Err(Error::ShapeMismatch {
            op: "expand_target_interp",
            detail: format!("target has shape {:?}, expected [5, N_s, {N_POLLUTANTS}]", target.shape()),
        });
    }
    let (frames, n_s) = (target.shape()[0], target.shape()[1]);
    Ok(Tensor::from_fn2(frames * N_POLLUTANTS * nq, n_s, |r, s| {
        let kp = r / nq;
        let (k, p) = (kp / N_POLLUTANTS, kp % N_POLLUTANTS);
        target.data()[(k * n_s + s) * N_POLLUTANTS + p]
    }))
}

/// Quantile level per head row, broadcast over stations: row `r` carries
/// `taus[r % Q]`, matching the head layouts above.
pub fn tau_rows(rows: usize, n_s: usize, taus: &[f64]) -> Result<Tensor> {
    check_taus(taus)?;
    if rows % taus.len() != 0 {
        return Err(Error::ShapeMismatch {
            op: "tau_rows",
            detail: format!("{rows} head rows not divisible by {} quantiles", taus.len()),
        });
    }
    Ok(Tensor::from_fn2(rows, n_s, |r, _| taus[r % taus.len()]))
}

/// Attach the pinball loss to a head output node. `target_mat` and `tau_mat`
/// must already be in the head's `[rows x N_s]` layout.
pub fn quantile_loss_node(
    g: &mut Graph,
    pred: NodeId,
    target_mat: &Tensor,
    tau_mat: &Tensor,
) -> Result<NodeId> {
    let pshape = g.value(pred).shape().to_vec();
    if target_mat.shape() != pshape || tau_mat.shape() != pshape {
        return Err(Error::ShapeMismatch {
            op: "quantile_loss_node",
            detail: format!(
                "pred {pshape:?}, target {:?}, tau {:?} must agree",
                target_mat.shape(),
                tau_mat.shape()
            ),
        });
    }
    let mut tau_minus_one = tau_mat.clone();
    for v in tau_minus_one.data_mut() {
        *v -= 1.0;
    }
    let t = g.input(target_mat.clone())?;
    let tau = g.input(tau_mat.clone())?;
    let tau1 = g.input(tau_minus_one)?;
    let u = g.sub(t, pred)?;
    let lo = g.mul(tau, u)?;
    let hi = g.mul(tau1, u)?;
    let pin = g.maximum(lo, hi)?;
    g.mean(pin)
}
