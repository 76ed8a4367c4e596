//! The five verification metrics computed over paired prediction and
//! observation series.
//!
//! With u_i = P_i - O_i over the N kept pairs:
//!   MAE   = mean |u_i|
//!   RMSE  = sqrt(mean u_i^2)
//!   rRMSE = RMSE / mean(O)            (missing when mean(O) = 0)
//!   MRE   = mean |u_i / O_i|          (pairs with O_i = 0 excluded, counted)
//!   R     = Pearson correlation       (missing when either series is constant)
//!
//! A pair is kept when both sides are finite; non-finite entries mark missing
//! data and are dropped pairwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Pairs actually scored (finite on both sides).
    pub n_pairs: usize,
    /// Pairs dropped from MRE because the observation is zero.
    pub mre_excluded: usize,
    pub r: Option<f64>,
    pub rmse: f64,
    pub rrmse: Option<f64>,
    pub mre: Option<f64>,
    pub mae: f64,
}

pub fn compute_metrics(pred: &[f64], obs: &[f64]) -> Result<Metrics> {
    if pred.len() != obs.len() {
        return Err(Error::InvalidInput(format!(
            "prediction series has {} entries, observations {}",
            pred.len(),
            obs.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(obs)
        .filter(|(p, o)| p.is_finite() && o.is_finite())
        .map(|(p, o)| (*p, *o))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} valid pairs after dropping missing entries; metrics need at least 2"
        )));
    }
    let nf = n as f64;

    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut obs_sum = 0.0;
    let mut pred_sum = 0.0;
    let mut mre_sum = 0.0;
    let mut mre_n = 0usize;
    for &(p, o) in &pairs {
        let u = p - o;
        abs_sum += u.abs();
        sq_sum += u * u;
        obs_sum += o;
        pred_sum += p;
        if o != 0.0 {
            mre_sum += (u / o).abs();
            mre_n += 1;
        }
    }
    let mae = abs_sum / nf;
    let rmse = (sq_sum / nf).sqrt();
    let obs_mean = obs_sum / nf;
    let pred_mean = pred_sum / nf;
    let rrmse = (obs_mean != 0.0).then(|| rmse / obs_mean);
    let mre = (mre_n > 0).then(|| mre_sum / mre_n as f64);

    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_o = 0.0;
    for &(p, o) in &pairs {
        let dp = p - pred_mean;
        let dobs = o - obs_mean;
        cov += dp * dobs;
        var_p += dp * dp;
        var_o += dobs * dobs;
    }
    let r = (var_p > 0.0 && var_o > 0.0).then(|| (cov / (var_p.sqrt() * var_o.sqrt())).clamp(-1.0, 1.0));

    Ok(Metrics { n_pairs: n, mre_excluded: n - mre_n, r, rmse, rrmse, mre, mae })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn perfect_prediction_scores_zero_error_and_unit_correlation() {
        let obs = [3.0, 7.0, 5.0, 9.0];
        let m = compute_metrics(&obs, &obs).unwrap();
        close(m.mae, 0.0);
        close(m.rmse, 0.0);
        close(m.mre.unwrap(), 0.0);
        close(m.rrmse.unwrap(), 0.0);
        close(m.r.unwrap(), 1.0);
        assert_eq!(m.n_pairs, 4);
        assert_eq!(m.mre_excluded, 0);
    }

    #[test]
    fn constant_offset_gives_equal_mae_and_rmse() {
        let obs = [3.0, 7.0, 5.0];
        let pred: Vec<f64> = obs.iter().map(|o| o - 1.5).collect();
        let m = compute_metrics(&pred, &obs).unwrap();
        close(m.mae, 1.5);
        close(m.rmse, 1.5);
        close(m.r.unwrap(), 1.0);
    }

    #[test]
    fn worked_three_point_example() {
        let m = compute_metrics(&[2.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        close(m.mae, 2.0 / 3.0);
        close(m.rmse, (2.0f64 / 3.0).sqrt());
        close(m.rrmse.unwrap(), (2.0f64 / 3.0).sqrt() / 2.0);
        close(m.mre.unwrap(), 4.0 / 9.0);
        close(m.r.unwrap(), 3.0f64.sqrt() / 2.0);
    }

    #[test]
    fn constant_series_leaves_r_undefined() {
        let m = compute_metrics(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(m.r.is_none());
        let m = compute_metrics(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap();
        assert!(m.r.is_none());
    }

    #[test]
    fn zero_observations_are_excluded_from_mre_and_counted() {
        let m = compute_metrics(&[5.0, 2.0, 4.0], &[0.0, 1.0, 2.0]).unwrap();
        close(m.mre.unwrap(), 1.0);
        assert_eq!(m.mre_excluded, 1);
        let all_zero = compute_metrics(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!(all_zero.mre.is_none());
        assert_eq!(all_zero.mre_excluded, 2);
    }

    #[test]
    fn zero_mean_observations_leave_rrmse_undefined() {
        let m = compute_metrics(&[1.0, 1.0], &[-2.0, 2.0]).unwrap();
        assert!(m.rrmse.is_none());
        close(m.rmse, (0.5f64 * (9.0 + 1.0)).sqrt());
    }

    #[test]
    fn non_finite_entries_are_dropped_pairwise() {
        let with_gap = compute_metrics(&[2.0, f64::NAN, 4.0, 1.0], &[1.0, 2.0, 3.0, f64::INFINITY]).unwrap();
        let without = compute_metrics(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!(with_gap, without);
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        assert!(compute_metrics(&[1.0], &[1.0]).is_err());
        assert!(compute_metrics(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn rmse_dominates_mae_and_rrmse_scales_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let obs: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..50.0)).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..50.0)).collect();
            let m = compute_metrics(&pred, &obs).unwrap();
            assert!(m.rmse >= m.mae - 1e-12);
            let mean = obs.iter().sum::<f64>() / n as f64;
            let rel = (m.rrmse.unwrap() * mean - m.rmse).abs() / m.rmse.max(1e-300);
            assert!(rel <= 1e-12);
            if let Some(r) = m.r {
                assert!((-1.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn r_and_rmse_are_symmetric_but_mre_is_not() {
        let a = [1.0, 4.0, 2.0, 8.0];
        let b = [2.0, 3.0, 5.0, 7.0];
        let ab = compute_metrics(&a, &b).unwrap();
        let ba = compute_metrics(&b, &a).unwrap();
        close(ab.r.unwrap(), ba.r.unwrap());
        close(ab.rmse, ba.rmse);
        close(ab.mae, ba.mae);
        let fwd = compute_metrics(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        let rev = compute_metrics(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        close(fwd.mre.unwrap(), 1.0);
        close(rev.mre.unwrap(), 0.5);
    }

    #[test]
    fn disjoint_sets_pool_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let na = rng.gen_range(2..20);
            let nb = rng.gen_range(2..20);
            let gen = |rng: &mut ChaCha8Rng, n: usize| -> (Vec<f64>, Vec<f64>) {
                (
                    (0..n).map(|_| rng.gen_range(1.0..30.0)).collect(),
                    (0..n).map(|_| rng.gen_range(1.0..30.0)).collect(),
                )
            };
            let (pa, oa) = gen(&mut rng, na);
            let (pb, ob) = gen(&mut rng, nb);
            let ma = compute_metrics(&pa, &oa).unwrap();
            let mb = compute_metrics(&pb, &ob).unwrap();
            let pooled = compute_metrics(
                &[pa.clone(), pb.clone()].concat(),
                &[oa.clone(), ob.clone()].concat(),
            )
            .unwrap();
            let n = (na + nb) as f64;
            let mae = (na as f64 * ma.mae + nb as f64 * mb.mae) / n;
            close(pooled.mae, mae);
            let rmse = ((na as f64 * ma.rmse.powi(2) + nb as f64 * mb.rmse.powi(2)) / n).sqrt();
            assert!((pooled.rmse - rmse).abs() <= 1e-12);
            let mre = (na as f64 * ma.mre.unwrap() + nb as f64 * mb.mre.unwrap()) / n;
            assert!((pooled.mre.unwrap() - mre).abs() <= 1e-12);
        }
    }
}
