//! Station-level input assembly and self-attention.
//!
//! Stations are columns throughout: the assembled input is
//! `[feature_width x N_s]` and every latent that follows is
//! `[d_model x N_s]`, so adding or permuting stations never changes the
//! per-station arithmetic.

use crate::data::types::{TimeCode, N_POLLUTANTS};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::nn;
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};

/// Self-attention output plus the attention matrix for inspection.
pub struct SiteAttention {
    /// `[d_model x N_s]` residual-refined station latents.
    pub latent: NodeId,
    /// `[N_s x N_s]` row-stochastic attention weights; row `i` holds the
    /// weights station `i` places on every station.
    pub attention: NodeId,
}

/// Look up and concatenate the day-of-year and hour-of-day embeddings.
///
/// Returns a `[temb_dim]` vector node backed by two trainable tables.
pub fn temporal_embed(g: &mut Graph, store: &ParamStore, tc: &TimeCode) -> Result<NodeId> {
    tc.validate()?;
    let doy_table = nn::param_node(g, store, "temb.doy")?;
    let hod_table = nn::param_node(g, store, "temb.hod")?;
    let doy = g.embed_row(doy_table, (tc.doy - 1) as usize)?;
    let hod = g.embed_row(hod_table, tc.hod as usize)?;
    g.concat0(&[doy, hod])
}

/// Stack the previous frame, current frame, positional encoding, and the
/// broadcast temporal embedding into the `[feature_width x N_s]` site input.
///
/// `x_prev` and `x_curr` are normalized `[N_s x N_POLLUTANTS]` frames;
/// `pe` is the `[4 x N_s]` station positional encoding.
pub fn assemble_site_input(
    g: &mut Graph,
    cfg: &ModelConfig,
    x_prev: &Tensor,
    x_curr: &Tensor,
    pe: &Tensor,
    temb: NodeId,
) -> Result<NodeId> {
    let n_s = cfg.n_stations;
    for (name, t) in [("x_prev", x_prev), ("x_curr", x_curr)] {
        if t.shape() != [n_s, N_POLLUTANTS] {
            return Err(Error::ShapeMismatch {
                op: "assemble_site_input",
                detail: format!(
                    "{name} has shape {:?}, expected [{n_s}, {N_POLLUTANTS}]",
                    t.shape()
                ),
            });
        }
    }
    if pe.shape() != [4, n_s] {
        return Err(Error::ShapeMismatch {
            op: "assemble_site_input",
            detail: format!("pe has shape {:?}, expected [4, {n_s}]", pe.shape()),
        });
    }
    let prev_in = g.input(x_prev.clone())?;
    let curr_in = g.input(x_curr.clone())?;
    let prev_t = g.transpose(prev_in)?;
    let curr_t = g.transpose(curr_in)?;
    let pe_in = g.input(pe.clone())?;
    let temb_cols = g.broadcast_col(temb, n_s)?;
    g.concat0(&[prev_t, curr_t, pe_in, temb_cols])
}

/// Scaled dot-product self-attention over stations.
///
/// `x` is the assembled `[feature_width x N_s]` input. The value path
/// carries the residual: `latent = MLP(LN(V + V.A^T))` column-wise.
pub fn site_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    x: NodeId,
) -> Result<SiteAttention> {
    let wq = nn::param_node(g, store, "site.wq")?;
    let wk = nn::param_node(g, store, "site.wk")?;
    let wv = nn::param_node(g, store, "site.wv")?;
    let q = g.matmul(wq, x)?;
    let k = g.matmul(wk, x)?;
    let v = g.matmul(wv, x)?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(qt, k)?;
    let scaled = g.scale(scores, 1.0 / (cfg.d_model as f64).sqrt())?;
    let attention = g.softmax(scaled, 1)?;
    let at = g.transpose(attention)?;
    let mixed = g.matmul(v, at)?;
    let residual = g.add(v, mixed)?;
    let normed = nn::apply_layer_norm(g, store, "site.ln", residual)?;
    let latent = nn::apply_mlp(g, store, "site.mlp", normed)?;
    Ok(SiteAttention { latent, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::init_6h_params;

    fn frame(n_s: usize, offset: f64) -> Tensor {
        Tensor::from_fn2(n_s, N_POLLUTANTS, |s, p| offset + 0.1 * s as f64 - 0.05 * p as f64)
    }

    fn pe_for(n_s: usize) -> Tensor {
        Tensor::from_fn2(4, n_s, |r, s| 0.01 * (r as f64 + 1.0) * (s as f64 + 1.0))
    }

    fn run_attention(cfg: &ModelConfig, seed: u64, perm: &[usize]) -> (Tensor, Tensor) {
        let store = init_6h_params(cfg, seed).unwrap();
        let n_s = cfg.n_stations;
        let base_prev = frame(n_s, 0.3);
        let base_curr = frame(n_s, -0.2);
        let base_pe = pe_for(n_s);
        let x_prev = Tensor::from_fn2(n_s, N_POLLUTANTS, |s, p| base_prev.at2(perm[s], p));
        let x_curr = Tensor::from_fn2(n_s, N_POLLUTANTS, |s, p| base_curr.at2(perm[s], p));
        let pe = Tensor::from_fn2(4, n_s, |r, s| base_pe.at2(r, perm[s]));
        let mut g = Graph::new();
        let tc = TimeCode { doy: 100, hod: 7 };
        let temb = temporal_embed(&mut g, &store, &tc).unwrap();
        let x = assemble_site_input(&mut g, cfg, &x_prev, &x_curr, &pe, temb).unwrap();
        let out = site_self_attention(&mut g, &store, cfg, x).unwrap();
        (g.value(out.latent).clone(), g.value(out.attention).clone())
    }

    #[test]
    fn temporal_embed_concatenates_table_rows() {
        let cfg = ModelConfig::micro();
        let store = init_6h_params(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let tc = TimeCode { doy: 61, hod: 12 };
        let e = temporal_embed(&mut g, &store, &tc).unwrap();
        let v = g.value(e);
        assert_eq!(v.shape(), &[cfg.temb_dim]);
        let doy = store.get("temb.doy").unwrap();
        let hod = store.get("temb.hod").unwrap();
        assert_eq!(v.data()[0], doy.at2(60, 0));
        assert_eq!(v.data()[cfg.temb_dim / 2], hod.at2(12, 0));
    }

    #[test]
    fn site_input_stacks_rows_in_order() {
        let cfg = ModelConfig::micro();
        let store = init_6h_params(&cfg, 3).unwrap();
        let n_s = cfg.n_stations;
        let x_prev = frame(n_s, 0.3);
        let x_curr = frame(n_s, -0.2);
        let pe = pe_for(n_s);
        let mut g = Graph::new();
        let temb = temporal_embed(&mut g, &store, &TimeCode { doy: 10, hod: 0 }).unwrap();
        let x = assemble_site_input(&mut g, &cfg, &x_prev, &x_curr, &pe, temb).unwrap();
        let v = g.value(x);
        assert_eq!(v.shape(), &[cfg.feature_width(), n_s]);
        assert_eq!(v.at2(0, 1), x_prev.at2(1, 0));
        assert_eq!(v.at2(N_POLLUTANTS + 2, 0), x_curr.at2(0, 2));
        assert_eq!(v.at2(2 * N_POLLUTANTS, 1), pe.at2(0, 1));
        let temb_v = g.value(temb).clone();
        assert_eq!(v.at2(2 * N_POLLUTANTS + 4, 0), temb_v.data()[0]);
        assert_eq!(v.at2(2 * N_POLLUTANTS + 4, 1), temb_v.data()[0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = ModelConfig::micro();
        let perm: Vec<usize> = (0..cfg.n_stations).collect();
        let (_, a) = run_attention(&cfg, 9, &perm);
        assert_eq!(a.shape(), &[cfg.n_stations, cfg.n_stations]);
        for i in 0..cfg.n_stations {
            let row: f64 = (0..cfg.n_stations).map(|j| a.at2(i, j)).sum();
            assert!((row - 1.0).abs() <= 1e-9, "row {i} sums to {row}");
        }
    }

    #[test]
    fn single_station_attends_to_itself() {
        let cfg = ModelConfig { n_stations: 1, ..ModelConfig::micro() };
        let (latent, a) = run_attention(&cfg, 2, &[0]);
        assert_eq!(a.shape(), &[1, 1]);
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(latent.shape(), &[cfg.d_model, 1]);
    }

    #[test]
    fn permuting_stations_permutes_outputs() {
        let cfg = ModelConfig { n_stations: 4, ..ModelConfig::micro() };
        let identity: Vec<usize> = (0..4).collect();
        let perm = vec![2, 0, 3, 1];
        let (base, base_a) = run_attention(&cfg, 11, &identity);
        let (permuted, perm_a) = run_attention(&cfg, 11, &perm);
        for s in 0..4 {
            for r in 0..cfg.d_model {
                let diff = (permuted.at2(r, s) - base.at2(r, perm[s])).abs();
                assert!(diff <= 1e-9, "latent mismatch at ({r}, {s}): {diff}");
            }
            for j in 0..4 {
                let diff = (perm_a.at2(s, j) - base_a.at2(perm[s], perm[j])).abs();
                assert!(diff <= 1e-9, "attention mismatch at ({s}, {j}): {diff}");
            }
        }
    }

    #[test]
    fn two_station_output_matches_step_by_step_evaluation() {
        use crate::numerics::matmul;
        let cfg = ModelConfig::micro();
        let store = init_6h_params(&cfg, 21).unwrap();
        let x_prev = frame(2, 0.4);
        let x_curr = frame(2, -0.1);
        let pe = pe_for(2);
        let mut g = Graph::new();
        let temb = temporal_embed(&mut g, &store, &TimeCode { doy: 200, hod: 18 }).unwrap();
        let x_node = assemble_site_input(&mut g, &cfg, &x_prev, &x_curr, &pe, temb).unwrap();
        let out = site_self_attention(&mut g, &store, &cfg, x_node).unwrap();
        let got = g.value(out.latent).clone();
        let got_a = g.value(out.attention).clone();
        let x = g.value(x_node).clone();

        let d = cfg.d_model;
        let q = matmul(store.get("site.wq").unwrap(), &x).unwrap();
        let k = matmul(store.get("site.wk").unwrap(), &x).unwrap();
        let v = matmul(store.get("site.wv").unwrap(), &x).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        let mut a = Tensor::zeros(&[2, 2]);
        for i in 0..2 {
            let logits: Vec<f64> =
                (0..2).map(|j| (0..d).map(|r| q.at2(r, i) * k.at2(r, j)).sum::<f64>() * scale).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..2 {
                a.set2(i, j, exps[j] / z);
            }
        }
        let mut res = Tensor::zeros(&[d, 2]);
        for r in 0..d {
            for s in 0..2 {
                let h_sa: f64 = (0..2).map(|j| a.at2(s, j) * v.at2(r, j)).sum();
                res.set2(r, s, v.at2(r, s) + h_sa);
            }
        }
        let gain = store.get("site.ln.gain").unwrap();
        let bias = store.get("site.ln.bias").unwrap();
        let mut normed = Tensor::zeros(&[d, 2]);
        for s in 0..2 {
            let mean: f64 = (0..d).map(|r| res.at2(r, s)).sum::<f64>() / d as f64;
            let var: f64 = (0..d).map(|r| (res.at2(r, s) - mean).powi(2)).sum::<f64>() / d as f64;
            let sd = (var + nn::LN_EPS).sqrt();
            for r in 0..d {
                normed.set2(r, s, gain.data()[r] * (res.at2(r, s) - mean) / sd + bias.data()[r]);
            }
        }
        let fc1 = matmul(store.get("site.mlp.fc1.w").unwrap(), &normed).unwrap();
        let mut hidden = Tensor::zeros(&[cfg.mlp_hidden, 2]);
        for r in 0..cfg.mlp_hidden {
            for s in 0..2 {
                hidden.set2(r, s, (fc1.at2(r, s) + store.get("site.mlp.fc1.b").unwrap().data()[r]).max(0.0));
            }
        }
        let fc2 = matmul(store.get("site.mlp.fc2.w").unwrap(), &hidden).unwrap();
        for r in 0..d {
            for s in 0..2 {
                let want = fc2.at2(r, s) + store.get("site.mlp.fc2.b").unwrap().data()[r];
                assert!((got.at2(r, s) - want).abs() <= 1e-12, "mismatch at ({r}, {s})");
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((got_a.at2(i, j) - a.at2(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identical_feature_columns_give_uniform_attention() {
        let cfg = ModelConfig { n_stations: 3, ..ModelConfig::micro() };
        let store = init_6h_params(&cfg, 4).unwrap();
        let x_prev = Tensor::filled(&[3, N_POLLUTANTS], 0.7);
        let x_curr = Tensor::filled(&[3, N_POLLUTANTS], -0.4);
        let pe = Tensor::filled(&[4, 3], 0.2);
        let mut g = Graph::new();
        let temb = temporal_embed(&mut g, &store, &TimeCode { doy: 50, hod: 3 }).unwrap();
        let x = assemble_site_input(&mut g, &cfg, &x_prev, &x_curr, &pe, temb).unwrap();
        let out = site_self_attention(&mut g, &store, &cfg, x).unwrap();
        let a = g.value(out.attention);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.at2(i, j) - 1.0 / 3.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn wrong_pe_shape_is_rejected() {
        let cfg = ModelConfig::micro();
        let n_s = cfg.n_stations;
        let mut g = Graph::new();
        let store = init_6h_params(&cfg, 0).unwrap();
        let temb = temporal_embed(&mut g, &store, &TimeCode { doy: 1, hod: 0 }).unwrap();
        let bad_pe = Tensor::zeros(&[3, n_s]);
        let err = assemble_site_input(&mut g, &cfg, &frame(n_s, 0.0), &frame(n_s, 0.1), &bad_pe, temb);
        assert!(err.is_err());
    }
}
