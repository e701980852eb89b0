//! Comparison uncertainty estimates on the linear reward head: a bootstrap
//! ensemble of ranking-loss heads and MC dropout with per-pair masks.
//!
//! Both produce return samples with the same contract as
//! [`crate::hcpe::posterior_returns`], and both can be stored as chains.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brex::softplus;
use crate::chain::{ChainKind, McmcConfig, PosteriorChain};
use crate::demos::PreferenceDataset;
use crate::embed::AdamW;
use crate::error::{check_dim, invalid, Error, Result};
use crate::mdp::dot;
use crate::rng::{seeded, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrexConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrexConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Vec<f64>,
}

impl LinearHead {
    pub fn predict(&self, phi: &[f64]) -> f64 {
        dot(&self.w, phi)
    }
}

const MASK_STREAM: u64 = 1;
const SUBSAMPLE_STREAM: u64 = 2;

/// Fraction of preference pairs each ensemble member trains on.
pub const ENSEMBLE_SUBSAMPLE: f64 = 0.8;
pub const DROPOUT_P: f64 = 0.5;
pub const DROPOUT_MASKS: usize = 50;

/// Trains a linear head on `−log P(i ≺ j)` with Adam, one pair per update.
/// When `dropout` is set, a keep-mask is drawn per pair from a separate
/// stream and applied to the weights for both trajectories of that pair.
fn train_head(
    data: &PreferenceDataset,
    prefs: &[(usize, usize)],
    cfg: &TrexConfig,
    dropout: Option<f64>,
) -> Result<LinearHead> {
    if prefs.is_empty() {
        return Err(invalid("ranking head training needs at least one preference"));
    }
    let k = data.k();
    let mut rng = seeded(cfg.seed);
    let mut mask_rng = substream(cfg.seed, MASK_STREAM);
    let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let mut opt = AdamW::new(k, cfg.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..prefs.len()).collect();
    let mut mask = vec![1.0; k];
    let mut grad = vec![0.0; k];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &p in &order {
            let (i, j) = prefs[p];
            if let Some(drop) = dropout {
                for m in mask.iter_mut() {
                    *m = if mask_rng.gen::<f64>() < drop { 0.0 } else { 1.0 };
                }
            }
            pair_gradient(&w, &mask, &data.feature_sums()[i], &data.feature_sums()[j], &mut grad);
            opt.step(w.iter_mut(), grad.iter());
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged("ranking head weights became non-finite".into()));
        }
    }
    Ok(LinearHead { w })
}

/// Gradient of `softplus(r_i − r_j)` where both returns use the same masked
/// weights `mask ⊙ w`. Returns the pair loss.
fn pair_gradient(w: &[f64], mask: &[f64], fi: &[f64], fj: &[f64], grad: &mut [f64]) -> f64 {
    let ri: f64 = (0..w.len()).map(|c| mask[c] * w[c] * fi[c]).sum();
    let rj: f64 = (0..w.len()).map(|c| mask[c] * w[c] * fj[c]).sum();
    let s = 1.0 / (1.0 + (rj - ri).exp());
    for c in 0..w.len() {
        grad[c] = s * mask[c] * (fi[c] - fj[c]);
    }
    softplus(ri - rj)
}

/// Point-estimate ranking head on the given preferences.
pub fn train_trex_head(data: &PreferenceDataset, prefs: &[(usize, usize)], cfg: &TrexConfig) -> Result<LinearHead> {
    train_head(data, prefs, cfg, None)
}

/// Mean ranking loss of a head over a preference set.
pub fn ranking_loss(head: &LinearHead, data: &PreferenceDataset, prefs: &[(usize, usize)]) -> f64 {
    let r: Vec<f64> = data.feature_sums().iter().map(|f| head.predict(f)).collect();
    prefs.iter().map(|&(i, j)| softplus(r[i] - r[j])).sum::<f64>() / prefs.len().max(1) as f64
}

/// `n_members` heads, member `m` seeded with `seed + m` and trained on a
/// `subsample` fraction of the preferences drawn without replacement.
pub fn train_ensemble(
    data: &PreferenceDataset,
    n_members: usize,
    subsample: f64,
    cfg: &TrexConfig,
) -> Result<Vec<LinearHead>> {
    if data.prefs().is_empty() {
        return Err(invalid("ensemble training needs at least one preference"));
    }
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(invalid(format!("subsample fraction must lie in (0, 1], got {subsample}")));
    }
    let all = data.prefs();
    let n_keep = ((subsample * all.len() as f64).ceil() as usize).clamp(1, all.len());
    let mut heads = Vec::with_capacity(n_members);
    for m in 0..n_members {
        let seed = cfg.seed.wrapping_add(m as u64);
        let mut idx = sample(&mut substream(seed, SUBSAMPLE_STREAM), all.len(), n_keep).into_vec();
        idx.sort_unstable();
        let prefs: Vec<(usize, usize)> = idx.iter().map(|&i| all[i]).collect();
        let member_cfg = TrexConfig { seed, ..cfg.clone() };
        match train_head(data, &prefs, &member_cfg, None) {
            Ok(h) => heads.push(h),
            Err(e) => {
                return Err(Error::Diverged(format!(
                    "ensemble member {m} failed ({e}); {} of {n_members} members trained",
                    heads.len()
                )))
            }
        }
    }
    Ok(heads)
}

/// Per-member predicted return of `phi_eval`, minus that member's predicted
/// return of the reference policy.
pub fn ensemble_returns(heads: &[LinearHead], phi_eval: &[f64], baseline_phi: &[f64]) -> Result<Vec<f64>> {
    heads
        .iter()
        .map(|h| {
            check_dim(h.w.len(), phi_eval.len())?;
            check_dim(h.w.len(), baseline_phi.len())?;
            Ok(h.predict(phi_eval) - h.predict(baseline_phi))
        })
        .collect()
}

/// Ranking head trained with one dropout mask per preference pair.
pub fn train_dropout_head(data: &PreferenceDataset, p: f64, cfg: &TrexConfig) -> Result<LinearHead> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    train_head(data, data.prefs(), cfg, (p > 0.0).then_some(p))
}

/// Keep-mask with each coordinate dropped with probability `p`.
pub fn sample_mask<R: Rng + ?Sized>(k: usize, p: f64, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 }).collect()
}

/// Masked weight vectors `mask ⊙ w`, one per sampled mask. No rescaling.
pub fn dropout_samples<R: Rng + ?Sized>(head: &LinearHead, n_masks: usize, p: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n_masks)
        .map(|_| {
            sample_mask(head.w.len(), p, rng)
                .into_iter()
                .zip(&head.w)
                .map(|(m, w)| m * w)
                .collect()
        })
        .collect()
}

/// `(mask ⊙ w) · Φ` for `n_masks` random masks.
pub fn dropout_returns<R: Rng + ?Sized>(
    head: &LinearHead,
    phi_eval: &[f64],
    n_masks: usize,
    p: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dim(head.w.len(), phi_eval.len())?;
    Ok(dropout_samples(head, n_masks, p, rng)
        .iter()
        .map(|w| dot(w, phi_eval))
        .collect())
}

/// Stores weight rows in the chain format so policy evaluation can consume
/// them unchanged. Log posteriors are written as 0.
pub fn rows_to_chain(kind: ChainKind, rows: &[Vec<f64>], seed: u64) -> Result<PosteriorChain> {
    let cfg = McmcConfig {
        seed,
        n_steps: rows.len(),
        burn_in: 0,
        thin: 1,
        ..McmcConfig::default()
    };
    PosteriorChain::from_rows(kind, rows, vec![0.0; rows.len()], cfg)
}

/// Ensemble heads as chain rows (raw weights, no baseline normalization).
pub fn ensemble_to_chain(heads: &[LinearHead], seed: u64) -> Result<PosteriorChain> {
    let rows: Vec<Vec<f64>> = heads.iter().map(|h| h.w.clone()).collect();
    rows_to_chain(ChainKind::Ensemble, &rows, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::RankingSource;
    use crate::mdp::Trajectory;

    fn data() -> PreferenceDataset {
        let sums = vec![
            vec![1.0, 0.0, 3.0],
            vec![2.0, 1.0, 1.0],
            vec![2.0, 3.0, 0.0],
            vec![4.0, 2.0, 2.0],
            vec![5.0, 4.0, 1.0],
        ];
        let returns: Vec<f64> = sums.iter().map(|f| 0.5 * f[0] + 0.5 * f[1] - 0.2 * f[2]).collect();
        let prefs = crate::demos::all_pairs_from_returns(&returns);
        let trajs = (0..5).map(|i| Trajectory::new(vec![(i, 0)])).collect();
        PreferenceDataset::new(trajs, sums, prefs, RankingSource::External).unwrap()
    }

    #[test]
    fn single_member_matches_point_estimate() {
        let d = data();
        let cfg = TrexConfig { seed: 9, ..TrexConfig::default() };
        let single = train_ensemble(&d, 1, 1.0, &cfg).unwrap();
        let point = train_trex_head(&d, d.prefs(), &cfg).unwrap();
        assert_eq!(single[0], point);
        assert!(ranking_loss(&point, &d, d.prefs()) < 0.3);
        assert_eq!(train_ensemble(&d, 5, 0.8, &cfg).unwrap(), train_ensemble(&d, 5, 0.8, &cfg).unwrap());
    }

    #[test]
    fn ensemble_baseline_normalization() {
        let heads = vec![LinearHead { w: vec![1.0, 2.0] }, LinearHead { w: vec![3.0, -1.0] }];
        assert_eq!(ensemble_returns(&heads, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        let h = [LinearHead { w: vec![1.0] }];
        assert_eq!(ensemble_returns(&h, &[15.0], &[10.0]).unwrap(), vec![5.0]);
        let r = ensemble_returns(&heads, &[2.0, 0.5], &[1.0, 1.0]).unwrap();
        for (h, x) in heads.iter().zip(&r) {
            assert_eq!(*x, h.predict(&[2.0, 0.5]) - h.predict(&[1.0, 1.0]));
        }
    }

    #[test]
    fn dropout_zero_is_plain_training() {
        let d = data();
        let cfg = TrexConfig { seed: 4, ..TrexConfig::default() };
        assert_eq!(train_dropout_head(&d, 0.0, &cfg).unwrap(), train_trex_head(&d, d.prefs(), &cfg).unwrap());
        assert_ne!(train_dropout_head(&d, 0.5, &cfg).unwrap(), train_trex_head(&d, d.prefs(), &cfg).unwrap());
        assert!(train_dropout_head(&d, 1.0, &cfg).is_err());
    }

    #[test]
    fn dropout_return_examples() {
        let h = LinearHead { w: vec![0.5, -1.0, 2.0] };
        let mut rng = seeded(1);
        let r = dropout_returns(&h, &[0.0; 3], 50, 0.5, &mut rng).unwrap();
        assert_eq!(r, vec![0.0; 50]);
        let r = dropout_returns(&h, &[1.0, 1.0, 1.0], 10, 0.0, &mut rng).unwrap();
        assert!(r.iter().all(|&x| x == h.predict(&[1.0, 1.0, 1.0])));
    }

    #[test]
    fn dropout_mean_is_scaled_by_keep_probability() {
        // Each return is Σ m_c w_c Φ_c with m_c ~ Bernoulli(1-p):
        // mean (1-p)·wᵀΦ, variance p(1-p) Σ (w_c Φ_c)².
        let h = LinearHead { w: vec![0.5, -1.0, 2.0, 0.25] };
        let phi = [1.0, 2.0, 3.0, 4.0];
        let p = 0.5;
        let n = 10_000;
        let r = dropout_returns(&h, &phi, n, p, &mut seeded(2)).unwrap();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var: f64 = p * (1.0 - p) * h.w.iter().zip(&phi).map(|(w, f)| (w * f).powi(2)).sum::<f64>();
        let want = (1.0 - p) * h.predict(&phi);
        assert!((mean - want).abs() < 3.0 * (var / n as f64).sqrt(), "{mean} vs {want}");
    }

    #[test]
    fn one_mask_per_pair() {
        let w = [1.0, 2.0, 3.0];
        let mask = [1.0, 0.0, 1.0];
        let mut g = [9.0; 3];
        let loss = pair_gradient(&w, &mask, &[1.0, 5.0, 0.0], &[0.0, -5.0, 1.0], &mut g);
        // masked coordinate contributes to neither return nor gradient
        assert_eq!(g[1], 0.0);
        let (ri, rj) = (1.0, 3.0);
        assert!((loss - softplus(ri - rj)).abs() < 1e-15);
        let s = 1.0 / (1.0 + (rj - ri as f64).exp());
        assert!((g[0] - s).abs() < 1e-15 && (g[2] + s).abs() < 1e-15);
    }

    #[test]
    fn expected_active_coordinates() {
        let k = 8;
        let n = 10_000;
        let mut rng = seeded(3);
        let active: f64 = (0..n).map(|_| sample_mask(k, 0.5, &mut rng).iter().sum::<f64>()).sum::<f64>() / n as f64;
        // Binomial(k, ½): variance k/4 per mask.
        let sd = (k as f64 / 4.0 / n as f64).sqrt();
        assert!((active - k as f64 / 2.0).abs() < 3.0 * sd, "{active}");
    }
}
