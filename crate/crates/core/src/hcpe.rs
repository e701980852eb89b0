//! High-confidence policy evaluation over a reward posterior.
//!
//! Returns of an evaluation policy under every retained posterior sample
//! are `W Φ_eval`; the δ-VaR bound is the `⌈δN⌉`-th smallest of them.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brex::run_mcmc;
use crate::chain::{McmcConfig, PosteriorChain};
use crate::demos::PreferenceDataset;
use crate::error::{check_dim, invalid, Result};
use crate::mdp::{dot, Trajectory};

pub const DEFAULT_DELTA: f64 = 0.05;

/// The performance statistic being bounded. Only expected return exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerformanceStatistic {
    #[default]
    ExpectedReturn,
}

/// `w · Φ_eval` for every sample of an already burned/thinned chain.
pub fn posterior_returns(chain: &PosteriorChain, phi_eval: &[f64]) -> Result<Vec<f64>> {
    check_dim(chain.k(), phi_eval.len())?;
    Ok(chain.samples().map(|w| dot(w, phi_eval)).collect())
}

/// 1-based `⌈δN⌉`-th order statistic, clamped to `[1, N]`.
pub fn var_bound(returns: &[f64], delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if returns.is_empty() {
        return Err(invalid("VaR of an empty sample"));
    }
    let n = returns.len();
    let rank = ((delta * n as f64).ceil() as usize).clamp(1, n);
    let mut v = returns.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*kth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPolicy {
    pub name: String,
    pub phi: Vec<f64>,
    /// Ground-truth return, when a true reward is known.
    pub true_return: Option<f64>,
    /// Mean trajectory length of the policy's rollouts.
    pub length: Option<f64>,
}

impl EvalPolicy {
    pub fn new(name: impl Into<String>, phi: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            phi,
            true_return: None,
            length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub mean: f64,
    pub var: f64,
    pub true_return: Option<f64>,
    pub length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub statistic: PerformanceStatistic,
    pub delta: f64,
    pub n_samples: usize,
    /// Where the return samples came from (chain kind, seed, file).
    pub provenance: String,
    /// Sorted by VaR, best first.
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mean,var,true_return,length\n");
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.name, r.mean, r.var, opt(r.true_return), opt(r.length));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, name: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Mean and δ-VaR of every policy's return sample.
pub fn evaluate_sample_sets(
    samples: &[(EvalPolicy, Vec<f64>)],
    delta: f64,
    provenance: impl Into<String>,
) -> Result<EvalReport> {
    let mut rows = samples
        .iter()
        .map(|(p, r)| {
            Ok(EvalRow {
                name: p.name.clone(),
                mean: r.iter().sum::<f64>() / r.len().max(1) as f64,
                var: var_bound(r, delta)?,
                true_return: p.true_return,
                length: p.length,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps input order among equal bounds
    rows.sort_by(|a, b| b.var.total_cmp(&a.var));
    Ok(EvalReport {
        statistic: PerformanceStatistic::ExpectedReturn,
        delta,
        n_samples: samples.first().map_or(0, |s| s.1.len()),
        provenance: provenance.into(),
        rows,
    })
}

/// Ranks evaluation policies by their δ-VaR under the chain.
pub fn evaluate_policies(chain: &PosteriorChain, policies: &[EvalPolicy], delta: f64) -> Result<EvalReport> {
    let samples = policies
        .iter()
        .map(|p| Ok((p.clone(), posterior_returns(chain, &p.phi)?)))
        .collect::<Result<Vec<_>>>()?;
    let prov = format!("{:?} chain, seed {}, {} samples", chain.kind, chain.config.seed, chain.len());
    evaluate_sample_sets(&samples, delta, prov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankPosition {
    Best,
    Worst,
}

/// Adds a trajectory at a rank extreme (preferences against every existing
/// trajectory) and resamples the posterior.
pub fn rerank_with_new_demo<R: Rng + ?Sized>(
    data: &PreferenceDataset,
    new_traj: Trajectory,
    new_feature_sum: Vec<f64>,
    position: RankPosition,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<(PreferenceDataset, PosteriorChain)> {
    check_dim(data.k(), new_feature_sum.len())?;
    let m = data.len();
    let extra: Vec<(usize, usize)> = match position {
        RankPosition::Worst => (0..m).map(|i| (m, i)).collect(),
        RankPosition::Best => (0..m).map(|i| (i, m)).collect(),
    };
    let updated = data.with_appended(new_traj, new_feature_sum, extra)?;
    let chain = run_mcmc(&updated, cfg, rng)?;
    Ok((updated, chain))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainKind;

    fn chain(rows: &[Vec<f64>]) -> PosteriorChain {
        PosteriorChain::from_rows(ChainKind::Brex, rows, vec![0.0; rows.len()], McmcConfig::default()).unwrap()
    }

    #[test]
    fn returns_by_hand() {
        let c = chain(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        assert_eq!(posterior_returns(&c, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let r = posterior_returns(&c, &[2.0, 1.0]).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-15 && (r[1] - 2.0).abs() < 1e-15);
        let r3 = posterior_returns(&c, &[6.0, 3.0]).unwrap();
        assert!(r.iter().zip(&r3).all(|(a, b)| (3.0 * a - b).abs() < 1e-12));
        assert!(posterior_returns(&c, &[1.0]).is_err());
    }

    #[test]
    fn var_examples() {
        let v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(var_bound(&v, 0.05).unwrap(), 5.0);
        assert_eq!(var_bound(&[3.5; 17], 0.3).unwrap(), 3.5);
        assert_eq!(var_bound(&v, 1e-9).unwrap(), 1.0);
        assert!(var_bound(&v, 0.0).is_err());
        assert!(var_bound(&v, 1.0).is_err());
        assert!(var_bound(&[], 0.5).is_err());
    }

    #[test]
    fn dominance_and_identical_rows() {
        let c = chain(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let report = evaluate_policies(
            &c,
            &[
                EvalPolicy::new("low", vec![1.0, 1.0]),
                EvalPolicy::new("high", vec![2.0, 2.0]),
                EvalPolicy::new("high-copy", vec![2.0, 2.0]),
            ],
            0.05,
        )
        .unwrap();
        assert_eq!(report.rows[0].name, "high");
        assert_eq!(report.rows[2].name, "low");
        let (h, l) = (report.row("high").unwrap(), report.row("low").unwrap());
        assert!(h.mean > l.mean && h.var > l.var);
        let copy = report.row("high-copy").unwrap();
        assert_eq!((copy.mean, copy.var), (h.mean, h.var));
        assert!(report.to_csv().starts_with("name,mean,var"));
    }
}
