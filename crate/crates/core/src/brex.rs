//! Bayesian reward extrapolation: posterior sampling over linear reward
//! weights from pairwise preferences, using cached trajectory feature sums.

use log::warn;
use rand::Rng;

use crate::chain::{metropolis, random_unit, ChainKind, McmcConfig, PosteriorChain, MAX_INIT_ATTEMPTS};
use crate::demos::PreferenceDataset;
use crate::error::{check_dim, invalid, Error, Result};
use crate::mdp::{dot, RewardWeights};

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-likelihood of the preferences under the pairwise ranking model with
/// returns `w · Φ_τ`:
/// `Σ_(i,j) [β wᵀΦ_j − logsumexp(β wᵀΦ_i, β wᵀΦ_j)]`.
pub fn ranking_log_likelihood(w: &RewardWeights, data: &PreferenceDataset, beta: f64) -> Result<f64> {
    check_dim(data.k(), w.len())?;
    let returns = scaled_returns(w.as_slice(), data, beta);
    Ok(log_likelihood_from_returns(&returns, data.prefs()))
}

fn scaled_returns(w: &[f64], data: &PreferenceDataset, beta: f64) -> Vec<f64> {
    data.feature_sums().iter().map(|f| beta * dot(w, f)).collect()
}

fn log_likelihood_from_returns(returns: &[f64], prefs: &[(usize, usize)]) -> f64 {
    // β r_j − logsumexp(β r_i, β r_j) = −softplus(β r_i − β r_j)
    -prefs.iter().map(|&(i, j)| softplus(returns[i] - returns[j])).sum::<f64>()
}

/// Non-negative return prior on the lowest-ranked demonstration: 0 when
/// `w · Φ_worst ≥ 0`, −∞ otherwise. With no identifiable worst
/// demonstration the prior is flat.
pub fn log_prior(w: &RewardWeights, data: &PreferenceDataset) -> Result<f64> {
    check_dim(data.k(), w.len())?;
    Ok(match data.lowest_ranked() {
        Some(worst) => prior_value(w.as_slice(), &data.feature_sums()[worst]),
        None => {
            warn!("no lowest-ranked demonstration; non-negative return prior is flat");
            0.0
        }
    })
}

#[inline]
fn prior_value(w: &[f64], worst: &[f64]) -> f64 {
    if dot(w, worst) >= 0.0 {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Unnormalized log posterior evaluator with preallocated scratch space.
pub struct BrexPosterior<'a> {
    data: &'a PreferenceDataset,
    beta: f64,
    worst: Option<&'a [f64]>,
    returns: Vec<f64>,
}

impl<'a> BrexPosterior<'a> {
    pub fn new(data: &'a PreferenceDataset, beta: f64, nonneg_prior: bool) -> Self {
        let worst = if nonneg_prior {
            let w = data.lowest_ranked();
            if w.is_none() {
                warn!("no lowest-ranked demonstration; non-negative return prior is flat");
            }
            w.map(|i| data.feature_sums()[i].as_slice())
        } else {
            None
        };
        Self {
            data,
            beta,
            worst,
            returns: vec![0.0; data.len()],
        }
    }

    pub fn log_prior(&self, w: &[f64]) -> f64 {
        self.worst.map_or(0.0, |f| prior_value(w, f))
    }

    pub fn eval(&mut self, w: &[f64]) -> f64 {
        let prior = self.log_prior(w);
        if prior == f64::NEG_INFINITY {
            return prior;
        }
        for (r, f) in self.returns.iter_mut().zip(self.data.feature_sums()) {
            *r = self.beta * dot(w, f);
        }
        prior + log_likelihood_from_returns(&self.returns, self.data.prefs())
    }
}

/// Samples the reward posterior with random-walk Metropolis-Hastings on the
/// unit sphere. The proposal is treated as symmetric.
pub fn run_mcmc<R: Rng + ?Sized>(data: &PreferenceDataset, cfg: &McmcConfig, rng: &mut R) -> Result<PosteriorChain> {
    if data.prefs().is_empty() {
        return Err(invalid("Bayesian REX needs at least one preference"));
    }
    cfg.validate()?;
    let k = data.k();
    let mut post = BrexPosterior::new(data, cfg.beta, cfg.nonneg_prior);
    let init = (0..MAX_INIT_ATTEMPTS)
        .map(|_| random_unit(k, rng))
        .find(|w| post.log_prior(w) == 0.0)
        .ok_or(Error::NoAdmissibleInit(MAX_INIT_ATTEMPTS))?;
    let chain = metropolis(ChainKind::Brex, init, cfg, rng, |w| post.eval(w))?;
    let rate = chain.acceptance_rate();
    if !(0.05..=0.95).contains(&rate) {
        warn!("acceptance rate {rate:.3} outside [0.05, 0.95]");
    }
    Ok(chain)
}
