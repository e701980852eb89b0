//! Browser bindings for three small interactive views: a two-feature
//! posterior against its exact density, a gridworld reward posterior, and
//! value-at-risk bounds for graded policies. Every call returns JSON.

use std::f64::consts::PI;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use brex_core::brex::{run_mcmc, BrexPosterior};
use brex_core::chain::chain_mean_raw;
use brex_core::demos::{generate_ranked_random_demos, sample_ground_truth_reward, RankingSource};
use brex_core::hcpe::{posterior_returns, var_bound};
use brex_core::mdp::{
    evaluate_policy_exact, feature_expectations_exact, greedy_policy, policy_loss, value_iteration, GridWorld,
    RewardWeights,
};
use brex_core::rng::{seeded, substream};
use brex_core::{McmcConfig, PosteriorChain, PreferenceDataset, Trajectory};

const BINS: usize = 64;
const GRID: usize = 4096;

fn to_js(r: brex_core::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

fn circle_data() -> brex_core::Result<PreferenceDataset> {
    let sums = vec![vec![1.0, -0.5], vec![0.5, 1.5], vec![2.0, 0.5], vec![-1.0, 2.0]];
    let prefs = vec![(0, 1), (0, 2), (1, 2), (3, 2)];
    let trajs = (0..sums.len()).map(|i| Trajectory::new(vec![(i, 0)])).collect();
    PreferenceDataset::new(trajs, sums, prefs, RankingSource::External)
}

fn circle_posterior_value(beta: f64, n_steps: usize, seed: u64) -> brex_core::Result<Value> {
    let data = circle_data()?;
    let cfg = McmcConfig {
        beta,
        step_sigma: 0.5,
        n_steps,
        burn_in: n_steps / 10,
        thin: 1,
        seed,
        nonneg_prior: true,
    };
    let chain = run_mcmc(&data, &cfg, &mut seeded(seed))?;
    let kept = chain.retained()?;

    let mut post = BrexPosterior::new(&data, beta, true);
    let density: Vec<f64> = (0..=GRID)
        .map(|i| {
            let t = -PI + 2.0 * PI * i as f64 / GRID as f64;
            post.eval(&[t.cos(), t.sin()]).exp()
        })
        .collect();
    let per_bin = GRID / BINS;
    let mut exact: Vec<f64> = (0..BINS)
        .map(|b| (b * per_bin..(b + 1) * per_bin).map(|i| density[i] + density[i + 1]).sum())
        .collect();
    let z: f64 = exact.iter().sum();
    exact.iter_mut().for_each(|p| *p /= z);

    let mut empirical = vec![0.0; BINS];
    for w in kept.samples() {
        let b = (((w[1].atan2(w[0]) + PI) / (2.0 * PI) * BINS as f64) as usize).min(BINS - 1);
        empirical[b] += 1.0 / kept.len() as f64;
    }
    let tv = 0.5 * exact.iter().zip(&empirical).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(json!({
        "bins": BINS,
        "exact": exact,
        "empirical": empirical,
        "tv": tv,
        "samples": kept.len(),
        "acceptance": chain.acceptance_rate(),
    }))
}

/// Histogram of sampled reward angles next to the exact posterior for a
/// fixed four-trajectory dataset with two features.
#[wasm_bindgen]
pub fn circle_posterior(beta: f64, n_steps: usize, seed: u64) -> Result<String, JsError> {
    to_js(circle_posterior_value(beta, n_steps, seed))
}

struct Fit {
    world: GridWorld,
    truth: RewardWeights,
    chain: PosteriorChain,
}

fn fit(seed: u64, n_demos: usize) -> brex_core::Result<Fit> {
    let world = GridWorld::random(6, 6, 4, 0.9, &mut substream(seed, 0))?;
    let truth = sample_ground_truth_reward(4, &mut substream(seed, 1))?;
    let data = generate_ranked_random_demos(&world, &truth, n_demos, 20, &mut substream(seed, 2))?;
    let chain = run_mcmc(&data, &McmcConfig::gridworld(seed), &mut substream(seed, 3))?;
    Ok(Fit { world, truth, chain })
}

fn gridworld_value(seed: u64, n_demos: usize) -> brex_core::Result<Value> {
    let Fit { world, truth, chain } = fit(seed, n_demos)?;
    let cfg = &chain.config;
    let mean = RewardWeights::unconstrained(chain_mean_raw(&chain, cfg.burn_in, cfg.thin)?)?;
    let policy = greedy_policy(&value_iteration(&world, &mean, 1e-8)?);
    let arrows: Vec<usize> = (0..world.n_states())
        .map(|s| policy.row(s).iter().position(|&p| p > 0.5).unwrap_or(0))
        .collect();
    let cells: Vec<usize> = (0..world.n_states())
        .map(|s| world.features(s).iter().position(|&f| f > 0.5).unwrap_or(0))
        .collect();
    Ok(json!({
        "width": world.width(),
        "height": world.height(),
        "cells": cells,
        "truth": truth.as_slice(),
        "mean": mean.as_slice(),
        "true_rewards": world.state_rewards(&truth)?,
        "learned_rewards": world.state_rewards(&mean)?,
        "actions": arrows,
        "loss": policy_loss(&world, &policy, &truth)?,
        "acceptance": chain.acceptance_rate(),
    }))
}

/// Fits a reward posterior to `n_demos` ranked random rollouts in a random
/// 6×6 world and reports the posterior mean, its greedy policy and that
/// policy's loss under the true reward.
#[wasm_bindgen]
pub fn gridworld_posterior(seed: u64, n_demos: usize) -> Result<String, JsError> {
    to_js(gridworld_value(seed, n_demos))
}

fn var_value(seed: u64, n_demos: usize, delta: f64) -> brex_core::Result<Value> {
    let Fit { world, truth, chain } = fit(seed, n_demos)?;
    let kept = chain.retained()?;
    let best = greedy_policy(&value_iteration(&world, &truth, 1e-8)?);
    let n = world.n_states() as f64;
    let mut policies = Vec::new();
    for eps in [0.0, 0.25, 0.5, 1.0] {
        let p = best.epsilon_mix(eps)?;
        let returns = posterior_returns(&kept, &feature_expectations_exact(&world, &p)?)?;
        let lo = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / 40.0).max(1e-12);
        let mut hist = vec![0usize; 40];
        for r in &returns {
            hist[(((r - lo) / width) as usize).min(39)] += 1;
        }
        let true_value = evaluate_policy_exact(&world, &p, &truth)?.iter().sum::<f64>() / n;
        policies.push(json!({
            "epsilon": eps,
            "mean": returns.iter().sum::<f64>() / returns.len() as f64,
            "var": var_bound(&returns, delta)?,
            "true_value": true_value,
            "lo": lo,
            "hi": hi,
            "hist": hist,
        }));
    }
    Ok(json!({ "delta": delta, "samples": kept.len(), "policies": policies }))
}

/// Posterior return distributions and δ-VaR bounds of the optimal policy
/// mixed with uniform random actions at several rates.
#[wasm_bindgen]
pub fn var_bounds(seed: u64, n_demos: usize, delta: f64) -> Result<String, JsError> {
    to_js(var_value(seed, n_demos, delta))
}
