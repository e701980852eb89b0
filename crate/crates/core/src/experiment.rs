//! Gridworld ablations comparing Bayesian IRL and Bayesian REX, plus the
//! sampler throughput benchmark.
//!
//! Each world `i` draws everything from `base_seed + i`, so results do not
//! depend on the number of workers. Per world and demonstration count the
//! harness builds:
//!
//! * `m` uniform-random rollouts ranked by the true reward,
//! * `m` optimal demonstrations from the same start states,
//! * the optimal demonstrations auto-ranked above `m` fresh random rollouts,
//!
//! and scores the greedy policy of each posterior mean by its policy loss.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::birl::{run_mcmc_birl, BirlPosterior};
use crate::brex::{run_mcmc, BrexPosterior};
use crate::chain::{chain_mean, random_unit, McmcConfig, PosteriorChain};
use crate::demos::{
    all_pairs_from_returns, auto_rank_vs_random, dedup_demos, generate_optimal_demos,
    generate_ranked_random_demos, sample_ground_truth_reward, Demonstrator, PreferenceDataset,
    RankingSource, DEFAULT_HORIZON,
};
use crate::error::{invalid, Result};
use crate::mdp::{greedy_policy, policy_loss, value_iteration, GridWorld, RewardWeights, Trajectory, DEFAULT_TOL};
use crate::rng::{seeded, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Ranked random rollouts for B-REX, optimal demonstrations for B-IRL.
    C1,
    /// Ranked random rollouts for both.
    C2,
    /// Optimal demonstrations for both; B-REX auto-ranks them above random
    /// rollouts.
    C3,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c1" => Ok(Ablation::C1),
            "c2" => Ok(Ablation::C2),
            "c3" => Ok(Ablation::C3),
            _ => Err(invalid(format!("unknown experiment {s:?}; expected c1, c2 or c3"))),
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Ablation::C1 => "ranked suboptimal (B-REX) vs optimal (B-IRL) demonstrations",
            Ablation::C2 => "ranked suboptimal demonstrations for both",
            Ablation::C3 => "optimal demonstrations for both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_worlds: usize,
    pub demo_counts: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub gamma: f64,
    pub horizon: usize,
    /// Shared sampler settings; `n_steps` and `burn_in` apply to B-IRL.
    pub mcmc: McmcConfig,
    /// Proposals per B-REX chain, with a 10% burn-in. B-REX chains are cheap,
    /// and on auto-ranked data the likelihood is nearly flat over the feasible
    /// region, so short chains at σ = 0.005 do not cover it.
    pub brex_steps: usize,
    pub base_seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_worlds: 100,
            demo_counts: vec![2, 5, 10, 20, 30],
            width: 6,
            height: 6,
            k: 4,
            gamma: 0.9,
            horizon: DEFAULT_HORIZON,
            mcmc: McmcConfig::gridworld(0),
            brex_steps: DEFAULT_BREX_STEPS,
            base_seed: 0,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    /// Hash of every setting that affects results; the worker count does not.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&Self { workers: 0, ..self.clone() }).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Policy losses for one world and one demonstration count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldLosses {
    pub brex_ranked: f64,
    pub brex_auto: f64,
    pub birl_optimal: f64,
    pub birl_random: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldOutcome {
    pub world: usize,
    pub seed: u64,
    /// One entry per configured demonstration count, or the failure message.
    pub losses: std::result::Result<Vec<WorldLosses>, String>,
}

pub const DEFAULT_BREX_STEPS: usize = 100_000;

const STREAM_WORLD: u64 = 0;
const STREAM_REWARD: u64 = 1;

fn stream_tag(m: usize, slot: u64) -> u64 {
    100 + 10 * m as u64 + slot
}

/// Greedy policy of the posterior mean reward, scored against the truth.
pub fn mean_reward_loss(
    mdp: &GridWorld,
    chain: &PosteriorChain,
    true_reward: &RewardWeights,
) -> Result<f64> {
    let (mean, _) = chain_mean(chain, chain.config.burn_in, chain.config.thin)?;
    let q = value_iteration(mdp, &mean, DEFAULT_TOL)?;
    policy_loss(mdp, &greedy_policy(&q), true_reward)
}

fn starts_of(d: &PreferenceDataset) -> Vec<usize> {
    d.trajectories().iter().map(|t| t.steps[0].0).collect()
}

/// Runs every sampler needed by `needed` for one world.
pub fn run_world(cfg: &ExperimentConfig, world: usize, needed: &[Ablation]) -> Result<Vec<WorldLosses>> {
    let seed = cfg.base_seed.wrapping_add(world as u64);
    let mdp = GridWorld::random(cfg.width, cfg.height, cfg.k, cfg.gamma, &mut substream(seed, STREAM_WORLD))?;
    let truth = sample_ground_truth_reward(cfg.k, &mut substream(seed, STREAM_REWARD))?;
    let want = |a: Ablation| needed.contains(&a);
    let need_ranked_brex = want(Ablation::C1) || want(Ablation::C2);
    let need_birl_opt = want(Ablation::C1) || want(Ablation::C3);

    let mut out = Vec::with_capacity(cfg.demo_counts.len());
    for &m in &cfg.demo_counts {
        let mcmc = |slot: u64| McmcConfig {
            seed: seed ^ (stream_tag(m, slot) << 32),
            ..cfg.mcmc.clone()
        };
        let run_brex = |d: &PreferenceDataset, slot: u64| -> Result<f64> {
            let c = mcmc(slot).with_steps(cfg.brex_steps);
            let chain = run_mcmc(d, &c, &mut seeded(c.seed))?;
            mean_reward_loss(&mdp, &chain, &truth)
        };
        let run_birl = |trajs: &[Trajectory], slot: u64| -> Result<f64> {
            let c = mcmc(slot);
            let pairs = dedup_demos(trajs);
            let chain = run_mcmc_birl(&mdp, &pairs, &c, &mut seeded(c.seed))?;
            mean_reward_loss(&mdp, &chain, &truth)
        };

        let ranked = generate_ranked_random_demos(&mdp, &truth, m, cfg.horizon, &mut substream(seed, stream_tag(m, 0)))?;
        let optimal = generate_optimal_demos(
            &mdp,
            &truth,
            cfg.horizon,
            &starts_of(&ranked),
            Demonstrator::Greedy,
            &mut substream(seed, stream_tag(m, 1)),
        )?;
        let mut losses = WorldLosses {
            brex_ranked: f64::NAN,
            brex_auto: f64::NAN,
            birl_optimal: f64::NAN,
            birl_random: f64::NAN,
        };
        if need_ranked_brex {
            losses.brex_ranked = run_brex(&ranked, 2)?;
        }
        if need_birl_opt {
            losses.birl_optimal = run_birl(optimal.trajectories(), 3)?;
        }
        if want(Ablation::C2) {
            losses.birl_random = run_birl(ranked.trajectories(), 4)?;
        }
        if want(Ablation::C3) {
            let auto = auto_rank_vs_random(&optimal, &mdp, m, cfg.horizon, &mut substream(seed, stream_tag(m, 5)))?;
            losses.brex_auto = run_brex(&auto, 6)?;
        }
        out.push(losses);
    }
    Ok(out)
}

/// Runs all worlds on a pool of `cfg.workers` threads.
pub fn run_worlds(cfg: &ExperimentConfig, needed: &[Ablation]) -> Result<Vec<WorldOutcome>> {
    if cfg.demo_counts.iter().any(|&m| m < 2) {
        return Err(invalid("every demonstration count must be at least 2"));
    }
    cfg.mcmc.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(|| {
        (0..cfg.n_worlds)
            .into_par_iter()
            .map(|w| WorldOutcome {
                world: w,
                seed: cfg.base_seed.wrapping_add(w as u64),
                losses: run_world(cfg, w, needed).map_err(|e| e.to_string()),
            })
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub demo_count: usize,
    pub birl_loss: f64,
    pub brex_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ablation: Ablation,
    pub rows: Vec<TableRow>,
    pub n_worlds: usize,
    pub failures: usize,
    pub config_hash: String,
    pub base_seed: u64,
}

impl AblationTable {
    pub fn row(&self, demo_count: usize) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.demo_count == demo_count)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# format=brex-ablation/1");
        let _ = writeln!(out, "# experiment={:?}", self.ablation);
        let _ = writeln!(out, "# title={}", self.ablation.title());
        let _ = writeln!(out, "# base_seed={}", self.base_seed);
        let _ = writeln!(out, "# config_hash={}", self.config_hash);
        let _ = writeln!(out, "# worlds={} failures={}", self.n_worlds, self.failures);
        let _ = writeln!(out, "# initial_state_distribution=uniform");
        out.push_str("demo_count,birl_loss,brex_loss\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.demo_count, r.birl_loss, r.brex_loss);
        }
        out
    }
}

type Pick = fn(&WorldLosses) -> f64;

/// Averages per-world losses into one table per ablation. Failed worlds are
/// skipped and counted.
pub fn tabulate(cfg: &ExperimentConfig, outcomes: &[WorldOutcome], ablations: &[Ablation]) -> Vec<AblationTable> {
    let ok: Vec<&Vec<WorldLosses>> = outcomes.iter().filter_map(|o| o.losses.as_ref().ok()).collect();
    let failures = outcomes.len() - ok.len();
    let mean = |f: &dyn Fn(&WorldLosses) -> f64, idx: usize| -> f64 {
        ok.iter().map(|l| f(&l[idx])).sum::<f64>() / ok.len().max(1) as f64
    };
    ablations
        .iter()
        .map(|&a| AblationTable {
            ablation: a,
            rows: cfg
                .demo_counts
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let (birl, brex): (Pick, Pick) = match a {
                        Ablation::C1 => (|l| l.birl_optimal, |l| l.brex_ranked),
                        Ablation::C2 => (|l| l.birl_random, |l| l.brex_ranked),
                        Ablation::C3 => (|l| l.birl_optimal, |l| l.brex_auto),
                    };
                    TableRow {
                        demo_count: m,
                        birl_loss: mean(&birl, i),
                        brex_loss: mean(&brex, i),
                    }
                })
                .collect(),
            n_worlds: outcomes.len(),
            failures,
            config_hash: cfg.hash(),
            base_seed: cfg.base_seed,
        })
        .collect()
}

pub fn run_ablations(cfg: &ExperimentConfig, ablations: &[Ablation]) -> Result<Vec<AblationTable>> {
    let outcomes = run_worlds(cfg, ablations)?;
    Ok(tabulate(cfg, &outcomes, ablations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_trajectories: usize,
    pub k: usize,
    pub n_proposals: usize,
    pub beta: f64,
    pub step_sigma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        // 12 ranked demonstrations give 66 preference pairs.
        Self {
            n_trajectories: 12,
            k: 64,
            n_proposals: 100_000,
            beta: 1.0,
            step_sigma: 0.005,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub n_prefs: usize,
    pub seconds: f64,
    pub proposals_per_sec: f64,
    pub acceptance_rate: f64,
}

/// Synthetic dataset of `n` trajectories with Gaussian-ish latent feature
/// sums, totally ordered by a hidden reward.
pub fn synthetic_dataset(n: usize, k: usize, seed: u64) -> Result<PreferenceDataset> {
    let mut rng = seeded(seed);
    let hidden = random_unit(k, &mut rng);
    let sums: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0) * 10.0).collect())
        .collect();
    let returns: Vec<f64> = sums.iter().map(|f| crate::mdp::dot(f, &hidden)).collect();
    let trajs = (0..n).map(|i| Trajectory::new(vec![(i, 0)])).collect();
    PreferenceDataset::new(trajs, sums, all_pairs_from_returns(&returns), RankingSource::External)
}

/// Times a full Bayesian REX chain on a synthetic preference dataset.
pub fn bench_brex(cfg: &BenchConfig) -> Result<BenchReport> {
    let data = synthetic_dataset(cfg.n_trajectories, cfg.k, cfg.seed)?;
    let mcmc = McmcConfig {
        beta: cfg.beta,
        step_sigma: cfg.step_sigma,
        n_steps: cfg.n_proposals,
        burn_in: 0,
        thin: 1,
        seed: cfg.seed,
        nonneg_prior: true,
    };
    let start = Instant::now();
    let chain = run_mcmc(&data, &mcmc, &mut seeded(cfg.seed))?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        config: cfg.clone(),
        n_prefs: data.prefs().len(),
        seconds,
        proposals_per_sec: cfg.n_proposals as f64 / seconds.max(1e-12),
        acceptance_rate: chain.acceptance_rate(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalCost {
    pub brex_seconds_per_proposal: f64,
    pub birl_seconds_per_proposal: f64,
    pub birl_solver_calls: u64,
}

/// Per-proposal cost of both samplers on one random world with `m` demos.
pub fn proposal_cost(width: usize, height: usize, m: usize, n_proposals: usize, seed: u64) -> Result<ProposalCost> {
    let mdp = GridWorld::random(width, height, 4, 0.9, &mut substream(seed, STREAM_WORLD))?;
    let truth = sample_ground_truth_reward(4, &mut substream(seed, STREAM_REWARD))?;
    let ranked = generate_ranked_random_demos(&mdp, &truth, m, DEFAULT_HORIZON, &mut substream(seed, 2))?;
    let pairs = dedup_demos(ranked.trajectories());
    let mut rng = seeded(seed);
    let ws: Vec<Vec<f64>> = (0..n_proposals).map(|_| random_unit(4, &mut rng)).collect();

    let mut brex = BrexPosterior::new(&ranked, 50.0, false);
    let t = Instant::now();
    let mut sink = 0.0;
    for w in &ws {
        sink += brex.eval(w);
    }
    let brex_s = t.elapsed().as_secs_f64() / n_proposals as f64;

    let mut birl = BirlPosterior::new(&mdp, &pairs, 50.0)?;
    let t = Instant::now();
    for w in &ws {
        sink += birl.eval(w)?;
    }
    let birl_s = t.elapsed().as_secs_f64() / n_proposals as f64;
    std::hint::black_box(sink);
    Ok(ProposalCost {
        brex_seconds_per_proposal: brex_s,
        birl_seconds_per_proposal: birl_s,
        birl_solver_calls: birl.solver_calls,
    })
}
