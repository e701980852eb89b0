//! Ground-truth rewards, demonstrations and preference datasets.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::mdp::{
    boltzmann_policy, dot, greedy_policy, rollout, value_iteration, GridWorld, NormTag,
    RewardWeights, StochasticPolicy, Trajectory, DEFAULT_TOL,
};

/// Demonstration horizon used by the gridworld experiments.
pub const DEFAULT_HORIZON: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingSource {
    GroundTruth,
    AutoGenerated,
    External,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub world_hash: Option<String>,
    /// Generator settings, as flat key/value pairs.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, String>,
}

/// Trajectories, their cached feature sums and strict pairwise preferences.
/// A pair `(i, j)` means trajectory `i` is worse than trajectory `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    trajectories: Vec<Trajectory>,
    feature_sums: Vec<Vec<f64>>,
    prefs: Vec<(usize, usize)>,
    ranking_source: RankingSource,
    #[serde(default)]
    pub provenance: Provenance,
}

pub const DATASET_FORMAT: &str = "brex-dataset/1";

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    format: String,
    #[serde(flatten)]
    data: PreferenceDataset,
}

impl PreferenceDataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        feature_sums: Vec<Vec<f64>>,
        prefs: Vec<(usize, usize)>,
        ranking_source: RankingSource,
    ) -> Result<Self> {
        check_dim(trajectories.len(), feature_sums.len())?;
        if let Some(k) = feature_sums.first().map(Vec::len) {
            for f in &feature_sums {
                check_dim(k, f.len())?;
                if f.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("feature sums must be finite"));
                }
            }
        }
        let m = trajectories.len();
        let mut seen = HashSet::with_capacity(prefs.len());
        for &(i, j) in &prefs {
            if i >= m || j >= m {
                return Err(invalid(format!("preference ({i}, {j}) out of range for {m} trajectories")));
            }
            if i == j {
                return Err(invalid(format!("preference ({i}, {i}) compares a trajectory with itself")));
            }
            if seen.contains(&(j, i)) {
                return Err(invalid(format!("preferences ({i}, {j}) and ({j}, {i}) contradict")));
            }
            seen.insert((i, j));
        }
        Ok(Self {
            trajectories,
            feature_sums,
            prefs,
            ranking_source,
            provenance: Provenance::default(),
        })
    }

    /// Builds a dataset whose feature sums are the world's raw features.
    pub fn from_trajectories(
        mdp: &GridWorld,
        trajectories: Vec<Trajectory>,
        prefs: Vec<(usize, usize)>,
        ranking_source: RankingSource,
    ) -> Result<Self> {
        let sums = trajectories.iter().map(|t| t.feature_sum(mdp)).collect();
        let mut d = Self::new(trajectories, sums, prefs, ranking_source)?;
        d.provenance.world_hash = Some(mdp.content_hash());
        Ok(d)
    }

    /// Recomputes every feature sum with a per-state featurizer (for
    /// example a pretrained encoder).
    pub fn refeaturize<F>(&self, mut phi: F) -> Result<Self>
    where
        F: FnMut(usize) -> Vec<f64>,
    {
        let sums = self
            .trajectories
            .iter()
            .map(|t| {
                let mut acc: Option<Vec<f64>> = None;
                for s in t.states() {
                    let f = phi(s);
                    match acc.as_mut() {
                        None => acc = Some(f),
                        Some(a) => a.iter_mut().zip(&f).for_each(|(x, y)| *x += y),
                    }
                }
                acc.unwrap_or_default()
            })
            .collect();
        let mut d = Self::new(
            self.trajectories.clone(),
            sums,
            self.prefs.clone(),
            self.ranking_source,
        )?;
        d.provenance = self.provenance.clone();
        Ok(d)
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn feature_sums(&self) -> &[Vec<f64>] {
        &self.feature_sums
    }

    pub fn prefs(&self) -> &[(usize, usize)] {
        &self.prefs
    }

    pub fn ranking_source(&self) -> RankingSource {
        self.ranking_source
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Feature dimension, or 0 for an empty dataset.
    pub fn k(&self) -> usize {
        self.feature_sums.first().map(Vec::len).unwrap_or(0)
    }

    /// The lowest-ranked trajectory: one that appears in some preference and
    /// is never preferred over anything. When several qualify, the one with
    /// the smallest index is returned.
    pub fn lowest_ranked(&self) -> Option<usize> {
        let mut better = vec![false; self.len()];
        let mut mentioned = vec![false; self.len()];
        for &(i, j) in &self.prefs {
            better[j] = true;
            mentioned[i] = true;
            mentioned[j] = true;
        }
        (0..self.len()).find(|&i| mentioned[i] && !better[i])
    }

    /// Appends a trajectory with its feature sum and extra preferences.
    pub fn with_appended(
        &self,
        traj: Trajectory,
        feature_sum: Vec<f64>,
        extra_prefs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut trajs = self.trajectories.clone();
        let mut sums = self.feature_sums.clone();
        trajs.push(traj);
        sums.push(feature_sum);
        let mut prefs = self.prefs.clone();
        prefs.extend(extra_prefs);
        let mut d = Self::new(trajs, sums, prefs, self.ranking_source)?;
        d.provenance = self.provenance.clone();
        Ok(d)
    }

    /// Same trajectories with a different preference set.
    pub fn with_prefs(&self, prefs: Vec<(usize, usize)>) -> Result<Self> {
        let mut d = Self::new(
            self.trajectories.clone(),
            self.feature_sums.clone(),
            prefs,
            self.ranking_source,
        )?;
        d.provenance = self.provenance.clone();
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DatasetDoc {
            format: DATASET_FORMAT.into(),
            data: self.clone(),
        })
        .expect("dataset serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DatasetDoc = serde_json::from_str(s)?;
        if doc.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {:?}", doc.format)));
        }
        let d = doc.data;
        let mut checked = Self::new(d.trajectories, d.feature_sums, d.prefs, d.ranking_source)?;
        checked.provenance = d.provenance;
        Ok(checked)
    }
}

/// Uniform draw from the surface of the L1 unit ball: a uniform simplex
/// point (normalized exponentials) with independent random signs.
pub fn sample_ground_truth_reward<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<RewardWeights> {
    if k == 0 {
        return Err(invalid("reward dimension must be at least 1"));
    }
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    let w: Vec<f64> = e
        .into_iter()
        .map(|x| if rng.gen::<bool>() { x / total } else { -x / total })
        .collect();
    // Re-normalize away rounding so the L1 invariant holds tightly.
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    RewardWeights::new(w.into_iter().map(|x| x / l1).collect(), NormTag::L1)
}

/// All pairs implied by ranking `returns` ascending; ties go to the lower
/// index being worse.
pub fn all_pairs_from_returns(returns: &[f64]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..returns.len()).collect();
    order.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]).then(a.cmp(&b)));
    let mut prefs = Vec::with_capacity(order.len() * order.len().saturating_sub(1) / 2);
    for (x, &i) in order.iter().enumerate() {
        for &j in &order[x + 1..] {
            prefs.push((i, j));
        }
    }
    prefs
}

/// `m` uniform-random rollouts of length `horizon` from uniform start
/// states, ranked by ground-truth return and expanded to all pairs.
pub fn generate_ranked_random_demos<R: Rng + ?Sized>(
    mdp: &GridWorld,
    true_reward: &RewardWeights,
    m: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<PreferenceDataset> {
    if m < 2 {
        return Err(invalid("need at least two demonstrations to rank"));
    }
    check_dim(mdp.k(), true_reward.len())?;
    let uniform = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let trajs = (0..m)
        .map(|_| {
            let s0 = rng.gen_range(0..mdp.n_states());
            rollout(mdp, &uniform, s0, horizon, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = trajs
        .iter()
        .map(|t| dot(&t.feature_sum(mdp), true_reward.as_slice()))
        .collect();
    let prefs = all_pairs_from_returns(&returns);
    PreferenceDataset::from_trajectories(mdp, trajs, prefs, RankingSource::GroundTruth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Demonstrator {
    Greedy,
    Boltzmann(f64),
}

/// Demonstrations from the optimal policy of `true_reward`, one per start.
/// With the greedy demonstrator the result does not depend on `rng`.
pub fn generate_optimal_demos<R: Rng + ?Sized>(
    mdp: &GridWorld,
    true_reward: &RewardWeights,
    horizon: usize,
    starts: &[usize],
    demonstrator: Demonstrator,
    rng: &mut R,
) -> Result<PreferenceDataset> {
    let q = value_iteration(mdp, true_reward, DEFAULT_TOL)?;
    let policy = match demonstrator {
        Demonstrator::Greedy => greedy_policy(&q),
        Demonstrator::Boltzmann(beta) => boltzmann_policy(&q, beta)?,
    };
    let trajs = starts
        .iter()
        .map(|&s| rollout(mdp, &policy, s, horizon, rng))
        .collect::<Result<Vec<_>>>()?;
    PreferenceDataset::from_trajectories(mdp, trajs, Vec::new(), RankingSource::GroundTruth)
}

/// Appends `n_random` uniform-random rollouts, each labeled worse than every
/// existing demonstration.
pub fn auto_rank_vs_random<R: Rng + ?Sized>(
    optimal: &PreferenceDataset,
    mdp: &GridWorld,
    n_random: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<PreferenceDataset> {
    if optimal.is_empty() {
        return Err(invalid("need at least one demonstration to auto-rank against"));
    }
    if n_random == 0 {
        return Ok(optimal.clone());
    }
    let m = optimal.len();
    let uniform = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let mut trajs = optimal.trajectories.clone();
    let mut sums = optimal.feature_sums.clone();
    let mut prefs = optimal.prefs.clone();
    for r in 0..n_random {
        let s0 = rng.gen_range(0..mdp.n_states());
        let t = rollout(mdp, &uniform, s0, horizon, rng)?;
        sums.push(t.feature_sum(mdp));
        trajs.push(t);
        prefs.extend((0..m).map(|o| (m + r, o)));
    }
    let mut d = PreferenceDataset::new(trajs, sums, prefs, RankingSource::AutoGenerated)?;
    d.provenance = optimal.provenance.clone();
    Ok(d)
}

/// Distinct `(state, action)` pairs in order of first occurrence.
pub fn dedup_state_actions(traj: &Trajectory) -> Vec<(usize, usize)> {
    dedup_demos(std::slice::from_ref(traj))
}

/// Distinct `(state, action)` pairs across several demonstrations.
pub fn dedup_demos(trajs: &[Trajectory]) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    trajs
        .iter()
        .flat_map(|t| t.steps.iter().copied())
        .filter(|p| seen.insert(*p))
        .collect()
}
