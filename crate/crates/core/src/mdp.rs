//! Finite deterministic MDPs with linear state rewards.
//!
//! A [`GridWorld`] holds a deterministic transition table, per-state binary
//! feature rows and a discount. Rewards are linear in the features,
//! `R(s) = w · φ(s)`, and are received on arrival in a state, so
//! `Q(s, a) = R(s) + γ V(next(s, a))`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, invalid, Error, Result};

/// Cardinal moves, in action-index order.
pub const CARDINAL_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

/// Default solver tolerance for value iteration and policy evaluation.
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    width: usize,
    height: usize,
    gamma: f64,
    k: usize,
    n_actions: usize,
    features: Vec<f64>,
    next: Vec<usize>,
    custom_transitions: bool,
}

/// On-disk form of a world. Grid worlds omit `transitions`; hand-built
/// worlds carry an explicit table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridWorldDoc {
    pub format: String,
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transitions: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const WORLD_FORMAT: &str = "brex-world/1";

fn validate_features(rows: &[Vec<f64>]) -> Result<usize> {
    let k = rows.first().map(|r| r.len()).unwrap_or(0);
    if k == 0 {
        return Err(invalid("feature rows must be non-empty"));
    }
    for (s, row) in rows.iter().enumerate() {
        if row.len() != k {
            return Err(invalid(format!(
                "state {s} has {} features, expected {k}",
                row.len()
            )));
        }
        if row.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(invalid(format!("state {s} has a non-binary feature")));
        }
    }
    Ok(k)
}

fn validate_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(invalid(format!("gamma must lie in [0, 1), got {gamma}")))
    }
}

impl GridWorld {
    /// A `width × height` grid with the four cardinal moves. Moving off the
    /// grid leaves the agent in place. States are numbered row-major.
    pub fn new(width: usize, height: usize, features: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        check_dim(width * height, features.len())?;
        let k = validate_features(&features)?;
        validate_gamma(gamma)?;
        let n = width * height;
        let mut next = Vec::with_capacity(n * 4);
        for s in 0..n {
            let (r, c) = (s / width, s % width);
            let up = if r > 0 { s - width } else { s };
            let down = if r + 1 < height { s + width } else { s };
            let left = if c > 0 { s - 1 } else { s };
            let right = if c + 1 < width { s + 1 } else { s };
            next.extend_from_slice(&[up, down, left, right]);
        }
        Ok(Self {
            width,
            height,
            gamma,
            k,
            n_actions: 4,
            features: features.concat(),
            next,
            custom_transitions: false,
        })
    }

    /// Hand-built deterministic world: `transitions[s][a]` is the successor.
    /// Laid out as a `n × 1` strip.
    pub fn from_transitions(
        transitions: Vec<Vec<usize>>,
        features: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        let n = transitions.len();
        if n == 0 {
            return Err(invalid("world needs at least one state"));
        }
        check_dim(n, features.len())?;
        let k = validate_features(&features)?;
        validate_gamma(gamma)?;
        let n_actions = transitions[0].len();
        if n_actions == 0 {
            return Err(invalid("world needs at least one action"));
        }
        for (s, row) in transitions.iter().enumerate() {
            if row.len() != n_actions {
                return Err(invalid(format!("state {s} has {} actions", row.len())));
            }
            if let Some(&bad) = row.iter().find(|&&t| t >= n) {
                return Err(invalid(format!("state {s} transitions to unknown state {bad}")));
            }
        }
        Ok(Self {
            width: n,
            height: 1,
            gamma,
            k,
            n_actions,
            features: features.concat(),
            next: transitions.concat(),
            custom_transitions: true,
        })
    }

    /// Random grid where every cell carries exactly one of `k` features,
    /// chosen uniformly.
    pub fn random<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        k: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(invalid("feature count must be positive"));
        }
        let features = (0..width * height)
            .map(|_| {
                let mut row = vec![0.0; k];
                row[rng.gen_range(0..k)] = 1.0;
                row
            })
            .collect();
        Self::new(width, height, features, gamma)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Feature dimension.
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn features(&self, s: usize) -> &[f64] {
        &self.features[s * self.k..(s + 1) * self.k]
    }

    #[inline]
    pub fn next_state(&self, s: usize, a: usize) -> usize {
        self.next[s * self.n_actions + a]
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        validate_gamma(gamma)?;
        Ok(Self { gamma, ..self.clone() })
    }

    /// Raw state vector used by the encoder: one-hot position followed by
    /// the cell's features.
    pub fn state_vector(&self, s: usize) -> Vec<f64> {
        let n = self.n_states();
        let mut v = vec![0.0; n + self.k];
        v[s] = 1.0;
        v[n..].copy_from_slice(self.features(s));
        v
    }

    pub fn state_vector_len(&self) -> usize {
        self.n_states() + self.k
    }

    /// Per-state reward `w · φ(s)`.
    pub fn state_rewards(&self, reward: &RewardWeights) -> Result<Vec<f64>> {
        check_dim(self.k, reward.len())?;
        Ok((0..self.n_states())
            .map(|s| dot(self.features(s), reward.as_slice()))
            .collect())
    }

    pub fn to_doc(&self) -> GridWorldDoc {
        GridWorldDoc {
            format: WORLD_FORMAT.to_string(),
            width: self.width,
            height: self.height,
            gamma: self.gamma,
            features: self.features.chunks(self.k).map(<[f64]>::to_vec).collect(),
            transitions: self
                .custom_transitions
                .then(|| self.next.chunks(self.n_actions).map(<[usize]>::to_vec).collect()),
            seed: None,
        }
    }

    pub fn from_doc(doc: GridWorldDoc) -> Result<Self> {
        if doc.format != WORLD_FORMAT {
            return Err(Error::Format(format!("unknown world format {:?}", doc.format)));
        }
        match doc.transitions {
            Some(t) => {
                let w = Self::from_transitions(t, doc.features, doc.gamma)?;
                if w.width != doc.width || w.height != doc.height {
                    return Err(Error::Format("width/height disagree with transitions".into()));
                }
                Ok(w)
            }
            None => Self::new(doc.width, doc.height, doc.features, doc.gamma),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("world serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(s)?)
    }

    /// Content hash of the world, used as dataset provenance.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(self.gamma.to_le_bytes());
        for x in &self.features {
            h.update(x.to_le_bytes());
        }
        for t in &self.next {
            h.update((*t as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormTag {
    L1,
    L2,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    w: Vec<f64>,
    norm: NormTag,
}

const NORM_TOL: f64 = 1e-9;

impl RewardWeights {
    pub fn new(w: Vec<f64>, norm: NormTag) -> Result<Self> {
        if w.is_empty() {
            return Err(invalid("reward weights must be non-empty"));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(invalid("reward weights must be finite"));
        }
        let n = match norm {
            NormTag::L1 => w.iter().map(|x| x.abs()).sum::<f64>(),
            NormTag::L2 => l2_norm(&w),
            NormTag::Unconstrained => 1.0,
        };
        if (n - 1.0).abs() > NORM_TOL {
            return Err(invalid(format!("weights tagged {norm:?} have norm {n}")));
        }
        Ok(Self { w, norm })
    }

    pub fn unconstrained(w: Vec<f64>) -> Result<Self> {
        Self::new(w, NormTag::Unconstrained)
    }

    /// Projects `w` onto the L2 unit sphere.
    pub fn normalized_l2(w: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&w);
        if !(n > 0.0 && n.is_finite()) {
            return Err(invalid("cannot normalize a zero or non-finite vector"));
        }
        Self::new(w.into_iter().map(|x| x / n).collect(), NormTag::L2)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn norm_tag(&self) -> NormTag {
        self.norm
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_actions: usize,
    q: Vec<f64>,
    v: Vec<f64>,
    /// Sweeps performed by the solver that produced this table.
    pub iterations: usize,
}

impl QTable {
    #[inline]
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn n_states(&self) -> usize {
        self.v.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// Solves for `Q*` by synchronous value iteration. The returned table has a
/// sup-norm Bellman residual of at most `tol`.
pub fn value_iteration(mdp: &GridWorld, reward: &RewardWeights, tol: f64) -> Result<QTable> {
    value_iteration_from(mdp, reward, tol, None)
}

/// Value iteration started from a previous solution's state values.
pub fn value_iteration_from(
    mdp: &GridWorld,
    reward: &RewardWeights,
    tol: f64,
    warm: Option<&QTable>,
) -> Result<QTable> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    let r = mdp.state_rewards(reward)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let mut v = match warm {
        Some(q) if q.n_states() == n => q.v.clone(),
        _ => vec![0.0; n],
    };
    let mut v_new = vec![0.0; n];
    // Stopping at `tol·(1-γ)` puts the values within `tol` of the fixed point
    // and bounds the Bellman residual of the returned Q by `γ²·tol`.
    let stop = tol * (1.0 - gamma);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta = 0.0f64;
        for s in 0..n {
            let base = s * na;
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let x = v[mdp.next[base + a]];
                if x > best {
                    best = x;
                }
            }
            let nv = r[s] + gamma * best;
            delta = delta.max((nv - v[s]).abs());
            v_new[s] = nv;
        }
        std::mem::swap(&mut v, &mut v_new);
        if delta <= stop || gamma == 0.0 {
            break;
        }
        if !delta.is_finite() {
            return Err(invalid("value iteration diverged"));
        }
    }
    let mut q = vec![0.0; n * na];
    let mut vq = vec![0.0; n];
    for s in 0..n {
        let mut best = f64::NEG_INFINITY;
        for a in 0..na {
            let x = r[s] + gamma * v[mdp.next[s * na + a]];
            q[s * na + a] = x;
            best = best.max(x);
        }
        vq[s] = best;
    }
    Ok(QTable {
        n_actions: na,
        q,
        v: vq,
        iterations,
    })
}

/// `max |T Q − Q|` for the optimality operator.
pub fn bellman_residual(mdp: &GridWorld, reward: &RewardWeights, q: &QTable) -> Result<f64> {
    let r = mdp.state_rewards(reward)?;
    let mut res = 0.0f64;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let s2 = mdp.next_state(s, a);
            let best = q.row(s2).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            res = res.max((r[s] + mdp.gamma() * best - q.q(s, a)).abs());
        }
    }
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let na = rows.first().map(|r| r.len()).unwrap_or(0);
        if na == 0 {
            return Err(invalid("policy needs at least one state and action"));
        }
        for (s, row) in rows.iter().enumerate() {
            check_dim(na, row.len())?;
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(invalid(format!("state {s} has a negative probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("state {s} probabilities sum to {sum}")));
            }
        }
        Ok(Self {
            n_actions: na,
            probs: rows.concat(),
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(invalid(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_actions, probs })
    }

    /// Mixture `(1-ε)·self + ε·uniform`.
    pub fn epsilon_mix(&self, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(invalid(format!("epsilon must lie in [0, 1], got {eps}")));
        }
        let u = eps / self.n_actions as f64;
        Ok(Self {
            n_actions: self.n_actions,
            probs: self.probs.iter().map(|p| (1.0 - eps) * p + u).collect(),
        })
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Samples an action with a single uniform draw. Zero-probability actions
    /// are never returned.
    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let row = self.row(s);
        let mut cum = 0.0;
        let mut last = 0;
        for (a, &p) in row.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            cum += p;
            last = a;
            if u < cum {
                return a;
            }
        }
        last
    }

    fn check(&self, mdp: &GridWorld) -> Result<()> {
        check_dim(mdp.n_states(), self.n_states())?;
        check_dim(mdp.n_actions(), self.n_actions)
    }
}

/// Softmax policy `π(a|s) ∝ exp(β Q(s,a))`, evaluated with the row maximum
/// subtracted.
pub fn boltzmann_policy(q: &QTable, beta: f64) -> Result<StochasticPolicy> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(invalid(format!("beta must be finite and non-negative, got {beta}")));
    }
    let na = q.n_actions();
    let mut probs = Vec::with_capacity(q.n_states() * na);
    for s in 0..q.n_states() {
        let row = q.row(s);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (beta * (x - m)).exp()).collect();
        let z: f64 = e.iter().sum();
        probs.extend(e.into_iter().map(|x| x / z));
    }
    Ok(StochasticPolicy { n_actions: na, probs })
}

/// Deterministic argmax policy; ties go to the lowest action index.
pub fn greedy_policy(q: &QTable) -> StochasticPolicy {
    let actions: Vec<usize> = (0..q.n_states()).map(|s| argmax(q.row(s))).collect();
    StochasticPolicy::deterministic(&actions, q.n_actions()).expect("argmax is in range")
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Exact `V^π` by iterating the policy's Bellman operator to `DEFAULT_TOL`.
pub fn evaluate_policy_exact(
    mdp: &GridWorld,
    policy: &StochasticPolicy,
    reward: &RewardWeights,
) -> Result<Vec<f64>> {
    policy.check(mdp)?;
    let r = mdp.state_rewards(reward)?;
    let per_state: Vec<Vec<f64>> = r.into_iter().map(|x| vec![x]).collect();
    Ok(discounted_fixed_point(mdp, policy, &per_state, DEFAULT_TOL)
        .into_iter()
        .map(|v| v[0])
        .collect())
}

/// Solves `X = C + γ P_π X` for a per-state vector-valued `C`.
fn discounted_fixed_point(
    mdp: &GridWorld,
    policy: &StochasticPolicy,
    c: &[Vec<f64>],
    tol: f64,
) -> Vec<Vec<f64>> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let d = c.first().map(|r| r.len()).unwrap_or(0);
    let gamma = mdp.gamma();
    let stop = tol * (1.0 - gamma);
    let mut x = vec![0.0; n * d];
    let mut x_new = vec![0.0; n * d];
    loop {
        let mut delta = 0.0f64;
        for s in 0..n {
            let row = policy.row(s);
            for j in 0..d {
                let mut acc = 0.0;
                for (a, &p) in row.iter().enumerate().take(na) {
                    if p != 0.0 {
                        acc += p * x[mdp.next_state(s, a) * d + j];
                    }
                }
                let nv = c[s][j] + gamma * acc;
                delta = delta.max((nv - x[s * d + j]).abs());
                x_new[s * d + j] = nv;
            }
        }
        std::mem::swap(&mut x, &mut x_new);
        if delta <= stop || gamma == 0.0 {
            break;
        }
    }
    x.chunks(d.max(1)).map(<[f64]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|&(s, _)| s)
    }

    /// Undiscounted feature sum `Σ_{s∈τ} φ(s)`.
    pub fn feature_sum(&self, mdp: &GridWorld) -> Vec<f64> {
        let mut acc = vec![0.0; mdp.k()];
        for s in self.states() {
            for (a, f) in acc.iter_mut().zip(mdp.features(s)) {
                *a += f;
            }
        }
        acc
    }

    /// True iff every step follows the world's transition map.
    pub fn is_consistent(&self, mdp: &GridWorld) -> bool {
        self.steps
            .windows(2)
            .all(|w| mdp.next_state(w[0].0, w[0].1) == w[1].0)
    }
}

/// Samples a trajectory visiting exactly `length` states, starting at
/// `start`. Each step consumes one uniform draw.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &GridWorld,
    policy: &StochasticPolicy,
    start: usize,
    length: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    policy.check(mdp)?;
    if start >= mdp.n_states() {
        return Err(invalid(format!("start state {start} out of range")));
    }
    if length == 0 {
        return Err(invalid("rollout length must be at least 1"));
    }
    let mut steps = Vec::with_capacity(length);
    let mut s = start;
    for _ in 0..length {
        let a = policy.sample(s, rng);
        steps.push((s, a));
        s = mdp.next_state(s, a);
    }
    Ok(Trajectory { steps })
}

/// Initial-state distribution for Monte Carlo rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartDist {
    Fixed(usize),
    Uniform,
}

impl StartDist {
    pub fn sample<R: Rng + ?Sized>(&self, n_states: usize, rng: &mut R) -> usize {
        match *self {
            StartDist::Fixed(s) => s,
            StartDist::Uniform => rng.gen_range(0..n_states),
        }
    }
}

/// Undiscounted finite-horizon feature expectations estimated from `c`
/// rollouts: `(1/C) Σ_i Σ_{s∈τ_i} φ(s)`.
pub fn feature_expectations_mc<R: Rng + ?Sized>(
    mdp: &GridWorld,
    policy: &StochasticPolicy,
    start: StartDist,
    length: usize,
    c: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if c == 0 {
        return Err(invalid("rollout count must be at least 1"));
    }
    let mut acc = vec![0.0; mdp.k()];
    for _ in 0..c {
        let s0 = start.sample(mdp.n_states(), rng);
        let t = rollout(mdp, policy, s0, length, rng)?;
        for (a, f) in acc.iter_mut().zip(t.feature_sum(mdp)) {
            *a += f;
        }
    }
    Ok(acc.into_iter().map(|x| x / c as f64).collect())
}

/// Discounted expected feature counts under a uniform start distribution,
/// so that `w · Φ_π` is the mean over states of `V^π_w`.
pub fn feature_expectations_exact(mdp: &GridWorld, policy: &StochasticPolicy) -> Result<Vec<f64>> {
    policy.check(mdp)?;
    let c: Vec<Vec<f64>> = (0..mdp.n_states()).map(|s| mdp.features(s).to_vec()).collect();
    let per_state = discounted_fixed_point(mdp, policy, &c, DEFAULT_TOL);
    let n = mdp.n_states() as f64;
    let mut mean = vec![0.0; mdp.k()];
    for row in &per_state {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    Ok(mean)
}

/// Mean over states (uniform start distribution) of `V*_{R*}(s) − V^π_{R*}(s)`.
pub fn policy_loss(
    mdp: &GridWorld,
    learned: &StochasticPolicy,
    true_reward: &RewardWeights,
) -> Result<f64> {
    let opt = value_iteration(mdp, true_reward, DEFAULT_TOL)?;
    let v = evaluate_policy_exact(mdp, learned, true_reward)?;
    let n = mdp.n_states() as f64;
    Ok(opt.v().iter().zip(&v).map(|(a, b)| a - b).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn one(x: f64) -> RewardWeights {
        RewardWeights::unconstrained(vec![x]).unwrap()
    }

    fn chain() -> GridWorld {
        // s0 -> s1, s1 absorbing
        GridWorld::from_transitions(vec![vec![1], vec![1]], vec![vec![0.0], vec![1.0]], 0.5).unwrap()
    }

    /// s0 has "stay" and "go"; s1 has "stay" and "back".
    fn two_action_chain(gamma: f64) -> GridWorld {
        GridWorld::from_transitions(
            vec![vec![0, 1], vec![1, 0]],
            vec![vec![0.0], vec![1.0]],
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn geometric_series_single_state() {
        let w = GridWorld::from_transitions(vec![vec![0]], vec![vec![1.0]], 0.9).unwrap();
        let q = value_iteration(&w, &one(1.0), 1e-10).unwrap();
        assert!((q.v()[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn absorbing_chain_by_hand() {
        let q = value_iteration(&chain(), &one(1.0), 1e-10).unwrap();
        assert!((q.v()[1] - 2.0).abs() < 1e-9);
        assert!((q.v()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_reward_zero_values() {
        let mut rng = seeded(3);
        let w = GridWorld::random(4, 3, 3, 0.9, &mut rng).unwrap();
        let q = value_iteration(&w, &RewardWeights::unconstrained(vec![0.0; 3]).unwrap(), 1e-8)
            .unwrap();
        assert!(q.q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_non_finite_reward() {
        assert!(RewardWeights::unconstrained(vec![f64::NAN]).is_err());
        assert!(value_iteration(&chain(), &one(1.0), 0.0).is_err());
    }

    #[test]
    fn boltzmann_examples() {
        let q = QTable {
            n_actions: 4,
            q: vec![1.0, 0.0, 0.0, 0.0],
            v: vec![1.0],
            iterations: 0,
        };
        let p = boltzmann_policy(&q, 0.0).unwrap();
        assert!(p.row(0).iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = boltzmann_policy(&q, 3f64.ln()).unwrap();
        let want = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in p.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = boltzmann_policy(&q, 1e4).unwrap();
        assert!((p.row(0)[0] - 1.0).abs() < 1e-12);
        assert!(boltzmann_policy(&q, -1.0).is_err());
    }

    #[test]
    fn greedy_policy_matches_optimal_values() {
        let mut rng = seeded(11);
        let w = GridWorld::random(5, 5, 4, 0.9, &mut rng).unwrap();
        let r = RewardWeights::unconstrained(vec![0.3, -0.2, 0.4, -0.1]).unwrap();
        let q = value_iteration(&w, &r, DEFAULT_TOL).unwrap();
        let v = evaluate_policy_exact(&w, &greedy_policy(&q), &r).unwrap();
        for (a, b) in v.iter().zip(q.v()) {
            assert!((a - b).abs() <= 2.0 * DEFAULT_TOL, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_policy_two_state_linear_system() {
        // V0 = 0 + γ(½V0 + ½V1), V1 = 1 + γ(½V1 + ½V0) with γ = 0.5:
        // V0 = (1/4)V0 + (1/4)V1  → 3V0 = V1
        // V1 = 1 + (1/4)V1 + (1/4)V0 → (3/4)·3V0 − (1/4)V0 = 1 → V0 = 1/2, V1 = 3/2
        let w = two_action_chain(0.5);
        let v = evaluate_policy_exact(&w, &StochasticPolicy::uniform(2, 2), &one(1.0)).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-8);
        assert!((v[1] - 1.5).abs() < 1e-8);
        let zero = evaluate_policy_exact(&w, &StochasticPolicy::uniform(2, 2), &one(0.0)).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn worst_policy_loss_by_hand() {
        // Optimal: go to s1 and stay. V*(1) = 1/(1-γ) = 2, V*(0) = γ·2 = 1.
        // Worst: stay at s0 forever, leave s1 immediately.
        // Vw(0) = 0, Vw(1) = 1 + γ·0 = 1. Loss = ((1-0) + (2-1))/2 = 1.
        let w = two_action_chain(0.5);
        let worst = StochasticPolicy::deterministic(&[0, 1], 2).unwrap();
        let loss = policy_loss(&w, &worst, &one(1.0)).unwrap();
        assert!((loss - 1.0).abs() < 1e-7);
        let q = value_iteration(&w, &one(1.0), DEFAULT_TOL).unwrap();
        assert!(policy_loss(&w, &greedy_policy(&q), &one(1.0)).unwrap().abs() < 2e-8);
        assert_eq!(policy_loss(&w, &worst, &one(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn rollout_examples() {
        let w = two_action_chain(0.5);
        let stay = StochasticPolicy::deterministic(&[0, 0], 2).unwrap();
        let t = rollout(&w, &stay, 1, 4, &mut seeded(1)).unwrap();
        assert_eq!(t.steps, vec![(1, 0); 4]);
        assert!(rollout(&w, &stay, 2, 4, &mut seeded(1)).is_err());
        assert!(rollout(&w, &stay, 0, 0, &mut seeded(1)).is_err());

        let mut rng = seeded(9);
        let g = GridWorld::random(4, 4, 2, 0.9, &mut rng).unwrap();
        let q = value_iteration(&g, &RewardWeights::unconstrained(vec![1.0, -1.0]).unwrap(), 1e-8)
            .unwrap();
        let greedy = greedy_policy(&q);
        let a = rollout(&g, &greedy, 5, 12, &mut seeded(1)).unwrap();
        let b = rollout(&g, &greedy, 5, 12, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_consistent(&g));

        let uni = StochasticPolicy::uniform(16, 4);
        let a = rollout(&g, &uni, 0, 30, &mut seeded(77)).unwrap();
        let b = rollout(&g, &uni, 0, 30, &mut seeded(77)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_consistent(&g));
    }

    #[test]
    fn mc_feature_expectations_deterministic_cases() {
        let w = GridWorld::from_transitions(
            vec![vec![0, 1], vec![1, 0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            0.9,
        )
        .unwrap();
        let stay = StochasticPolicy::deterministic(&[0, 0], 2).unwrap();
        let f = feature_expectations_mc(&w, &stay, StartDist::Fixed(0), 4, 10, &mut seeded(0)).unwrap();
        assert_eq!(f, vec![4.0, 0.0]);

        let uni = StochasticPolicy::uniform(2, 2);
        let single = feature_expectations_mc(&w, &uni, StartDist::Fixed(0), 7, 1, &mut seeded(5)).unwrap();
        let t = rollout(&w, &uni, 0, 7, &mut seeded(5)).unwrap();
        assert_eq!(single, t.feature_sum(&w));
        assert!(feature_expectations_mc(&w, &uni, StartDist::Fixed(0), 7, 0, &mut seeded(5)).is_err());
    }

    #[test]
    fn exact_feature_expectations_two_state_by_hand() {
        // Staying in place from each state: Φ = ½(φ(0) + φ(1))/(1-γ).
        let w = GridWorld::from_transitions(
            vec![vec![0, 1], vec![1, 0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            0.9,
        )
        .unwrap();
        let stay = StochasticPolicy::deterministic(&[0, 0], 2).unwrap();
        let f = feature_expectations_exact(&w, &stay).unwrap();
        assert!((f[0] - 5.0).abs() < 1e-7 && (f[1] - 5.0).abs() < 1e-7);
        // Always switching: from s0 the visits alternate 0,1,0,1,…
        // feature 0 from s0: 1/(1-γ²); from s1: γ/(1-γ²).
        let switch = StochasticPolicy::deterministic(&[1, 1], 2).unwrap();
        let f = feature_expectations_exact(&w, &switch).unwrap();
        let want = 0.5 * (1.0 + 0.9) / (1.0 - 0.81);
        assert!((f[0] - want).abs() < 1e-7 && (f[1] - want).abs() < 1e-7);
    }

    #[test]
    fn world_json_round_trip() {
        let mut rng = seeded(4);
        let g = GridWorld::random(6, 6, 4, 0.9, &mut rng).unwrap();
        assert_eq!(GridWorld::from_json(&g.to_json()).unwrap(), g);
        let c = chain();
        assert_eq!(GridWorld::from_json(&c.to_json()).unwrap(), c);
        assert!(GridWorld::from_json(r#"{"format":"x","width":1,"height":1,"gamma":0.9,"features":[[1]]}"#).is_err());
    }

    #[test]
    fn rejects_bad_worlds() {
        assert!(GridWorld::new(2, 1, vec![vec![0.5], vec![1.0]], 0.9).is_err());
        assert!(GridWorld::new(2, 1, vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(GridWorld::new(2, 1, vec![vec![0.0], vec![1.0, 0.0]], 0.9).is_err());
        assert!(GridWorld::from_transitions(vec![vec![3]], vec![vec![1.0]], 0.9).is_err());
    }

    #[test]
    fn off_grid_moves_stay_in_place() {
        let g = GridWorld::new(2, 2, vec![vec![1.0]; 4], 0.9).unwrap();
        assert_eq!(g.next_state(0, 0), 0); // up from top-left
        assert_eq!(g.next_state(0, 2), 0); // left from top-left
        assert_eq!(g.next_state(0, 1), 2);
        assert_eq!(g.next_state(0, 3), 1);
        assert_eq!(g.next_state(3, 3), 3);
    }
}
