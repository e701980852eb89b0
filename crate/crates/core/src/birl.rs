//! Classical Bayesian IRL with a Boltzmann-rational state-action
//! likelihood. Every likelihood evaluation solves the MDP for `Q*`.

use rand::Rng;

use crate::chain::{metropolis, random_unit, ChainKind, McmcConfig, PosteriorChain};
use crate::error::{invalid, Result};
use crate::mdp::{value_iteration_from, GridWorld, QTable, RewardWeights, DEFAULT_TOL};

/// `Σ_(s,a) [β Q*(s,a) − logsumexp_b β Q*(s,b)]` given a solved Q-table.
pub fn boltzmann_log_likelihood_from_q(q: &QTable, pairs: &[(usize, usize)], beta: f64) -> f64 {
    pairs
        .iter()
        .map(|&(s, a)| {
            let row = q.row(s);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = beta * m + row.iter().map(|x| (beta * (x - m)).exp()).sum::<f64>().ln();
            beta * row[a] - lse
        })
        .sum()
}

fn check_pairs(mdp: &GridWorld, pairs: &[(usize, usize)]) -> Result<()> {
    match pairs
        .iter()
        .find(|&&(s, a)| s >= mdp.n_states() || a >= mdp.n_actions())
    {
        Some(p) => Err(invalid(format!("demonstration pair {p:?} is not valid for this world"))),
        None => Ok(()),
    }
}

/// Boltzmann log-likelihood of deduplicated `(state, action)` pairs under
/// reward `w`, solving for `Q*` by value iteration.
pub fn boltzmann_log_likelihood(
    mdp: &GridWorld,
    pairs: &[(usize, usize)],
    w: &RewardWeights,
    beta: f64,
) -> Result<f64> {
    check_pairs(mdp, pairs)?;
    let q = value_iteration_from(mdp, w, DEFAULT_TOL, None)?;
    Ok(boltzmann_log_likelihood_from_q(&q, pairs, beta))
}

/// Log posterior evaluator that warm-starts each solve from the previous one
/// and counts solver calls.
pub struct BirlPosterior<'a> {
    mdp: &'a GridWorld,
    pairs: &'a [(usize, usize)],
    beta: f64,
    tol: f64,
    last: Option<QTable>,
    pub solver_calls: u64,
}

impl<'a> BirlPosterior<'a> {
    pub fn new(mdp: &'a GridWorld, pairs: &'a [(usize, usize)], beta: f64) -> Result<Self> {
        check_pairs(mdp, pairs)?;
        Ok(Self {
            mdp,
            pairs,
            beta,
            tol: DEFAULT_TOL,
            last: None,
            solver_calls: 0,
        })
    }

    pub fn eval(&mut self, w: &[f64]) -> Result<f64> {
        let rw = RewardWeights::unconstrained(w.to_vec())?;
        let q = value_iteration_from(self.mdp, &rw, self.tol, self.last.as_ref())?;
        self.solver_calls += 1;
        let ll = boltzmann_log_likelihood_from_q(&q, self.pairs, self.beta);
        self.last = Some(q);
        Ok(ll)
    }
}

/// Metropolis-Hastings over unit-L2 reward weights with a flat prior and
/// the same proposal as Bayesian REX.
pub fn run_mcmc_birl<R: Rng + ?Sized>(
    mdp: &GridWorld,
    demos: &[(usize, usize)],
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<PosteriorChain> {
    cfg.validate()?;
    let mut post = BirlPosterior::new(mdp, demos, cfg.beta)?;
    let init = random_unit(mdp.k(), rng);
    let mut failure = None;
    let mut chain = metropolis(ChainKind::Birl, init, cfg, rng, |w| match post.eval(w) {
        Ok(lp) => lp,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NEG_INFINITY
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    chain.solver_calls = post.solver_calls;
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{greedy_policy, value_iteration};
    use crate::rng::seeded;

    fn two_state() -> GridWorld {
        // s0: stay | go ; s1: stay | back
        GridWorld::from_transitions(vec![vec![0, 1], vec![1, 0]], vec![vec![0.0], vec![1.0]], 0.5).unwrap()
    }

    #[test]
    fn beta_zero_is_uniform() {
        let mut rng = seeded(1);
        let g = GridWorld::random(4, 4, 3, 0.9, &mut rng).unwrap();
        let w = RewardWeights::unconstrained(vec![0.2, -0.5, 0.3]).unwrap();
        let pairs = vec![(0, 1), (5, 2), (9, 3)];
        let ll = boltzmann_log_likelihood(&g, &pairs, &w, 0.0).unwrap();
        assert!((ll + 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_state_by_hand() {
        // With R = (0, 1), γ = 0.5: V*(1) = 2, V*(0) = 1.
        // Q(0, stay) = 0.5, Q(0, go) = 1, Q(1, stay) = 2, Q(1, back) = 1.5.
        // β = 1: ln P(go | s0) = 1 − ln(e^0.5 + e^1)
        //        ln P(stay | s1) = 2 − ln(e^2 + e^1.5)
        let w = RewardWeights::unconstrained(vec![1.0]).unwrap();
        let ll = boltzmann_log_likelihood(&two_state(), &[(0, 1), (1, 0)], &w, 1.0).unwrap();
        let want = 1.0 - (0.5f64.exp() + 1f64.exp()).ln() + 2.0 - (2f64.exp() + 1.5f64.exp()).ln();
        assert!((ll - want).abs() < 1e-8, "{ll} vs {want}");
    }

    #[test]
    fn optimal_demos_near_zero_at_large_beta() {
        let mut rng = seeded(2);
        let g = GridWorld::random(5, 5, 4, 0.9, &mut rng).unwrap();
        let w = RewardWeights::unconstrained(vec![0.4, -0.3, 0.2, -0.1]).unwrap();
        let q = value_iteration(&g, &w, DEFAULT_TOL).unwrap();
        let pi = greedy_policy(&q);
        let pairs: Vec<(usize, usize)> = (0..25)
            .map(|s| (s, (0..4).find(|&a| pi.row(s)[a] == 1.0).unwrap()))
            .filter(|&(s, a)| {
                // skip states where the optimal action is tied
                let row = q.row(s);
                row.iter().enumerate().all(|(b, &x)| b == a || x < row[a] - 1e-3)
            })
            .collect();
        assert!(!pairs.is_empty());
        let ll = boltzmann_log_likelihood(&g, &pairs, &w, 1e5).unwrap();
        assert!(ll <= 0.0 && ll > -1e-6, "{ll}");
    }

    #[test]
    fn shift_invariance_of_state_softmax() {
        // Adding a constant to every feature weight of a one-hot world adds a
        // constant to every Q-value, which the softmax ignores.
        let mut rng = seeded(4);
        let g = GridWorld::random(4, 4, 3, 0.9, &mut rng).unwrap();
        let pairs = vec![(0, 1), (3, 2), (7, 0), (12, 3)];
        let a = boltzmann_log_likelihood(&g, &pairs, &RewardWeights::unconstrained(vec![0.1, 0.4, -0.2]).unwrap(), 5.0).unwrap();
        let b = boltzmann_log_likelihood(&g, &pairs, &RewardWeights::unconstrained(vec![1.1, 1.4, 0.8]).unwrap(), 5.0).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn one_solve_per_proposal() {
        let mut rng = seeded(5);
        let g = GridWorld::random(3, 3, 2, 0.9, &mut rng).unwrap();
        let cfg = McmcConfig::gridworld(5).with_steps(300);
        let c = run_mcmc_birl(&g, &[(0, 1), (4, 3)], &cfg, &mut rng).unwrap();
        assert_eq!(c.solver_calls, 301);
        assert_eq!(c.len(), 301);
        assert!(run_mcmc_birl(&g, &[(9, 0)], &cfg, &mut rng).is_err());
    }
}
