//! Posterior chains over unit-norm reward weights, the Metropolis-Hastings
//! loop shared by both samplers, and chain persistence.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic   5 bytes   "BREX1" | "BIRL1" | "ENSB1" | "DROP1"
//! k       u32
//! count   u64
//! count × { k × f64 weights, f64 log posterior }
//! ```

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::mdp::{l2_norm, NormTag, RewardWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Inverse temperature of the likelihood.
    pub beta: f64,
    /// Standard deviation of the Gaussian proposal before re-normalization.
    pub step_sigma: f64,
    /// Number of proposals.
    pub n_steps: usize,
    /// Leading chain entries dropped before summarizing.
    pub burn_in: usize,
    /// Keep every `thin`-th entry after the burn-in.
    pub thin: usize,
    pub seed: u64,
    /// Rejects weights giving the lowest-ranked demonstration a negative
    /// return. Ignored by Bayesian IRL, whose prior is flat.
    pub nonneg_prior: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self::gridworld(0)
    }
}

impl McmcConfig {
    /// Gridworld settings: β = 50, σ = 0.005, 10,000 proposals, 10% burn-in,
    /// every 5th sample.
    pub fn gridworld(seed: u64) -> Self {
        Self {
            beta: 50.0,
            step_sigma: 0.005,
            n_steps: 10_000,
            burn_in: 1_000,
            thin: 5,
            seed,
            nonneg_prior: true,
        }
    }

    /// Large-scale settings: β = 1, σ = 0.005, 200,000 proposals, burn-in
    /// 5,000, every 20th sample.
    pub fn large_scale(seed: u64) -> Self {
        Self {
            beta: 1.0,
            step_sigma: 0.005,
            n_steps: 200_000,
            burn_in: 5_000,
            thin: 20,
            seed,
            nonneg_prior: true,
        }
    }

    /// Sets `n_steps` and a 10% burn-in.
    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self.burn_in = n_steps / 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_sigma > 0.0 && self.step_sigma.is_finite()) {
            return Err(invalid(format!("step_sigma must be positive, got {}", self.step_sigma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        if self.burn_in >= self.n_steps {
            return Err(invalid(format!(
                "burn_in ({}) must be smaller than n_steps ({})",
                self.burn_in, self.n_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    Brex,
    Birl,
    Ensemble,
    Dropout,
}

impl ChainKind {
    pub fn magic(self) -> &'static [u8; 5] {
        match self {
            ChainKind::Brex => b"BREX1",
            ChainKind::Birl => b"BIRL1",
            ChainKind::Ensemble => b"ENSB1",
            ChainKind::Dropout => b"DROP1",
        }
    }

    pub fn from_magic(m: &[u8]) -> Option<Self> {
        [ChainKind::Brex, ChainKind::Birl, ChainKind::Ensemble, ChainKind::Dropout]
            .into_iter()
            .find(|k| k.magic() == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub kind: ChainKind,
    k: usize,
    /// Row-major `len × k`.
    samples: Vec<f64>,
    log_post: Vec<f64>,
    pub accept_count: usize,
    pub config: McmcConfig,
    /// Number of MDP solves performed while sampling (Bayesian IRL only).
    pub solver_calls: u64,
}

impl PosteriorChain {
    pub fn from_rows(
        kind: ChainKind,
        rows: &[Vec<f64>],
        log_post: Vec<f64>,
        config: McmcConfig,
    ) -> Result<Self> {
        let k = rows.first().map(Vec::len).ok_or_else(|| invalid("chain needs at least one sample"))?;
        check_dim(rows.len(), log_post.len())?;
        for r in rows {
            check_dim(k, r.len())?;
        }
        Ok(Self {
            kind,
            k,
            samples: rows.concat(),
            log_post,
            accept_count: 0,
            config,
            solver_calls: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.log_post.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_post.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.k..(i + 1) * self.k]
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.samples.chunks_exact(self.k)
    }

    pub fn log_post(&self) -> &[f64] {
        &self.log_post
    }

    pub fn acceptance_rate(&self) -> f64 {
        let proposals = self.len().saturating_sub(1);
        if proposals == 0 {
            0.0
        } else {
            self.accept_count as f64 / proposals as f64
        }
    }

    /// Chain restricted to entries `burn_in, burn_in + thin, …`.
    pub fn thinned(&self, burn_in: usize, thin: usize) -> Result<Self> {
        if thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        let idx: Vec<usize> = (burn_in..self.len()).step_by(thin).collect();
        if idx.is_empty() {
            return Err(invalid(format!(
                "no samples retained from a chain of {} with burn-in {burn_in}",
                self.len()
            )));
        }
        let mut samples = Vec::with_capacity(idx.len() * self.k);
        for &i in &idx {
            samples.extend_from_slice(self.sample(i));
        }
        Ok(Self {
            samples,
            log_post: idx.iter().map(|&i| self.log_post[i]).collect(),
            ..self.clone()
        })
    }

    /// Retained chain using the burn-in and thinning stored in the config.
    pub fn retained(&self) -> Result<Self> {
        self.thinned(self.config.burn_in, self.config.thin)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.samples.len() * 8 + self.log_post.len() * 8);
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (w, lp) in self.samples().zip(&self.log_post) {
            for x in w {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&lp.to_le_bytes());
        }
        out
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads the binary payload; configuration and counters come from the
    /// sidecar and are left at defaults here.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 17 {
            return Err(Error::Format("chain file shorter than its header".into()));
        }
        let kind = ChainKind::from_magic(&buf[..5])
            .ok_or_else(|| Error::Format(format!("unknown chain magic {:?}", &buf[..5])))?;
        let k = u32::from_le_bytes(buf[5..9].try_into().expect("4 bytes")) as usize;
        let n = u64::from_le_bytes(buf[9..17].try_into().expect("8 bytes")) as usize;
        if k == 0 {
            return Err(Error::Format("chain has zero-dimensional samples".into()));
        }
        let expected = n
            .checked_mul((k + 1) * 8)
            .and_then(|b| b.checked_add(17))
            .ok_or_else(|| Error::Format("chain size overflows".into()))?;
        if buf.len() != expected {
            return Err(Error::Format(format!(
                "chain payload is {} bytes, header implies {expected}",
                buf.len()
            )));
        }
        let mut samples = Vec::with_capacity(n * k);
        let mut log_post = Vec::with_capacity(n);
        for rec in buf[17..].chunks_exact((k + 1) * 8) {
            let mut vals = rec.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
            samples.extend(vals.by_ref().take(k));
            log_post.push(vals.next().expect("log posterior present"));
        }
        Ok(Self {
            kind,
            k,
            samples,
            log_post,
            accept_count: 0,
            config: McmcConfig::default(),
            solver_calls: 0,
        })
    }

    pub fn sidecar(&self) -> ChainSidecar {
        ChainSidecar {
            format: "brex-chain/1".into(),
            kind: self.kind,
            magic: String::from_utf8_lossy(self.kind.magic()).into_owned(),
            k: self.k,
            count: self.len(),
            accept_count: self.accept_count,
            acceptance_rate: self.acceptance_rate(),
            solver_calls: self.solver_calls,
            config: self.config.clone(),
        }
    }

    /// Restores configuration and counters from a sidecar.
    pub fn with_sidecar(mut self, side: &ChainSidecar) -> Result<Self> {
        if side.kind != self.kind || side.k != self.k || side.count != self.len() {
            return Err(Error::Format("sidecar does not describe this chain".into()));
        }
        self.accept_count = side.accept_count;
        self.solver_calls = side.solver_calls;
        self.config = side.config.clone();
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.k {
            let _ = write!(out, "w{j},");
        }
        out.push_str("log_post\n");
        for (w, lp) in self.samples().zip(&self.log_post) {
            for x in w {
                let _ = write!(out, "{x},");
            }
            let _ = writeln!(out, "{lp}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSidecar {
    pub format: String,
    pub kind: ChainKind,
    pub magic: String,
    pub k: usize,
    pub count: usize,
    pub accept_count: usize,
    pub acceptance_rate: f64,
    pub solver_calls: u64,
    pub config: McmcConfig,
}

/// Uniform point on the unit sphere in `k` dimensions.
pub fn random_unit<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let n = l2_norm(&z);
        if n > 0.0 {
            return z.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize(w + σ z)` with `z` standard normal, redrawn in the
/// probability-zero event that the perturbed vector vanishes.
pub fn propose<R: Rng + ?Sized>(w: &RewardWeights, step_sigma: f64, rng: &mut R) -> Result<RewardWeights> {
    let mut out = vec![0.0; w.len()];
    propose_into(w.as_slice(), step_sigma, rng, &mut out);
    RewardWeights::new(out, NormTag::L2)
}

pub(crate) fn propose_into<R: Rng + ?Sized>(w: &[f64], step_sigma: f64, rng: &mut R, out: &mut [f64]) {
    loop {
        for (o, x) in out.iter_mut().zip(w) {
            let z: f64 = StandardNormal.sample(rng);
            *o = x + step_sigma * z;
        }
        let n = l2_norm(out);
        if n > 0.0 && n.is_finite() {
            out.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

pub(crate) const MAX_INIT_ATTEMPTS: usize = 10_000;

/// Random-walk Metropolis-Hastings on the unit sphere. The chain has
/// `n_steps + 1` entries including the initial state, and a proposal is
/// accepted iff `u < exp(lp' − lp)`.
pub(crate) fn metropolis<R, F>(
    kind: ChainKind,
    init: Vec<f64>,
    cfg: &McmcConfig,
    rng: &mut R,
    mut log_post: F,
) -> Result<PosteriorChain>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    cfg.validate()?;
    let k = init.len();
    let mut current = init;
    let mut lp = log_post(&current);
    if !lp.is_finite() {
        return Err(invalid("initial state has a non-finite log posterior"));
    }
    let mut samples = Vec::with_capacity((cfg.n_steps + 1) * k);
    let mut lps = Vec::with_capacity(cfg.n_steps + 1);
    samples.extend_from_slice(&current);
    lps.push(lp);
    let mut proposal = vec![0.0; k];
    let mut accepted = 0;
    for _ in 0..cfg.n_steps {
        propose_into(&current, cfg.step_sigma, rng, &mut proposal);
        let lp_new = log_post(&proposal);
        let u: f64 = rng.gen();
        if lp_new > f64::NEG_INFINITY && u < (lp_new - lp).exp() {
            std::mem::swap(&mut current, &mut proposal);
            lp = lp_new;
            accepted += 1;
        }
        samples.extend_from_slice(&current);
        lps.push(lp);
    }
    Ok(PosteriorChain {
        kind,
        k,
        samples,
        log_post: lps,
        accept_count: accepted,
        config: cfg.clone(),
        solver_calls: 0,
    })
}

/// Average of the retained samples, re-normalized onto the L2 sphere.
/// Returns the weights and the norm of the raw average.
pub fn chain_mean(chain: &PosteriorChain, burn_in: usize, thin: usize) -> Result<(RewardWeights, f64)> {
    let raw = chain_mean_raw(chain, burn_in, thin)?;
    let n = l2_norm(&raw);
    Ok((RewardWeights::normalized_l2(raw)?, n))
}

/// Average of the retained samples without re-normalization.
pub fn chain_mean_raw(chain: &PosteriorChain, burn_in: usize, thin: usize) -> Result<Vec<f64>> {
    let kept = chain.thinned(burn_in, thin)?;
    let mut acc = vec![0.0; kept.k()];
    for w in kept.samples() {
        acc.iter_mut().zip(w).for_each(|(a, x)| *a += x);
    }
    let n = kept.len() as f64;
    Ok(acc.into_iter().map(|x| x / n).collect())
}

/// Retained sample with the largest log posterior (first on ties).
pub fn chain_map(chain: &PosteriorChain, burn_in: usize, thin: usize) -> Result<RewardWeights> {
    let kept = chain.thinned(burn_in, thin)?;
    let best = kept
        .log_post()
        .iter()
        .enumerate()
        .fold(0, |b, (i, &lp)| if lp > kept.log_post()[b] { i } else { b });
    RewardWeights::unconstrained(kept.sample(best).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn constant_chain() -> PosteriorChain {
        let w = vec![0.6, 0.8];
        PosteriorChain::from_rows(ChainKind::Brex, &vec![w; 10], vec![-1.0; 10], McmcConfig::default()).unwrap()
    }

    #[test]
    fn proposal_examples() {
        let mut rng = seeded(1);
        let w = RewardWeights::new(vec![0.6, 0.8], NormTag::L2).unwrap();
        let same = propose(&w, 0.0, &mut rng);
        // σ = 0 is rejected by McmcConfig but the proposal itself is the identity.
        let same = same.unwrap();
        for (a, b) in same.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        for _ in 0..1000 {
            let p = propose(&w, 0.3, &mut rng).unwrap();
            assert!((l2_norm(p.as_slice()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn angular_step_grows_with_sigma() {
        let mut rng = seeded(2);
        let w = RewardWeights::new(random_unit(4, &mut rng), NormTag::L2).unwrap();
        let mean_angle = |sigma: f64, rng: &mut crate::rng::StdRng| {
            (0..10_000)
                .map(|_| {
                    let p = propose(&w, sigma, rng).unwrap();
                    crate::mdp::dot(p.as_slice(), w.as_slice()).clamp(-1.0, 1.0).acos()
                })
                .sum::<f64>()
                / 10_000.0
        };
        let small = mean_angle(0.005, &mut rng);
        let large = mean_angle(0.05, &mut rng);
        assert!(large > 5.0 * small, "{small} vs {large}");
    }

    #[test]
    fn constant_chain_summaries() {
        let c = constant_chain();
        let (mean, norm) = chain_mean(&c, 2, 3).unwrap();
        assert!((mean.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(chain_map(&c, 0, 1).unwrap().as_slice(), &[0.6, 0.8]);
        assert!(chain_mean(&c, 10, 1).is_err());
    }

    #[test]
    fn thinning_indices() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let c = PosteriorChain::from_rows(ChainKind::Brex, &rows, vec![0.0; 10], McmcConfig::default()).unwrap();
        let t = c.thinned(3, 3).unwrap();
        let kept: Vec<f64> = t.samples().map(|w| w[0]).collect();
        assert_eq!(kept, vec![3.0, 6.0, 9.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = McmcConfig::gridworld(0);
        assert!(c.validate().is_ok());
        c.thin = 0;
        assert!(c.validate().is_err());
        let mut c = McmcConfig::gridworld(0);
        c.burn_in = c.n_steps;
        assert!(c.validate().is_err());
        let mut c = McmcConfig::gridworld(0);
        c.step_sigma = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn binary_rejects_garbage() {
        let c = constant_chain();
        let mut bytes = c.to_bytes();
        assert_eq!(&bytes[..5], b"BREX1");
        assert_eq!(PosteriorChain::from_bytes(&bytes).unwrap().samples, c.samples);
        bytes.pop();
        assert!(PosteriorChain::from_bytes(&bytes).is_err());
        assert!(PosteriorChain::from_bytes(b"NOPE1\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }
}
