//! Self-supervised pretraining of a dense state encoder `φ(s)`.
//!
//! The encoder is a stack of affine layers with leaky-rectifier activations
//! between them; the last layer's output is the latent feature vector. Five
//! single-layer heads sit on top of the latent space: inverse dynamics,
//! forward dynamics (chained five times, re-encoding each prediction),
//! temporal distance, a variational decoder and a bias-free ranking head
//! whose weights play the role of the linear reward.
//!
//! Gradients are computed by hand-written backpropagation and accumulated
//! into a parameter-shaped [`Model`].

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::demos::PreferenceDataset;
use crate::error::{check_dim, invalid, Error, Result};
use crate::mdp::GridWorld;
use crate::rng::seeded;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_LATENT: usize = 16;
pub const DEFAULT_HIDDEN: usize = 32;
pub const FORWARD_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Affine {
    pub fn zeros(n_in: usize, n_out: usize, bias: bool) -> Self {
        Self {
            n_in,
            n_out,
            weight: vec![0.0; n_in * n_out],
            bias: bias.then(|| vec![0.0; n_out]),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_in: usize, n_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut a = Self::zeros(n_in, n_out, bias);
        for w in a.weight.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        if let Some(b) = a.bias.as_mut() {
            for x in b.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
        a
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_in, self.n_out, self.bias.is_some())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        (0..self.n_out)
            .map(|o| {
                let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
                let b = self.bias.as_ref().map_or(0.0, |b| b[o]);
                b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Affine) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut grad.weight[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
            if let Some(b) = grad.bias.as_mut() {
                b[o] += g;
            }
        }
        dx
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter().flatten())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut().flatten())
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<Affine>,
    pub leaky_slope: f64,
}

/// Per-layer inputs and pre-activations from one forward pass.
pub struct EncoderTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl EncoderTrace {
    pub fn latent(&self) -> &[f64] {
        self.pre.last().expect("encoder has layers")
    }
}

impl Encoder {
    pub fn new(layers: Vec<Affine>, leaky_slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for w in layers.windows(2) {
            check_dim(w[0].n_out, w[1].n_in)?;
        }
        Ok(Self { layers, leaky_slope })
    }

    /// Dense encoder `input → hidden → latent`.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, latent: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Affine::random(input, hidden, true, rng),
                Affine::random(hidden, latent, true, rng),
            ],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn latent_len(&self) -> usize {
        self.layers.last().expect("encoder has layers").n_out
    }

    pub fn encode(&self, state: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_len(), state.len())?;
        Ok(self.trace(state).pre.pop().expect("encoder has layers"))
    }

    pub fn trace(&self, state: &[f64]) -> EncoderTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = state.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&x);
            inputs.push(x);
            x = if i + 1 < self.layers.len() {
                y.iter().map(|&v| leaky(v, self.leaky_slope)).collect()
            } else {
                y.clone()
            };
            pre.push(y);
        }
        EncoderTrace { inputs, pre }
    }

    /// Backpropagates `∂L/∂latent`, returning `∂L/∂state`.
    pub fn backward(&self, trace: &EncoderTrace, dlatent: &[f64], grad: &mut Encoder) -> Vec<f64> {
        let mut d = dlatent.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (g, &p) in d.iter_mut().zip(&trace.pre[i]) {
                    *g *= leaky_grad(p, self.leaky_slope);
                }
            }
            d = self.layers[i].backward(&trace.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Affine::zeros_like).collect(),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("encoder serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHeads {
    /// `[φ(s_t); φ(s_{t+1})] → action logits`
    pub inverse: Affine,
    /// `[φ(s_t); onehot(a_t)] → s_{t+1}`
    pub forward: Affine,
    /// `[φ(s_t); φ(s_{t+x})] → x`
    pub temporal: Affine,
    /// `z → s_t`
    pub decoder: Affine,
    /// `φ(s_t) → log σ²` for the variational latent, whose mean is `φ(s_t)`.
    pub log_var: Affine,
    /// `φ(s) → r(s)`, bias-free so that returns are `w · Φ_τ`.
    pub ranking: Affine,
}

impl LossHeads {
    pub fn random<R: Rng + ?Sized>(latent: usize, state_len: usize, n_actions: usize, rng: &mut R) -> Self {
        Self {
            inverse: Affine::random(2 * latent, n_actions, true, rng),
            forward: Affine::random(latent + n_actions, state_len, true, rng),
            temporal: Affine::random(2 * latent, 1, true, rng),
            decoder: Affine::random(latent, state_len, true, rng),
            log_var: Affine::random(latent, latent, true, rng),
            ranking: Affine::random(latent, 1, false, rng),
        }
    }

    fn all(&self) -> [&Affine; 6] {
        [&self.inverse, &self.forward, &self.temporal, &self.decoder, &self.log_var, &self.ranking]
    }

    fn all_mut(&mut self) -> [&mut Affine; 6] {
        [
            &mut self.inverse,
            &mut self.forward,
            &mut self.temporal,
            &mut self.decoder,
            &mut self.log_var,
            &mut self.ranking,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inverse: self.inverse.zeros_like(),
            forward: self.forward.zeros_like(),
            temporal: self.temporal.zeros_like(),
            decoder: self.decoder.zeros_like(),
            log_var: self.log_var.zeros_like(),
            ranking: self.ranking.zeros_like(),
        }
    }

    /// Linear reward weights of the ranking head.
    pub fn reward_weights(&self) -> &[f64] {
        &self.ranking.weight
    }
}

/// Encoder plus heads. Also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Encoder,
    pub heads: LossHeads,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = Σ ½(μ² + σ² − 1 − ln σ²)`.
pub fn gaussian_kl(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

impl Model {
    pub fn random<R: Rng + ?Sized>(
        state_len: usize,
        hidden: usize,
        latent: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = Encoder::random(state_len, hidden, latent, rng);
        let heads = LossHeads::random(latent, state_len, n_actions, rng);
        Self { encoder, heads }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            heads: self.heads.zeros_like(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.heads.inverse.n_out
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.encoder
            .layers
            .iter()
            .flat_map(Affine::params)
            .chain(self.heads.all().into_iter().flat_map(Affine::params))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder
            .layers
            .iter_mut()
            .flat_map(Affine::params_mut)
            .chain(self.heads.all_mut().into_iter().flat_map(Affine::params_mut))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        for (p, v) in self.params_mut().zip(values) {
            *p = *v;
        }
    }

    /// Cross-entropy of the predicted action distribution.
    pub fn inverse_dynamics_loss(
        &self,
        s_t: &[f64],
        s_next: &[f64],
        action: usize,
        grad: Option<&mut Model>,
    ) -> Result<f64> {
        if action >= self.n_actions() {
            return Err(invalid(format!("action {action} out of range")));
        }
        let t0 = self.encoder.trace(s_t);
        let t1 = self.encoder.trace(s_next);
        let input = concat(t0.latent(), t1.latent());
        let logits = self.heads.inverse.forward(&input);
        let lse = log_sum_exp(&logits);
        let loss = lse - logits[action];
        if let Some(g) = grad {
            let mut dl: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
            dl[action] -= 1.0;
            let dinput = self.heads.inverse.backward(&input, &dl, &mut g.heads.inverse);
            let l = self.encoder.latent_len();
            self.encoder.backward(&t0, &dinput[..l], &mut g.encoder);
            self.encoder.backward(&t1, &dinput[l..], &mut g.encoder);
        }
        Ok(loss)
    }

    /// Mean over the chained steps of the per-step mean squared error. Each
    /// prediction is re-encoded to produce the next one.
    pub fn forward_dynamics_loss(
        &self,
        s_t: &[f64],
        actions: &[usize],
        next_states: &[Vec<f64>],
        grad: Option<&mut Model>,
    ) -> Result<f64> {
        check_dim(actions.len(), next_states.len())?;
        if actions.is_empty() {
            return Err(invalid("forward dynamics needs at least one step"));
        }
        let na = self.n_actions();
        if let Some(&a) = actions.iter().find(|&&a| a >= na) {
            return Err(invalid(format!("action {a} out of range")));
        }
        let steps = actions.len() as f64;
        let d = s_t.len() as f64;
        let mut traces = Vec::with_capacity(actions.len());
        let mut head_inputs = Vec::with_capacity(actions.len());
        let mut preds = Vec::with_capacity(actions.len());
        let mut x = s_t.to_vec();
        let mut loss = 0.0;
        for (&a, target) in actions.iter().zip(next_states) {
            check_dim(x.len(), target.len())?;
            let tr = self.encoder.trace(&x);
            let input = concat(tr.latent(), &one_hot(a, na));
            let pred = self.heads.forward.forward(&input);
            loss += pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / d / steps;
            traces.push(tr);
            head_inputs.push(input);
            x = pred.clone();
            preds.push(pred);
        }
        if let Some(g) = grad {
            let l = self.encoder.latent_len();
            let mut carry = vec![0.0; s_t.len()];
            for i in (0..actions.len()).rev() {
                let mut dpred: Vec<f64> = preds[i]
                    .iter()
                    .zip(&next_states[i])
                    .map(|(p, t)| 2.0 * (p - t) / d / steps)
                    .collect();
                add_into(&mut dpred, &carry);
                let dinput = self.heads.forward.backward(&head_inputs[i], &dpred, &mut g.heads.forward);
                carry = self.encoder.backward(&traces[i], &dinput[..l], &mut g.encoder);
            }
        }
        Ok(loss)
    }

    /// Squared error between the predicted and actual normalized distance.
    pub fn temporal_distance_loss(
        &self,
        s_a: &[f64],
        s_b: &[f64],
        target: f64,
        grad: Option<&mut Model>,
    ) -> Result<f64> {
        let ta = self.encoder.trace(s_a);
        let tb = self.encoder.trace(s_b);
        let input = concat(ta.latent(), tb.latent());
        let pred = self.heads.temporal.forward(&input)[0];
        let err = pred - target;
        if let Some(g) = grad {
            let dinput = self.heads.temporal.backward(&input, &[2.0 * err], &mut g.heads.temporal);
            let l = self.encoder.latent_len();
            self.encoder.backward(&ta, &dinput[..l], &mut g.encoder);
            self.encoder.backward(&tb, &dinput[l..], &mut g.encoder);
        }
        Ok(err * err)
    }

    /// Reconstruction sum of squares plus the Gaussian KL term, using the
    /// supplied standard-normal draw `eps` for the reparameterized sample.
    /// Returns `(total, kl)`.
    pub fn vae_loss(&self, s: &[f64], eps: &[f64], grad: Option<&mut Model>) -> Result<(f64, f64)> {
        check_dim(self.encoder.latent_len(), eps.len())?;
        let tr = self.encoder.trace(s);
        let mu = tr.latent().to_vec();
        let lv = self.heads.log_var.forward(&mu);
        let sigma: Vec<f64> = lv.iter().map(|x| (0.5 * x).exp()).collect();
        let z: Vec<f64> = mu.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect();
        let recon = self.heads.decoder.forward(&z);
        let rec: f64 = recon.iter().zip(s).map(|(r, x)| (r - x) * (r - x)).sum();
        let kl = gaussian_kl(&mu, &lv);
        if let Some(g) = grad {
            let drecon: Vec<f64> = recon.iter().zip(s).map(|(r, x)| 2.0 * (r - x)).collect();
            let dz = self.heads.decoder.backward(&z, &drecon, &mut g.heads.decoder);
            // z = μ + exp(lv/2)·ε ; KL = Σ ½(μ² + e^lv − 1 − lv)
            let dlv: Vec<f64> = (0..lv.len())
                .map(|i| dz[i] * 0.5 * sigma[i] * eps[i] + 0.5 * (lv[i].exp() - 1.0))
                .collect();
            let mut dmu: Vec<f64> = dz.iter().zip(&mu).map(|(d, m)| d + m).collect();
            let dmu_lv = self.heads.log_var.backward(&mu, &dlv, &mut g.heads.log_var);
            add_into(&mut dmu, &dmu_lv);
            self.encoder.backward(&tr, &dmu, &mut g.encoder);
        }
        Ok((rec + kl, kl))
    }

    /// Predicted return `Σ_{s∈τ} r(φ(s))` of a sequence of raw states.
    pub fn predicted_return(&self, states: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for s in states {
            total += self.heads.ranking.forward(&self.encoder.encode(s)?)[0];
        }
        Ok(total)
    }

    /// `−log P(worse ≺ better)` under the pairwise ranking model with the
    /// ranking head as reward.
    pub fn ranking_loss(
        &self,
        worse: &[Vec<f64>],
        better: &[Vec<f64>],
        grad: Option<&mut Model>,
    ) -> Result<f64> {
        let tw: Vec<EncoderTrace> = worse.iter().map(|s| self.encoder.trace(s)).collect();
        let tb: Vec<EncoderTrace> = better.iter().map(|s| self.encoder.trace(s)).collect();
        let ret = |ts: &[EncoderTrace]| -> f64 {
            ts.iter().map(|t| self.heads.ranking.forward(t.latent())[0]).sum()
        };
        let (rw, rb) = (ret(&tw), ret(&tb));
        let lse = log_sum_exp(&[rw, rb]);
        let loss = lse - rb;
        if let Some(g) = grad {
            let pw = (rw - lse).exp();
            // ∂L/∂R_better = p_better − 1 = −p_worse ; ∂L/∂R_worse = p_worse
            for (ts, dr) in [(&tw, pw), (&tb, -pw)] {
                for t in ts.iter() {
                    let dz = self.heads.ranking.backward(t.latent(), &[dr], &mut g.heads.ranking);
                    self.encoder.backward(t, &dz, &mut g.encoder);
                }
            }
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub inverse: f64,
    pub forward: f64,
    pub temporal: f64,
    pub vae: f64,
    pub ranking: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            inverse: 1.0,
            forward: 1.0,
            temporal: 1.0,
            vae: 1.0,
            ranking: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Samples of each loss per optimizer step.
    pub batch: usize,
    pub forward_repeats: usize,
    pub hidden: usize,
    pub latent: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            steps: 2000,
            batch: 1,
            forward_repeats: FORWARD_REPEATS,
            hidden: DEFAULT_HIDDEN,
            latent: DEFAULT_LATENT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            seed: 0,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    lr: f64,
    decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, lr: f64, decay: f64) -> Self {
        Self {
            lr,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = &'a f64>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p -= self.lr * (update + self.decay * *p);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub inverse: f64,
    pub forward: f64,
    pub temporal: f64,
    pub vae: f64,
    pub ranking: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Forward-dynamics samples skipped because no trajectory was long enough.
    pub skipped_forward: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,inverse,forward,temporal,vae,ranking,total\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.inverse, r.forward, r.temporal, r.vae, r.ranking, r.total
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    pub model: Model,
    pub config: PretrainConfig,
    #[serde(skip)]
    pub log: TrainLog,
}

pub const ENCODER_FORMAT: &str = "brex-encoder/1";

#[derive(Serialize, Deserialize)]
struct PretrainedDoc {
    format: String,
    layer_shapes: Vec<(usize, usize)>,
    #[serde(flatten)]
    inner: Pretrained,
}

impl Pretrained {
    pub fn encoder(&self) -> &Encoder {
        &self.model.encoder
    }

    pub fn to_json(&self) -> String {
        let doc = PretrainedDoc {
            format: ENCODER_FORMAT.into(),
            layer_shapes: self.model.encoder.layers.iter().map(|l| (l.n_out, l.n_in)).collect(),
            inner: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PretrainedDoc = serde_json::from_str(s)?;
        if doc.format != ENCODER_FORMAT {
            return Err(Error::Format(format!("unknown encoder format {:?}", doc.format)));
        }
        let enc = &doc.inner.model.encoder;
        Encoder::new(enc.layers.clone(), enc.leaky_slope)?;
        for l in enc.layers.iter().chain(doc.inner.model.heads.all()) {
            if l.weight.len() != l.n_in * l.n_out || l.bias.as_ref().is_some_and(|b| b.len() != l.n_out) {
                return Err(Error::Format("layer parameter count disagrees with its shape".into()));
            }
        }
        Ok(doc.inner)
    }
}

/// Trains the encoder and heads on the weighted sum of the five losses.
/// States of `data` are mapped to raw vectors through `mdp`.
pub fn pretrain(data: &PreferenceDataset, mdp: &GridWorld, cfg: &PretrainConfig) -> Result<Pretrained> {
    let trajs = data.trajectories();
    if trajs.is_empty() {
        return Err(invalid("pretraining needs at least one trajectory"));
    }
    if trajs.iter().any(|t| t.len() < 2) {
        return Err(invalid("pretraining trajectories need at least two states"));
    }
    if cfg.batch == 0 || cfg.forward_repeats == 0 {
        return Err(invalid("batch and forward repeat counts must be positive"));
    }
    let mut rng = seeded(cfg.seed);
    let d = mdp.state_vector_len();
    let states: Vec<Vec<f64>> = (0..mdp.n_states()).map(|s| mdp.state_vector(s)).collect();
    let mut model = Model::random(d, cfg.hidden, cfg.latent, mdp.n_actions(), &mut rng);
    model.encoder.leaky_slope = cfg.leaky_slope;
    let mut opt = AdamW::new(model.params().count(), cfg.learning_rate, cfg.weight_decay);
    let fd_pool: Vec<usize> = (0..trajs.len())
        .filter(|&i| trajs[i].len() > cfg.forward_repeats)
        .collect();
    let w = &cfg.weights;
    let scale = 1.0 / cfg.batch as f64;
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let mut grad = model.zeros_like();
        let mut row = LogRow {
            step,
            ..LogRow::default()
        };
        for _ in 0..cfg.batch {
            let t = &trajs[rng.gen_range(0..trajs.len())];
            let i = rng.gen_range(0..t.len() - 1);
            let (s0, a0) = t.steps[i];
            let mut g = model.zeros_like();
            row.inverse += scale
                * model.inverse_dynamics_loss(&states[s0], &states[t.steps[i + 1].0], a0, Some(&mut g))?;
            accumulate(&mut grad, &g, scale * w.inverse);

            if fd_pool.is_empty() {
                log.skipped_forward += 1;
            } else {
                let t = &trajs[fd_pool[rng.gen_range(0..fd_pool.len())]];
                let i = rng.gen_range(0..t.len() - cfg.forward_repeats);
                let window = &t.steps[i..=i + cfg.forward_repeats];
                let actions: Vec<usize> = window[..cfg.forward_repeats].iter().map(|p| p.1).collect();
                let targets: Vec<Vec<f64>> = window[1..].iter().map(|p| states[p.0].clone()).collect();
                let mut g = model.zeros_like();
                row.forward += scale
                    * model.forward_dynamics_loss(&states[window[0].0], &actions, &targets, Some(&mut g))?;
                accumulate(&mut grad, &g, scale * w.forward);
            }

            let t = &trajs[rng.gen_range(0..trajs.len())];
            let a = rng.gen_range(0..t.len() - 1);
            let b = rng.gen_range(a + 1..t.len());
            let target = (b - a) as f64 / t.len() as f64;
            let mut g = model.zeros_like();
            row.temporal += scale
                * model.temporal_distance_loss(&states[t.steps[a].0], &states[t.steps[b].0], target, Some(&mut g))?;
            accumulate(&mut grad, &g, scale * w.temporal);

            let t = &trajs[rng.gen_range(0..trajs.len())];
            let s = t.steps[rng.gen_range(0..t.len())].0;
            let eps: Vec<f64> = (0..cfg.latent).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut g = model.zeros_like();
            row.vae += scale * model.vae_loss(&states[s], &eps, Some(&mut g))?.0;
            accumulate(&mut grad, &g, scale * w.vae);

            if !data.prefs().is_empty() {
                let (worse, better) = data.prefs()[rng.gen_range(0..data.prefs().len())];
                let raw = |i: usize| -> Vec<Vec<f64>> { trajs[i].states().map(|s| states[s].clone()).collect() };
                let mut g = model.zeros_like();
                row.ranking += scale * model.ranking_loss(&raw(worse), &raw(better), Some(&mut g))?;
                accumulate(&mut grad, &g, scale * w.ranking);
            }
        }
        row.total = w.inverse * row.inverse
            + w.forward * row.forward
            + w.temporal * row.temporal
            + w.vae * row.vae
            + w.ranking * row.ranking;
        if !row.total.is_finite() || grad.params().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("non-finite loss at step {step}: {row:?}")));
        }
        opt.step(model.params_mut(), grad.params());
        log.rows.push(row);
    }
    Ok(Pretrained {
        model,
        config: cfg.clone(),
        log,
    })
}

pub(crate) fn accumulate(into: &mut Model, from: &Model, scale: f64) {
    for (a, b) in into.params_mut().zip(from.params()) {
        *a += scale * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brex::ranking_log_likelihood;
    use crate::demos::{generate_ranked_random_demos, sample_ground_truth_reward};
    use crate::mdp::RewardWeights;

    fn small_model(seed: u64) -> Model {
        Model::random(6, 5, 3, 4, &mut seeded(seed))
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let enc = Encoder::new(vec![Affine::zeros(4, 3, true), Affine::zeros(3, 2, true)], 0.01).unwrap();
        assert_eq!(enc.encode(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(enc.encode(&[1.0]).is_err());
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut id = Affine::zeros(3, 3, false);
        for i in 0..3 {
            id.weight[i * 3 + i] = 1.0;
        }
        let enc = Encoder::new(vec![id], 0.01).unwrap();
        assert_eq!(enc.encode(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn two_layers_match_matrix_oracle() {
        let mut l1 = Affine::zeros(2, 2, true);
        l1.weight = vec![1.0, 2.0, -3.0, 1.0];
        l1.bias = Some(vec![0.5, 0.0]);
        let mut l2 = Affine::zeros(2, 1, true);
        l2.weight = vec![2.0, 10.0];
        l2.bias = Some(vec![-1.0]);
        let enc = Encoder::new(vec![l1, l2], 0.01).unwrap();
        // h = (1·1 + 2·2 + 0.5, −3·1 + 1·2) = (5.5, −1) → leaky → (5.5, −0.01)
        // out = 2·5.5 + 10·(−0.01) − 1 = 9.9
        let z = enc.encode(&[1.0, 2.0]).unwrap();
        assert!((z[0] - 9.9).abs() < 1e-12);
    }

    #[test]
    fn trivial_loss_values() {
        let mut m = small_model(0);
        for p in m.params_mut() {
            *p = 0.0;
        }
        let s = vec![0.0; 6];
        let il = m.inverse_dynamics_loss(&s, &s, 2, None).unwrap();
        assert!((il - 4f64.ln()).abs() < 1e-12);
        let rl = m.ranking_loss(&[s.clone()], &[s.clone()], None).unwrap();
        assert!((rl - 2f64.ln()).abs() < 1e-12);
        assert_eq!(gaussian_kl(&[0.0; 3], &[0.0; 3]), 0.0);
        let (total, kl) = m.vae_loss(&s, &[0.3, -1.0, 2.0], None).unwrap();
        assert_eq!((total, kl), (0.0, 0.0));
        assert_eq!(m.temporal_distance_loss(&s, &s, 0.0, None).unwrap(), 0.0);
        assert!(m.inverse_dynamics_loss(&s, &s, 4, None).is_err());
    }

    #[test]
    fn losses_are_nonnegative() {
        let m = small_model(1);
        let mut rng = seeded(2);
        for _ in 0..50 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            assert!(m.inverse_dynamics_loss(&s, &t, 1, None).unwrap() >= 0.0);
            assert!(m.forward_dynamics_loss(&s, &[0, 3], &[t.clone(), s.clone()], None).unwrap() >= 0.0);
            assert!(m.temporal_distance_loss(&s, &t, 0.4, None).unwrap() >= 0.0);
            let (total, kl) = m.vae_loss(&s, &eps, None).unwrap();
            assert!(kl >= 0.0 && total >= kl);
            assert!(m.ranking_loss(&[s.clone()], &[t.clone()], None).unwrap() >= 0.0);
        }
    }

    fn tiny_setup() -> (GridWorld, PreferenceDataset) {
        let mut rng = seeded(7);
        let g = GridWorld::random(3, 3, 2, 0.9, &mut rng).unwrap();
        let w = sample_ground_truth_reward(2, &mut rng).unwrap();
        let d = generate_ranked_random_demos(&g, &w, 4, 8, &mut rng).unwrap();
        (g, d)
    }

    fn small_cfg(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            hidden: 8,
            latent: 4,
            seed: 3,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_loss_weights_only_decay() {
        let (g, d) = tiny_setup();
        let cfg = PretrainConfig {
            weights: LossWeights { inverse: 0.0, forward: 0.0, temporal: 0.0, vae: 0.0, ranking: 0.0 },
            ..small_cfg(10)
        };
        let trained = pretrain(&d, &g, &cfg).unwrap();
        let mut rng = seeded(cfg.seed);
        let init = Model::random(g.state_vector_len(), cfg.hidden, cfg.latent, g.n_actions(), &mut rng);
        let shrink = (1.0 - cfg.learning_rate * cfg.weight_decay).powi(10);
        for (a, b) in trained.model.params().zip(init.params()) {
            assert!((a - b * shrink).abs() < 1e-15);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (g, d) = tiny_setup();
        let cfg = PretrainConfig { batch: 4, learning_rate: 1e-2, ..small_cfg(300) };
        let a = pretrain(&d, &g, &cfg).unwrap();
        let mean = |r: &[LogRow]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
        let rows = &a.log.rows;
        assert!(mean(&rows[rows.len() - 30..]) < mean(&rows[..30]));
        let b = pretrain(&d, &g, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let back = Pretrained::from_json(&a.to_json()).unwrap();
        assert_eq!(back.model, a.model);
        assert!(a.log.to_csv().starts_with("step,inverse,forward,temporal,vae,ranking,total\n"));
    }

    #[test]
    fn ranking_loss_matches_cached_likelihood() {
        let (g, d) = tiny_setup();
        let m = pretrain(&d, &g, &small_cfg(20)).unwrap().model;
        let states: Vec<Vec<f64>> = (0..g.n_states()).map(|s| g.state_vector(s)).collect();
        let latent = d.refeaturize(|s| m.encoder.encode(&states[s]).unwrap()).unwrap();
        let w = RewardWeights::unconstrained(m.heads.reward_weights().to_vec()).unwrap();
        let cached = ranking_log_likelihood(&w, &latent, 1.0).unwrap();
        let raw = |i: usize| -> Vec<Vec<f64>> { d.trajectories()[i].states().map(|s| states[s].clone()).collect() };
        let direct: f64 = d
            .prefs()
            .iter()
            .map(|&(i, j)| m.ranking_loss(&raw(i), &raw(j), None).unwrap())
            .sum();
        assert!((cached + direct).abs() < 1e-10, "{cached} vs {direct}");
    }
}
