//! Actor-critic network: feature embeddings, a self-attention encoder over
//! the population, a cross-attention decoder driven by the
//! exploration/exploitation embeddings, a Gaussian actor head and a pooled
//! critic.

use std::f64::consts::PI;

use gleet_autodiff::{Initializer, NodeId, ParameterSet, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{StateBundle, NUM_FEATURES};
use crate::error::{GleetError, Result};
use crate::rng::rng_for;

pub const MU_RANGE: (f64, f64) = (0.0, 1.0);
pub const SIGMA_RANGE: (f64, f64) = (0.01, 0.7);

/// Which stream feeds the residual around the decoder's cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderResidual {
    /// The encoder output (keys/values side).
    #[default]
    Encoder,
    /// The exploration/exploitation embeddings (query side).
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Hyperparameters emitted per individual.
    pub action_dim: usize,
    pub use_eet_embeddings: bool,
    pub use_mha: bool,
    pub decoder_residual: DecoderResidual,
    pub layer_norm_eps: f64,
    pub critic_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            encoder_layers: 2,
            heads: 8,
            ff_hidden: 256,
            action_dim: 1,
            use_eet_embeddings: true,
            use_mha: true,
            decoder_residual: DecoderResidual::Encoder,
            layer_norm_eps: 1e-5,
            critic_slope: 0.01,
        }
    }
}

/// Hidden widths of the critic MLP after pooling.
const CRITIC_HIDDEN: [usize; 2] = [64, 32];

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(GleetError::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ff_hidden == 0 || self.encoder_layers == 0 || self.action_dim == 0 {
            return Err(GleetError::config(
                "ff_hidden, encoder_layers and action_dim must be positive",
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(GleetError::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Fresh parameters. Weights and biases are uniform in `±1/sqrt(fan_in)`;
    /// layer-norm gains start at 1 and offsets at 0.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        self.validate()?;
        let mut rng = rng_for(seed, 0);
        let mut p = ParameterSet::new();
        let d = self.embed_dim;
        linear(&mut p, "embed.pop", NUM_FEATURES, d, &mut rng)?;
        if self.use_eet_embeddings {
            linear(&mut p, "embed.explore", NUM_FEATURES, d, &mut rng)?;
            linear(&mut p, "embed.exploit", NUM_FEATURES, d, &mut rng)?;
            linear(&mut p, "eet.l1", 2 * d, 2 * d, &mut rng)?;
            linear(&mut p, "eet.l2", 2 * d, d, &mut rng)?;
        }
        for l in 0..self.encoder_layers {
            let pre = format!("enc{l}");
            if self.use_mha {
                attention(&mut p, &format!("{pre}.attn"), d, &mut rng)?;
            }
            layer_norm(&mut p, &format!("{pre}.ln1"), d)?;
            linear(&mut p, &format!("{pre}.ff.l1"), d, self.ff_hidden, &mut rng)?;
            linear(&mut p, &format!("{pre}.ff.l2"), self.ff_hidden, d, &mut rng)?;
            layer_norm(&mut p, &format!("{pre}.ln2"), d)?;
        }
        if self.use_mha {
            attention(&mut p, "dec.attn", d, &mut rng)?;
        }
        layer_norm(&mut p, "dec.ln1", d)?;
        linear(&mut p, "dec.ff.l1", d, self.ff_hidden, &mut rng)?;
        linear(&mut p, "dec.ff.l2", self.ff_hidden, d, &mut rng)?;
        layer_norm(&mut p, "dec.ln2", d)?;
        linear(&mut p, "dec.logit", d, d, &mut rng)?;
        linear(&mut p, "actor", d, 2 * self.action_dim, &mut rng)?;
        linear(&mut p, "critic.l1", d, CRITIC_HIDDEN[0], &mut rng)?;
        linear(&mut p, "critic.l2", CRITIC_HIDDEN[0], CRITIC_HIDDEN[1], &mut rng)?;
        linear(&mut p, "critic.l3", CRITIC_HIDDEN[1], 1, &mut rng)?;
        Ok(p)
    }

    /// Scalar parameter count implied by this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let lin = |i: usize, o: usize| i * o + o;
        let ff = lin(d, self.ff_hidden) + lin(self.ff_hidden, d);
        let mha = if self.use_mha { 4 * d * d } else { 0 };
        let ln = 2 * d;
        let mut total = lin(NUM_FEATURES, d);
        if self.use_eet_embeddings {
            total += 2 * lin(NUM_FEATURES, d) + lin(2 * d, 2 * d) + lin(2 * d, d);
        }
        total += self.encoder_layers * (mha + 2 * ln + ff);
        total += mha + 2 * ln + ff + lin(d, d);
        total += lin(d, 2 * self.action_dim);
        total += lin(d, CRITIC_HIDDEN[0]) + lin(CRITIC_HIDDEN[0], CRITIC_HIDDEN[1]) + lin(CRITIC_HIDDEN[1], 1);
        total
    }

    /// Records the whole network on `tape` for one state.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, state: &StateBundle) -> Result<ForwardNodes> {
        state.validate()?;
        let n = state.n;
        let pop = tape.leaf(Tensor::new(vec![n, NUM_FEATURES], state.population.clone())?);
        let pes = apply_linear(tape, "embed.pop", pop)?;
        let eets = if self.use_eet_embeddings {
            let explore = tape.leaf(Tensor::new(vec![n, NUM_FEATURES], state.exploration.clone())?);
            let exploit = tape.leaf(Tensor::new(vec![1, NUM_FEATURES], state.exploitation.clone())?);
            let eres = apply_linear(tape, "embed.explore", explore)?;
            let eie = apply_linear(tape, "embed.exploit", exploit)?;
            let eie = tape.repeat_rows(eie, n)?;
            let joined = tape.concat_cols(&[eres, eie])?;
            let hidden = apply_linear(tape, "eet.l1", joined)?;
            let hidden = tape.relu(hidden)?;
            apply_linear(tape, "eet.l2", hidden)?
        } else {
            pes
        };

        let mut e = pes;
        for l in 0..self.encoder_layers {
            let pre = format!("enc{l}");
            let mixed = if self.use_mha {
                self.attention(tape, &format!("{pre}.attn"), e, e)?
            } else {
                e
            };
            let sum = tape.add(e, mixed)?;
            let normed = self.apply_layer_norm(tape, &format!("{pre}.ln1"), sum)?;
            let ff = feed_forward(tape, &format!("{pre}.ff"), normed)?;
            let sum = tape.add(normed, ff)?;
            e = self.apply_layer_norm(tape, &format!("{pre}.ln2"), sum)?;
        }
        let fipes = e;

        let cross = if self.use_mha {
            self.attention(tape, "dec.attn", eets, fipes)?
        } else {
            eets
        };
        let residual = match self.decoder_residual {
            DecoderResidual::Encoder => fipes,
            DecoderResidual::Query => eets,
        };
        let sum = tape.add(residual, cross)?;
        let h_hat = self.apply_layer_norm(tape, "dec.ln1", sum)?;
        let ff = feed_forward(tape, "dec.ff", h_hat)?;
        let sum = tape.add(h_hat, ff)?;
        let normed = self.apply_layer_norm(tape, "dec.ln2", sum)?;
        let logits = apply_linear(tape, "dec.logit", normed)?;
        let logits = tape.relu(logits)?;

        let m = self.action_dim;
        let raw = apply_linear(tape, "actor", logits)?;
        let mu_raw = tape.slice_cols(raw, 0, m)?;
        let sigma_raw = tape.slice_cols(raw, m, m)?;
        let mu = tape.tanh(mu_raw)?;
        let mu = tape.affine(mu, (MU_RANGE.1 - MU_RANGE.0) / 2.0, (MU_RANGE.1 + MU_RANGE.0) / 2.0)?;
        let sigma = tape.tanh(sigma_raw)?;
        let sigma = tape.affine(
            sigma,
            (SIGMA_RANGE.1 - SIGMA_RANGE.0) / 2.0,
            (SIGMA_RANGE.1 + SIGMA_RANGE.0) / 2.0,
        )?;

        let pooled = tape.mean_rows(logits)?;
        let c = apply_linear(tape, "critic.l1", pooled)?;
        let c = tape.leaky_relu(c, self.critic_slope)?;
        let c = apply_linear(tape, "critic.l2", c)?;
        let c = tape.leaky_relu(c, self.critic_slope)?;
        let value = apply_linear(tape, "critic.l3", c)?;

        Ok(ForwardNodes {
            logits,
            mu,
            sigma,
            value,
        })
    }

    /// Multi-head scaled dot-product attention without biases.
    fn attention(&self, tape: &mut Tape<'_>, prefix: &str, query: NodeId, context: NodeId) -> Result<NodeId> {
        let wq = tape.param_named(&format!("{prefix}.wq"))?;
        let wk = tape.param_named(&format!("{prefix}.wk"))?;
        let wv = tape.param_named(&format!("{prefix}.wv"))?;
        let wo = tape.param_named(&format!("{prefix}.wo"))?;
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        Ok(tape.matmul(joined, wo)?)
    }

    fn apply_layer_norm(&self, tape: &mut Tape<'_>, prefix: &str, x: NodeId) -> Result<NodeId> {
        let g = tape.param_named(&format!("{prefix}.g"))?;
        let b = tape.param_named(&format!("{prefix}.b"))?;
        Ok(tape.layer_norm(x, g, b, self.layer_norm_eps)?)
    }
}

fn linear<R: Rng + ?Sized>(p: &mut ParameterSet, prefix: &str, fan_in: usize, out: usize, rng: &mut R) -> Result<()> {
    p.add(format!("{prefix}.w"), vec![fan_in, out], Initializer::FanInUniform, rng)?;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let bias = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
    p.insert(format!("{prefix}.b"), Tensor::new(vec![out], bias)?)?;
    Ok(())
}

fn attention<R: Rng + ?Sized>(p: &mut ParameterSet, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        p.add(format!("{prefix}.{w}"), vec![d, d], Initializer::FanInUniform, rng)?;
    }
    Ok(())
}

fn layer_norm(p: &mut ParameterSet, prefix: &str, d: usize) -> Result<()> {
    p.insert(format!("{prefix}.g"), Tensor::filled(vec![d], 1.0))?;
    p.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]))?;
    Ok(())
}

fn apply_linear(tape: &mut Tape<'_>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = tape.param_named(&format!("{prefix}.w"))?;
    let b = tape.param_named(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn feed_forward(tape: &mut Tape<'_>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = apply_linear(tape, &format!("{prefix}.l1"), x)?;
    let h = tape.relu(h)?;
    apply_linear(tape, &format!("{prefix}.l2"), h)
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardNodes {
    /// Shared control logits, `N × embed_dim`.
    pub logits: NodeId,
    /// Action means, `N × M`.
    pub mu: NodeId,
    /// Action standard deviations, `N × M`.
    pub sigma: NodeId,
    /// State value, `1 × 1`.
    pub value: NodeId,
}

/// Gaussian policy over `N × M` actions plus the critic's value.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    /// Draws pre-clip actions `μ + σ·ε`, one standard normal per entry in
    /// row-major order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s * eps
            })
            .collect()
    }
}

/// Clips sampled actions into the controllable range.
pub fn clip_actions(actions: &[f64]) -> Vec<f64> {
    actions.iter().map(|a| a.clamp(0.0, 1.0)).collect()
}

/// Joint log-density of independent Gaussians and their total entropy.
pub fn log_prob_and_entropy(mu: &[f64], sigma: &[f64], actions: &[f64]) -> Result<(f64, f64)> {
    if mu.len() != sigma.len() || mu.len() != actions.len() {
        return Err(GleetError::Shape(format!(
            "mu {} / sigma {} / actions {}",
            mu.len(),
            sigma.len(),
            actions.len()
        )));
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let (mut lp, mut ent) = (0.0, 0.0);
    for ((&m, &s), &a) in mu.iter().zip(sigma).zip(actions) {
        // The tolerance absorbs rounding in the tanh rescaling at saturation.
        if !(SIGMA_RANGE.0 - 1e-12..=SIGMA_RANGE.1 + 1e-12).contains(&s) {
            return Err(GleetError::NonFinite(format!(
                "sigma {s} outside [{}, {}]",
                SIGMA_RANGE.0, SIGMA_RANGE.1
            )));
        }
        let z = (a - m) / s;
        lp += -0.5 * z * z - s.ln() - half_log_2pi;
        ent += 0.5 + half_log_2pi + s.ln();
    }
    Ok((lp, ent))
}

/// Network configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    pub config: NetworkConfig,
    pub params: ParameterSet,
}

impl PolicyNetwork {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    /// Forward pass without gradients.
    pub fn act(&self, state: &StateBundle) -> Result<PolicyOutput> {
        let mut tape = Tape::with_params(&self.params);
        let nodes = self.config.forward(&mut tape, state)?;
        let out = PolicyOutput {
            mu: tape.value(nodes.mu).to_vec(),
            sigma: tape.value(nodes.sigma).to_vec(),
            value: tape.value(nodes.value)[0],
        };
        if !(out.mu.iter().chain(&out.sigma).all(|v| v.is_finite()) && out.value.is_finite()) {
            return Err(GleetError::NonFinite("policy output".into()));
        }
        Ok(out)
    }
}

/// Provenance stored next to a checkpoint's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub seed: u64,
    pub problem_class: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        let expected = ck.header.network.init_params(0)?;
        let names_match = expected.len() == ck.params.len()
            && expected
                .iter()
                .all(|(_, name, t)| ck.params.get(name).is_some_and(|p| p.shape() == t.shape()));
        if !names_match {
            return Err(GleetError::config(
                "checkpoint parameters do not match its network configuration",
            ));
        }
        Ok(ck)
    }

    pub fn network(&self) -> PolicyNetwork {
        PolicyNetwork {
            config: self.header.network,
            params: self.params.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_state(n: usize, seed: u64) -> StateBundle {
        let mut rng = rng_for(seed, 7);
        let mut row = || -> Vec<f64> {
            let mut r: Vec<f64> = (0..NUM_FEATURES).map(|_| rng.random_range(0.0..1.0)).collect();
            r[8] = rng.random_range(-1.0..1.0);
            r
        };
        StateBundle {
            n,
            population: (0..n).flat_map(|_| row()).collect(),
            exploitation: row(),
            exploration: (0..n).flat_map(|_| row()).collect(),
        }
    }

    fn small() -> NetworkConfig {
        NetworkConfig {
            embed_dim: 16,
            heads: 4,
            ff_hidden: 32,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn golden_parameter_count() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.param_count(), 525_571);
        let p = cfg.init_params(1).unwrap();
        assert_eq!(p.num_scalars(), 525_571);
        let de = NetworkConfig {
            action_dim: 3,
            ..cfg
        };
        assert_eq!(de.init_params(1).unwrap().num_scalars(), 525_571 + 4 * 129);
        for (eet, mha) in [(false, true), (true, false), (false, false)] {
            let c = NetworkConfig {
                use_eet_embeddings: eet,
                use_mha: mha,
                ..small()
            };
            assert_eq!(c.init_params(3).unwrap().num_scalars(), c.param_count());
        }
    }

    #[test]
    fn zero_raw_output_maps_to_midpoints() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1]));
        let t = tape.tanh(x).unwrap();
        let s = tape.affine(t, 0.345, 0.355).unwrap();
        assert_eq!(tape.value(s)[0], 0.355);
    }

    #[test]
    fn output_ranges_and_shapes() {
        let cfg = NetworkConfig {
            action_dim: 3,
            ..small()
        };
        let net = PolicyNetwork::new(cfg, 2).unwrap();
        for n in [1, 5] {
            let out = net.act(&toy_state(n, n as u64)).unwrap();
            assert_eq!(out.mu.len(), 3 * n);
            assert!(out.mu.iter().all(|m| (0.0..=1.0).contains(m)));
            assert!(out.sigma.iter().all(|s| (0.01..=0.7).contains(s)));
        }
    }

    #[test]
    fn permutation_equivariance_all_ablations() {
        for (eet, mha) in [(true, true), (false, true), (true, false), (false, false)] {
            let cfg = NetworkConfig {
                use_eet_embeddings: eet,
                use_mha: mha,
                ..small()
            };
            let net = PolicyNetwork::new(cfg, 4).unwrap();
            let s = toy_state(6, 11);
            let perm = [3, 0, 5, 1, 4, 2];
            let a = net.act(&s).unwrap();
            let b = net.act(&s.permuted(&perm)).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                assert!((b.mu[i] - a.mu[p]).abs() < 1e-9);
                assert!((b.sigma[i] - a.sigma[p]).abs() < 1e-9);
            }
            assert!((a.value - b.value).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let net = PolicyNetwork::new(small(), 5).unwrap();
        let mut s = toy_state(3, 1);
        let first = s.population_row(0).to_vec();
        let first_e = s.exploration_row(0).to_vec();
        s.population[NUM_FEATURES..2 * NUM_FEATURES].copy_from_slice(&first);
        s.exploration[NUM_FEATURES..2 * NUM_FEATURES].copy_from_slice(&first_e);
        let out = net.act(&s).unwrap();
        assert_eq!(out.mu[0], out.mu[1]);
        assert_eq!(out.sigma[0], out.sigma[1]);
    }

    #[test]
    fn logits_are_non_negative() {
        let net = PolicyNetwork::new(small(), 6).unwrap();
        let mut tape = Tape::with_params(&net.params);
        let nodes = net.config.forward(&mut tape, &toy_state(4, 2)).unwrap();
        assert!(tape.value(nodes.logits).iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gaussian_identities() {
        let (lp, _) = log_prob_and_entropy(&[0.3], &[0.2], &[0.3]).unwrap();
        assert!((lp + 0.5 * (2.0 * PI * 0.04).ln()).abs() < 1e-12);
        let (_, e1) = log_prob_and_entropy(&[0.5], &[0.1], &[0.5]).unwrap();
        let (_, e2) = log_prob_and_entropy(&[0.5], &[0.2], &[0.5]).unwrap();
        assert!((e2 - e1 - 2f64.ln()).abs() < 1e-12);
        let (two, _) = log_prob_and_entropy(&[0.5, 0.5], &[0.1, 0.1], &[0.4, 0.6]).unwrap();
        let (one, _) = log_prob_and_entropy(&[0.5], &[0.1], &[0.4]).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
        assert!(log_prob_and_entropy(&[0.5], &[0.8], &[0.5]).is_err());
        assert!(log_prob_and_entropy(&[0.5], &[0.1], &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = PolicyNetwork::new(small(), 8).unwrap();
        let ck = Checkpoint {
            header: CheckpointHeader {
                network: net.config,
                seed: 8,
                problem_class: "rastrigin".into(),
                epoch: 2,
            },
            params: net.params.clone(),
        };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut wrong = ck.clone();
        wrong.header.network.ff_hidden = 8;
        assert!(Checkpoint::from_json(&wrong.to_json().unwrap()).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = NetworkConfig {
            heads: 3,
            ..NetworkConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
