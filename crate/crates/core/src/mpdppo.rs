//! Multi-pathway PPO: per-branch advantages, discounts, clip ranges and
//! loss weights over a shared policy trunk.

use std::path::Path;

use diffcore::{clip_grad_norm, Adam, AdamConfig, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envloop::{Env, ProcessModel, RewardTerms};
use crate::error::{io_error, Error, Result};
use crate::neuro::{
    entropy_tape, log_prob, log_prob_tape, sample_action, BranchSpec, CriticNetwork, NetworkConfig,
    PolicyNetwork,
};

/// One environment interaction with per-branch old log-probs and values.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Unclamped policy sample.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Episode ended by reaching both tolerances.
    pub success: bool,
    /// Clipped reward of each objective alone (width, thickness).
    pub objective_rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

/// On-policy storage, cleared after every update.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    transitions: Vec<Transition>,
    /// Exclusive end index of each finished episode.
    episode_ends: Vec<usize>,
    /// Finished episodes needed before an update.
    threshold: usize,
}

impl RolloutBuffer {
    pub fn new(threshold: usize) -> Self {
        Self {
            transitions: Vec::new(),
            episode_ends: Vec::new(),
            threshold: threshold.max(1),
        }
    }

    pub fn push(&mut self, t: Transition) {
        let done = t.done;
        self.transitions.push(t);
        if done {
            self.episode_ends.push(self.transitions.len());
        }
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn episode_ends(&self) -> &[usize] {
        &self.episode_ends
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.episode_ends.len() >= self.threshold
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
        self.episode_ends.clear();
    }
}

/// `R_t = r_t + γ R_{t+1}`, restarting after every `done`.
pub fn discounted_returns(rewards: &[f64], dones: &[bool], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Empty("rewards"));
    }
    if dones.len() != rewards.len() {
        return Err(Error::Dimension {
            what: "done flags",
            expected: rewards.len(),
            got: dones.len(),
        });
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            acc = 0.0;
        }
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Generalized advantage estimates and value targets for one branch.
///
/// `values[t]` is `V(s_t)`; `V(s_{t+1})` is read from `values[t + 1]`,
/// or from `last_value` at the end of the sequence, and is zero on `done`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
    last_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for (what, got) in [("values", values.len()), ("done flags", dones.len())] {
        if got != n {
            return Err(Error::Dimension {
                what,
                expected: n,
                got,
            });
        }
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// `(x - mean) / (population std + eps)`
pub fn standardize(x: &[f64], eps: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let d = var.sqrt() + eps;
    x.iter().map(|v| (v - mean) / d).collect()
}

/// Per-sample clipped surrogate objective `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// What the advantage standardization is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Standardization {
    /// GAE advantages, per branch over the whole buffer.
    #[default]
    Advantages,
    /// Monte-Carlo discounted returns; these become the value targets and
    /// advantages are taken against them.
    Returns,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub standardize_eps: f64,
    pub standardization: Standardization,
    /// Finished episodes collected before each update.
    pub update_episodes: usize,
    /// Bootstrap `V(s_{t+1})` after a successful termination instead of 0.
    pub bootstrap_success: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 10,
            minibatch: 64,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            standardize_eps: 1e-8,
            standardization: Standardization::Advantages,
            update_episodes: 1,
            bootstrap_success: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if self.epochs == 0 || self.minibatch == 0 || self.update_episodes == 0 {
            return bad("epochs, minibatch and update_episodes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if [self.value_coef, self.entropy_coef, self.standardize_eps]
            .iter()
            .any(|c| !(*c >= 0.0 && c.is_finite()))
        {
            return bad("coefficients must be non-negative");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Agent and reward configurations compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    /// Width and thickness branches, per-branch values and clip ranges.
    MpdPpo,
    /// One 3-dimensional head, one clip range, one value.
    SingleNet,
    /// Two branches with a shared value/advantage and one clip range.
    MultibranchUniform,
    /// Full agent with the same clip range on both branches.
    MpdPpoUniformClip,
    /// Full agent trained on reward variant 1..=4.
    Reward(u8),
}

pub const UNIFORM_CLIP: f64 = 0.15;

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::MpdPpo,
        Variant::SingleNet,
        Variant::MultibranchUniform,
        Variant::MpdPpoUniformClip,
        Variant::Reward(1),
        Variant::Reward(2),
        Variant::Reward(3),
        Variant::Reward(4),
    ];

    pub fn name(self) -> String {
        match self {
            Variant::MpdPpo => "mpd-ppo".into(),
            Variant::SingleNet => "ppo-single-net".into(),
            Variant::MultibranchUniform => "ppo-multibranch-uniform-clip".into(),
            Variant::MpdPpoUniformClip => "mpd-ppo-uniform-clip".into(),
            Variant::Reward(n) => format!("reward-{n}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn reward_terms(self) -> RewardTerms {
        match self {
            Variant::Reward(n) => RewardTerms::variant(n as usize).expect("variant in range"),
            _ => RewardTerms::default(),
        }
    }

    /// Policy layout and value sharing for this variant, starting from the
    /// configured width and thickness branches.
    pub fn layout(
        self,
        state_dim: usize,
        width: &BranchSpec,
        thickness: &BranchSpec,
        trunk_hidden: &[usize],
        critic_hidden: &[usize],
    ) -> AgentLayout {
        let net = |branches| NetworkConfig {
            state_dim,
            trunk_hidden: trunk_hidden.to_vec(),
            critic_hidden: critic_hidden.to_vec(),
            branches,
        };
        match self {
            Variant::MpdPpo | Variant::Reward(_) => AgentLayout {
                network: net(vec![width.clone(), thickness.clone()]),
                shared_value: false,
                objective_rewards: true,
            },
            Variant::SingleNet => AgentLayout {
                network: net(vec![BranchSpec {
                    name: "joint".into(),
                    action_dims: width.action_dims + thickness.action_dims,
                    loss_weight: 1.0,
                    ..width.clone()
                }]),
                shared_value: true,
                objective_rewards: false,
            },
            Variant::MultibranchUniform => AgentLayout {
                network: net(vec![
                    width.clone(),
                    BranchSpec {
                        clip_epsilon: width.clip_epsilon,
                        discount: width.discount,
                        ..thickness.clone()
                    },
                ]),
                shared_value: true,
                objective_rewards: false,
            },
            Variant::MpdPpoUniformClip => AgentLayout {
                network: net(vec![
                    BranchSpec {
                        clip_epsilon: UNIFORM_CLIP,
                        ..width.clone()
                    },
                    BranchSpec {
                        clip_epsilon: UNIFORM_CLIP,
                        ..thickness.clone()
                    },
                ]),
                shared_value: false,
                objective_rewards: true,
            },
        }
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.name()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Variant::parse(&s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentLayout {
    pub network: NetworkConfig,
    /// One value head (and one advantage) for all branches.
    pub shared_value: bool,
    /// Value head `i` learns from objective `i`'s own reward instead of
    /// the aggregated one.
    pub objective_rewards: bool,
}

impl AgentLayout {
    fn critic_config(&self) -> NetworkConfig {
        let mut c = self.network.clone();
        if self.shared_value {
            c.branches = vec![BranchSpec {
                name: "shared".into(),
                ..c.branches[0].clone()
            }];
        }
        c
    }
}

/// Per-update diagnostics, averaged over minibatches.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio left `[1-ε, 1+ε]`, per branch.
    pub clip_fraction: Vec<f64>,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Advantages and value targets over a buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    /// `[branch][t]`
    pub advantages: Vec<Vec<f64>>,
    /// `[value head][t]`
    pub returns: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    layout: AgentLayout,
    ppo: PpoConfig,
    policy: PolicyNetwork,
    critic: CriticNetwork,
    policy_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(layout: AgentLayout, ppo: PpoConfig, seed: u64) -> Result<Self> {
        ppo.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyNetwork::new(layout.network.clone(), &mut rng)?;
        let critic = CriticNetwork::new(layout.critic_config(), &mut rng)?;
        let adam = AdamConfig {
            lr: ppo.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            policy_opt: Adam::new(policy.params(), adam),
            critic_opt: Adam::new(critic.params(), adam),
            layout,
            ppo,
            policy,
            critic,
            rng,
        })
    }

    pub fn layout(&self) -> &AgentLayout {
        &self.layout
    }

    pub fn ppo(&self) -> &PpoConfig {
        &self.ppo
    }

    pub fn policy(&self) -> &PolicyNetwork {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut PolicyNetwork {
        &mut self.policy
    }

    pub fn critic(&self) -> &CriticNetwork {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut CriticNetwork {
        &mut self.critic
    }

    fn branches(&self) -> &[BranchSpec] {
        &self.layout.network.branches
    }

    fn head_of(&self, branch: usize) -> usize {
        if self.layout.shared_value {
            0
        } else {
            branch
        }
    }

    /// Samples an action; returns it with per-branch log-probs and the
    /// per-head values of `state`.
    pub fn act(&mut self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let out = self.policy.forward(state)?;
        let a = sample_action(&out.means, &out.stds, &mut self.rng);
        let lp = log_prob(&out.means, &out.stds, &a)?;
        let v = self.critic.forward(state)?;
        Ok((a, lp, v))
    }

    /// Mean action.
    pub fn greedy(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.policy.forward(state)?.means.concat())
    }

    /// Returns, advantages and value targets for the buffer.
    pub fn advantages(&self, buffer: &RolloutBuffer) -> Result<AdvantageBatch> {
        let ts = buffer.transitions();
        if ts.is_empty() {
            return Err(Error::Empty("rollout buffer"));
        }
        let mut rewards = vec![0.0; ts.len()];
        let dones: Vec<bool> = ts.iter().map(|t| t.done).collect();
        let critic_branches = &self.critic.config().branches;
        let last = ts.last().expect("non-empty");
        let last_values = if last.done {
            vec![0.0; critic_branches.len()]
        } else {
            self.critic.forward(&last.next_state)?
        };
        let eps = self.ppo.standardize_eps;
        let mut head_adv = Vec::new();
        let mut returns = Vec::new();
        let boot: Vec<usize> = if self.ppo.bootstrap_success {
            (0..ts.len()).filter(|&i| ts[i].success).collect()
        } else {
            Vec::new()
        };
        let boot_values: Vec<Vec<f64>> = boot
            .iter()
            .map(|&i| self.critic.forward(&ts[i].next_state))
            .collect::<Result<_>>()?;
        let own = self.layout.objective_rewards && !self.layout.shared_value;
        for (h, spec) in critic_branches.iter().enumerate() {
            let values: Vec<f64> = ts.iter().map(|t| t.values[h]).collect();
            for (r, t) in rewards.iter_mut().zip(ts) {
                *r = if own { t.objective_rewards[h] } else { t.reward };
            }
            for (&i, v) in boot.iter().zip(&boot_values) {
                rewards[i] += spec.discount * v[h];
            }
            let (adv, ret) = match self.ppo.standardization {
                Standardization::Returns => {
                    let g = standardize(&discounted_returns(&rewards, &dones, spec.discount)?, eps);
                    (g.iter().zip(&values).map(|(g, v)| g - v).collect(), g)
                }
                _ => gae_advantages(&rewards, &values, &dones, spec.discount, self.ppo.gae_lambda, last_values[h])?,
            };
            head_adv.push(adv);
            returns.push(ret);
        }
        let advantages = (0..self.branches().len())
            .map(|i| {
                let a = &head_adv[self.head_of(i)];
                match self.ppo.standardization {
                    Standardization::Advantages => standardize(a, eps),
                    _ => a.clone(),
                }
            })
            .collect();
        Ok(AdvantageBatch { advantages, returns })
    }

    /// Builds the total loss of one minibatch on `tape`. Returns the loss,
    /// its parts and per-branch (ratio, clipped-surrogate) values.
    fn minibatch_loss(
        &self,
        tape: &mut Tape,
        pb: &diffcore::Bound,
        cb: &diffcore::Bound,
        ts: &[Transition],
        adv: &AdvantageBatch,
        idx: &[usize],
    ) -> Result<MinibatchLoss> {
        let s_dim = self.layout.network.state_dim;
        let b = idx.len();
        let states: Vec<f64> = idx.iter().flat_map(|&i| ts[i].state.iter().copied()).collect();
        let states = tape.constant(Tensor::matrix(b, s_dim, states)?);
        let outs = self.policy.forward_tape(tape, pb, states)?;
        let offsets = self.layout.network.action_offsets();
        let mut surrogate = None;
        let mut entropy = None;
        let mut ratios = Vec::new();
        for (i, (spec, out)) in self.branches().iter().zip(&outs).enumerate() {
            let d = spec.action_dims;
            let acts: Vec<f64> = idx
                .iter()
                .flat_map(|&j| ts[j].action[offsets[i]..offsets[i] + d].iter().copied())
                .collect();
            let acts = tape.constant(Tensor::matrix(b, d, acts)?);
            let lp = log_prob_tape(tape, out, acts)?;
            let old = tape.constant(Tensor::vector(idx.iter().map(|&j| ts[j].log_probs[i]).collect()));
            let diff = tape.sub(lp, old)?;
            let ratio = tape.exp(diff)?;
            let a = tape.constant(Tensor::vector(idx.iter().map(|&j| adv.advantages[i][j]).collect()));
            let unclipped = tape.mul(ratio, a)?;
            let eps = spec.clip_epsilon;
            let clipped = tape.clip(ratio, 1.0 - eps, 1.0 + eps)?;
            let clipped = tape.mul(clipped, a)?;
            let obj = tape.min(unclipped, clipped)?;
            let mean = tape.mean(obj)?;
            let term = tape.scale(mean, -spec.loss_weight)?;
            surrogate = Some(match surrogate {
                None => term,
                Some(s) => tape.add(s, term)?,
            });
            let ent = entropy_tape(tape, out.log_std)?;
            entropy = Some(match entropy {
                None => ent,
                Some(e) => tape.add(e, ent)?,
            });
            ratios.push((ratio, obj));
        }
        let values = self.critic.forward_tape(tape, cb, states)?;
        let mut value_loss = None;
        for (h, v) in values.iter().enumerate() {
            let g = tape.constant(Tensor::vector(idx.iter().map(|&j| adv.returns[h][j]).collect()));
            let e = tape.sub(*v, g)?;
            let e2 = tape.square(e)?;
            let m = tape.mean(e2)?;
            value_loss = Some(match value_loss {
                None => m,
                Some(l) => tape.add(l, m)?,
            });
        }
        let value_loss = tape.scale(value_loss.expect("at least one head"), 1.0 / values.len() as f64)?;
        let surrogate = surrogate.expect("at least one branch");
        let entropy = entropy.expect("at least one branch");
        let vf = tape.scale(value_loss, self.ppo.value_coef)?;
        let ent = tape.scale(entropy, -self.ppo.entropy_coef)?;
        let total = tape.add(surrogate, vf)?;
        let total = tape.add(total, ent)?;
        Ok(MinibatchLoss {
            total,
            surrogate,
            value_loss,
            entropy,
            ratios,
        })
    }

    /// Per-branch clipped-surrogate objective values of a minibatch under
    /// the current policy: `out[branch][sample]`.
    pub fn surrogate_terms(&self, buffer: &RolloutBuffer, adv: &AdvantageBatch, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pb = self.policy.params().bind_frozen(&mut tape);
        let cb = self.critic.params().bind_frozen(&mut tape);
        let l = self.minibatch_loss(&mut tape, &pb, &cb, buffer.transitions(), adv, idx)?;
        Ok(l.ratios.iter().map(|(_, o)| tape.value(*o).data().to_vec()).collect())
    }

    /// Gradients of the surrogate part of the loss only, accumulated into
    /// the policy parameters (left for inspection; nothing is stepped).
    pub fn surrogate_gradients(&mut self, buffer: &RolloutBuffer, idx: &[usize]) -> Result<()> {
        let adv = self.advantages(buffer)?;
        let mut tape = Tape::new();
        let pb = self.policy.params().bind(&mut tape);
        let cb = self.critic.params().bind_frozen(&mut tape);
        let l = self.minibatch_loss(&mut tape, &pb, &cb, buffer.transitions(), &adv, idx)?;
        tape.backward(l.surrogate)?;
        self.policy.params_mut().zero_grad();
        self.policy.params_mut().accumulate_grads(&tape, &pb);
        Ok(())
    }

    /// K epochs of shuffled minibatch updates on a ready buffer, which is
    /// then cleared.
    pub fn update(&mut self, buffer: &mut RolloutBuffer) -> Result<UpdateStats> {
        if !buffer.is_ready() {
            return Err(Error::BufferNotReady(format!(
                "{} of {} episodes collected",
                buffer.episode_ends().len(),
                buffer.threshold
            )));
        }
        let adv = self.advantages(buffer)?;
        let ts = buffer.transitions();
        let n = ts.len();
        let mut order: Vec<usize> = (0..n).collect();
        let n_branches = self.branches().len();
        let mut stats = UpdateStats {
            clip_fraction: vec![0.0; n_branches],
            ..UpdateStats::default()
        };
        let mut clipped_counts = vec![0usize; n_branches];
        let mut samples = 0usize;
        for epoch in 0..self.ppo.epochs {
            order.shuffle(&mut self.rng);
            for (mb, idx) in order.chunks(self.ppo.minibatch).enumerate() {
                let mut tape = Tape::new();
                let pb = self.policy.params().bind(&mut tape);
                let cb = self.critic.params().bind(&mut tape);
                let l = self.minibatch_loss(&mut tape, &pb, &cb, ts, &adv, idx)?;
                let total = tape.value(l.total).data()[0];
                if !total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "ppo loss {total} at epoch {epoch}, minibatch {mb} (surrogate {}, value {}, entropy {})",
                        tape.value(l.surrogate).data()[0],
                        tape.value(l.value_loss).data()[0],
                        tape.value(l.entropy).data()[0],
                    )));
                }
                for (i, (ratio, _)) in l.ratios.iter().enumerate() {
                    let eps = self.branches()[i].clip_epsilon;
                    clipped_counts[i] += tape
                        .value(*ratio)
                        .data()
                        .iter()
                        .filter(|r| (**r - 1.0).abs() > eps)
                        .count();
                }
                samples += idx.len();
                stats.policy_loss += tape.value(l.surrogate).data()[0];
                stats.value_loss += tape.value(l.value_loss).data()[0];
                stats.entropy += tape.value(l.entropy).data()[0];
                tape.backward(l.total)?;
                self.policy.params_mut().accumulate_grads(&tape, &pb);
                self.critic.params_mut().accumulate_grads(&tape, &cb);
                let norm = {
                    let (p, c) = (&mut self.policy, &mut self.critic);
                    clip_grad_norm(&mut [p.params_mut(), c.params_mut()], self.ppo.max_grad_norm)
                };
                stats.grad_norm += norm;
                self.policy_opt.step(self.policy.params_mut())?;
                self.critic_opt.step(self.critic.params_mut())?;
                stats.minibatches += 1;
            }
        }
        let m = stats.minibatches.max(1) as f64;
        stats.policy_loss /= m;
        stats.value_loss /= m;
        stats.entropy /= m;
        stats.grad_norm /= m;
        for (f, c) in stats.clip_fraction.iter_mut().zip(clipped_counts) {
            *f = c as f64 / samples.max(1) as f64;
        }
        buffer.clear();
        Ok(stats)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        self.policy.save(&dir.join("policy.json"))?;
        self.critic.save(&dir.join("critic.json"))
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        self.policy.load(&dir.join("policy.json"))?;
        self.critic.load(&dir.join("critic.json"))
    }
}

struct MinibatchLoss {
    total: Var,
    surrogate: Var,
    value_loss: Var,
    entropy: Var,
    ratios: Vec<(Var, Var)>,
}

/// Each objective's component sum, clipped like the total.
pub fn objective_rewards(info: &crate::envloop::StepInfo, cfg: &crate::envloop::RewardConfig) -> Vec<f64> {
    info.components
        .iter()
        .map(|c| c.sum().clamp(cfg.total_clip[0], cfg.total_clip[1]))
        .collect()
}

/// Learning-curve row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub episode: usize,
    pub total_reward: f64,
    /// Step at which both objectives were within tolerance, or the episode
    /// length when they never were.
    pub optimize_step: usize,
    pub width_err: f64,
    pub thickness_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

const EVAL_SEED_OFFSET: u64 = 1 << 32;

/// Reset seed of training (or evaluation) episode `i` of run `seed`.
pub fn episode_seed(seed: u64, i: usize, eval: bool) -> u64 {
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64);
    if eval {
        base.wrapping_add(EVAL_SEED_OFFSET)
    } else {
        base
    }
}

/// One episode under `policy`; returns its record and step infos.
pub fn run_episode<M, F>(
    env: &mut Env<M>,
    reset_seed: u64,
    mut policy: F,
) -> Result<(EpisodeRecord, Vec<crate::envloop::StepInfo>)>
where
    M: ProcessModel,
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut s = env.reset(reset_seed)?;
    let max = env.episode().max_steps;
    let mut infos = Vec::with_capacity(max);
    let mut total = 0.0;
    let mut optimize_step = max;
    loop {
        let a = policy(&s)?;
        let (next, r, done, info) = env.step(&a)?;
        total += r;
        if info.success {
            optimize_step = optimize_step.min(info.step);
        }
        let finished = done;
        infos.push(info);
        s = next;
        if finished {
            break;
        }
    }
    let last = infos.last().expect("at least one step");
    Ok((
        EpisodeRecord {
            seed: reset_seed,
            episode: 0,
            total_reward: total,
            optimize_step,
            width_err: last.width_error,
            thickness_err: last.thickness_error,
        },
        infos,
    ))
}

/// Greedy-policy evaluation over fresh episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub optimize_steps: Vec<usize>,
    pub mean_optimize_step: f64,
    pub success_rate: f64,
    /// Step infos of the first evaluation episode.
    pub first_trace: Vec<crate::envloop::StepInfo>,
}

pub fn evaluate<M, F>(env: &mut Env<M>, episodes: usize, seed: u64, mut policy: F) -> Result<Evaluation>
where
    M: ProcessModel,
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let max = env.episode().max_steps;
    let mut steps = Vec::with_capacity(episodes);
    let mut first_trace = Vec::new();
    for i in 0..episodes {
        let (rec, infos) = run_episode(env, episode_seed(seed, i, true), &mut policy)?;
        steps.push(rec.optimize_step);
        if i == 0 {
            first_trace = infos;
        }
    }
    let mean = steps.iter().sum::<usize>() as f64 / episodes as f64;
    let success = steps.iter().filter(|&&s| s < max).count() as f64 / episodes as f64;
    Ok(Evaluation {
        optimize_steps: steps,
        mean_optimize_step: mean,
        success_rate: success,
        first_trace,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateStats>,
    /// Policy parameters of the episode with the highest total reward.
    pub best_episode: usize,
    pub best_policy: PolicyNetwork,
}

/// Interaction, storage and update loop; one update per
/// `update_episodes` finished episodes.
pub fn train<M: ProcessModel>(env: &mut Env<M>, agent: &mut Agent, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut buffer = RolloutBuffer::new(agent.ppo.update_episodes);
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut updates = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0, agent.policy.clone());
    for ep in 0..cfg.episodes {
        let mut s = env.reset(episode_seed(cfg.seed, ep, false))?;
        let max = env.episode().max_steps;
        let mut total = 0.0;
        let mut optimize_step = max;
        let policy_before = agent.policy.clone();
        loop {
            let (a, lp, v) = agent.act(&s)?;
            let (next, r, done, info) = env.step(&a)?;
            total += r;
            if info.success {
                optimize_step = optimize_step.min(info.step);
            }
            buffer.push(Transition {
                state: std::mem::take(&mut s),
                action: a,
                reward: r,
                next_state: next.clone(),
                done,
                success: info.success,
                objective_rewards: objective_rewards(&info, env.reward_config()),
                log_probs: lp,
                values: v,
            });
            s = next;
            if done {
                curve.push(EpisodeRecord {
                    seed: cfg.seed,
                    episode: ep,
                    total_reward: total,
                    optimize_step,
                    width_err: info.width_error,
                    thickness_err: info.thickness_error,
                });
                break;
            }
        }
        if total > best.0 {
            best = (total, ep, policy_before);
        }
        if buffer.is_ready() {
            updates.push(agent.update(&mut buffer)?);
        }
    }
    Ok(TrainOutcome {
        curve,
        updates,
        best_episode: best.1,
        best_policy: best.2,
    })
}

pub fn write_curve(path: &Path, rows: &[EpisodeRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_error(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_error(path))?;
    Ok(())
}

/// Uniform random actions in `[-1, 1]^n`.
pub fn random_policy(n: usize, seed: u64) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_| Ok((0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
}
