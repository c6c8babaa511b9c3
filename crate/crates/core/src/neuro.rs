//! Multi-pathway Gaussian policy and multi-head critic.
//!
//! The policy has one shared trunk feeding N independent heads, each with a
//! state-independent trainable log standard deviation. Actions from all
//! heads are concatenated in declaration order. The critic has its own
//! trunk and one scalar value head per branch.

use std::f64::consts::{E, PI};
use std::path::Path;

use diffcore::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// `½ ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Tanh => tape.tanh(x)?,
            Activation::Relu => tape.relu(x)?,
            Activation::Identity => x,
        })
    }
}

/// Fully connected layer `act(x W + b)` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w = orthogonal(fan_in, fan_out, gain, rng);
        Self {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let z = tape.matmul(x, bound.var(self.weight))?;
        let z = tape.add_row(z, bound.var(self.bias))?;
        self.activation.apply(tape, z)
    }
}

/// Stack of dense layers applied in order.
pub fn forward_stack(layers: &[Dense], tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(tape, bound, x)?;
    }
    Ok(x)
}

/// `[rows, cols]` matrix with orthonormal rows or columns (whichever are
/// fewer), scaled by `gain`. Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (long, short) = (rows.max(cols), rows.min(cols));
    // `short` vectors of length `long`
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for q in &basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (s, q) in basis.iter().enumerate() {
        for (l, &x) in q.iter().enumerate() {
            let (r, c) = if rows >= cols { (l, s) } else { (s, l) };
            data[r * cols + c] = gain * x;
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// One action pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub name: String,
    pub action_dims: usize,
    pub clip_epsilon: f64,
    pub discount: f64,
    pub loss_weight: f64,
    pub init_sigma: f64,
    pub hidden_sizes: Vec<usize>,
}

impl BranchSpec {
    /// Knife-spacing pathway.
    pub fn width() -> Self {
        Self {
            name: "width".into(),
            action_dims: 1,
            clip_epsilon: 0.2,
            discount: 0.99,
            loss_weight: 0.5,
            init_sigma: 0.5,
            hidden_sizes: vec![32],
        }
    }

    /// DS/OS roll-gap pathway.
    pub fn thickness() -> Self {
        Self {
            name: "thickness".into(),
            action_dims: 2,
            clip_epsilon: 0.1,
            discount: 0.99,
            loss_weight: 0.5,
            init_sigma: 0.3,
            hidden_sizes: vec![32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("branch {}: {m}", self.name)));
        if self.action_dims == 0 {
            return bad("needs at least one action dimension");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip epsilon must lie in (0, 1)");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return bad("loss weight must be non-negative");
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return bad("initial sigma must be positive");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub state_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub branches: Vec<BranchSpec>,
}

impl NetworkConfig {
    pub fn new(state_dim: usize, branches: Vec<BranchSpec>) -> Self {
        Self {
            state_dim,
            trunk_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            branches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("at least one branch is required".into()));
        }
        if self.trunk_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        for b in &self.branches {
            b.validate()?;
        }
        if self.branches.iter().map(|b| b.loss_weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("branch loss weights must not all be zero".into()));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.branches.iter().map(|b| b.action_dims).sum()
    }

    /// Start offset of each branch inside the concatenated action vector.
    pub fn action_offsets(&self) -> Vec<usize> {
        self.branches
            .iter()
            .scan(0, |acc, b| {
                let o = *acc;
                *acc += b.action_dims;
                Some(o)
            })
            .collect()
    }
}

const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const POLICY_OUT_GAIN: f64 = 0.01;
const VALUE_OUT_GAIN: f64 = 1.0;

fn build_stack<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    input: usize,
    sizes: &[usize],
    rng: &mut R,
) -> (Vec<Dense>, usize) {
    let mut layers = Vec::with_capacity(sizes.len());
    let mut fan_in = input;
    for (i, &h) in sizes.iter().enumerate() {
        layers.push(Dense::new(
            params,
            &format!("{prefix}.{i}"),
            fan_in,
            h,
            HIDDEN_GAIN,
            Activation::Tanh,
            rng,
        ));
        fan_in = h;
    }
    (layers, fan_in)
}

fn state_tensor(states: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || states.is_empty() || states.len() % dim != 0 {
        return Err(Error::Dimension {
            what: "state vector",
            expected: dim,
            got: states.len(),
        });
    }
    Ok(Tensor::matrix(states.len() / dim, dim, states.to_vec())?)
}

#[derive(Debug, Clone, PartialEq)]
struct PolicyBranch {
    hidden: Vec<Dense>,
    mean: Dense,
    log_std: ParamId,
}

/// Tape handles for one branch's distribution over a batch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    /// `[batch, action_dims]`
    pub mean: Var,
    /// `[action_dims]`
    pub log_std: Var,
}

/// Per-branch means and standard deviations for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    config: NetworkConfig,
    params: ParamSet,
    trunk: Vec<Dense>,
    branches: Vec<PolicyBranch>,
}

impl PolicyNetwork {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let (trunk, feat) = build_stack(&mut params, "trunk", config.state_dim, &config.trunk_hidden, rng);
        let mut branches = Vec::with_capacity(config.branches.len());
        for spec in &config.branches {
            let prefix = format!("branch.{}", spec.name);
            let (hidden, h) = build_stack(&mut params, &prefix, feat, &spec.hidden_sizes, rng);
            let mean = Dense::new(
                &mut params,
                &format!("{prefix}.mean"),
                h,
                spec.action_dims,
                POLICY_OUT_GAIN,
                Activation::Identity,
                rng,
            );
            let log_std = params.add(
                format!("{prefix}.log_std"),
                Tensor::full(&[spec.action_dims], spec.init_sigma.ln()),
            );
            branches.push(PolicyBranch { hidden, mean, log_std });
        }
        Ok(Self {
            config,
            params,
            trunk,
            branches,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameter ids of branch `i`'s head, excluding the trunk.
    pub fn branch_param_ids(&self, i: usize) -> Vec<ParamId> {
        let b = &self.branches[i];
        let mut ids: Vec<ParamId> = b.hidden.iter().flat_map(|d| [d.weight, d.bias]).collect();
        ids.extend([b.mean.weight, b.mean.bias, b.log_std]);
        ids
    }

    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        self.trunk.iter().flat_map(|d| [d.weight, d.bias]).collect()
    }

    pub fn mean_layer(&self, i: usize) -> Dense {
        self.branches[i].mean
    }

    pub fn log_std_id(&self, i: usize) -> ParamId {
        self.branches[i].log_std
    }

    /// Batched forward pass; `states` is `[batch, state_dim]`.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, states: Var) -> Result<Vec<BranchOutput>> {
        let got = tape.shape(states).to_vec();
        if got.len() != 2 || got[1] != self.config.state_dim {
            return Err(Error::Dimension {
                what: "policy state",
                expected: self.config.state_dim,
                got: got.last().copied().unwrap_or(0),
            });
        }
        let feat = forward_stack(&self.trunk, tape, bound, states)?;
        self.branches
            .iter()
            .map(|b| {
                let h = forward_stack(&b.hidden, tape, bound, feat)?;
                Ok(BranchOutput {
                    mean: b.mean.forward(tape, bound, h)?,
                    log_std: bound.var(b.log_std),
                })
            })
            .collect()
    }

    pub fn forward(&self, state: &[f64]) -> Result<PolicyOutput> {
        if state.len() != self.config.state_dim {
            return Err(Error::Dimension {
                what: "policy state",
                expected: self.config.state_dim,
                got: state.len(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let s = tape.constant(state_tensor(state, self.config.state_dim)?);
        let outs = self.forward_tape(&mut tape, &bound, s)?;
        let mut means = Vec::with_capacity(outs.len());
        let mut stds = Vec::with_capacity(outs.len());
        for o in outs {
            means.push(tape.value(o.mean).data().to_vec());
            stds.push(tape.value(o.log_std).data().iter().map(|l| l.exp()).collect());
        }
        Ok(PolicyOutput { means, stds })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::capture(&self.params, &self.config)?.save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        Checkpoint::load(path)?.restore(&mut self.params, &self.config)
    }
}

/// `policy_forward` as a free function.
pub fn policy_forward(net: &PolicyNetwork, state: &[f64]) -> Result<PolicyOutput> {
    net.forward(state)
}

/// Draws `a ~ N(μ, diag σ²)` per branch and concatenates the branches.
pub fn sample_action<R: Rng + ?Sized>(means: &[Vec<f64>], stds: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    means
        .iter()
        .zip(stds)
        .flat_map(|(m, s)| m.iter().zip(s).map(|(m, s)| (*m, *s)).collect::<Vec<_>>())
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect()
}

fn check_sigmas(stds: &[Vec<f64>]) -> Result<()> {
    if stds.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config("standard deviation must be positive and finite".into()));
    }
    Ok(())
}

/// Diagonal-Gaussian log-density of `a` (concatenated), summed per branch.
pub fn log_prob(means: &[Vec<f64>], stds: &[Vec<f64>], a: &[f64]) -> Result<Vec<f64>> {
    check_sigmas(stds)?;
    let total: usize = means.iter().map(Vec::len).sum();
    if a.len() != total || means.len() != stds.len() || means.iter().zip(stds).any(|(m, s)| m.len() != s.len()) {
        return Err(Error::Dimension {
            what: "action vector",
            expected: total,
            got: a.len(),
        });
    }
    let mut off = 0;
    Ok(means
        .iter()
        .zip(stds)
        .map(|(m, s)| {
            let lp = m
                .iter()
                .zip(s)
                .zip(&a[off..off + m.len()])
                .map(|((m, s), a)| {
                    let z = (a - m) / s;
                    -0.5 * z * z - s.ln() - HALF_LN_2PI
                })
                .sum();
            off += m.len();
            lp
        })
        .collect())
}

/// Per-branch entropy `Σ ½ ln(2πe σ²)`.
pub fn entropy(stds: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_sigmas(stds)?;
    Ok(stds
        .iter()
        .map(|s| s.iter().map(|s| 0.5 * (2.0 * PI * E * s * s).ln()).sum())
        .collect())
}

/// Tape log-density of `actions: [batch, d]` under one branch, shape `[batch]`.
pub fn log_prob_tape(tape: &mut Tape, out: &BranchOutput, actions: Var) -> Result<Var> {
    let d = tape.shape(out.log_std)[0];
    let diff = tape.sub(actions, out.mean)?;
    let neg = tape.neg(out.log_std)?;
    let inv_sigma = tape.exp(neg)?;
    let z = tape.mul_row(diff, inv_sigma)?;
    let z2 = tape.square(z)?;
    let quad = tape.scale(z2, -0.5)?;
    let quad = tape.sum_last(quad)?;
    let ls = tape.sum(out.log_std)?;
    let lp = tape.sub(quad, ls)?;
    Ok(tape.add_scalar(lp, -HALF_LN_2PI * d as f64)?)
}

/// Tape entropy of one branch (scalar).
pub fn entropy_tape(tape: &mut Tape, log_std: Var) -> Result<Var> {
    let d = tape.shape(log_std)[0];
    let s = tape.sum(log_std)?;
    Ok(tape.add_scalar(s, d as f64 * 0.5 * (2.0 * PI * E).ln())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNetwork {
    config: NetworkConfig,
    params: ParamSet,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
}

impl CriticNetwork {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let (trunk, feat) = build_stack(&mut params, "critic", config.state_dim, &config.critic_hidden, rng);
        let heads = config
            .branches
            .iter()
            .map(|b| {
                Dense::new(
                    &mut params,
                    &format!("value.{}", b.name),
                    feat,
                    1,
                    VALUE_OUT_GAIN,
                    Activation::Identity,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            params,
            trunk,
            heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head(&self, i: usize) -> Dense {
        self.heads[i]
    }

    /// One `[batch]` value vector per branch.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, states: Var) -> Result<Vec<Var>> {
        let got = tape.shape(states).to_vec();
        if got.len() != 2 || got[1] != self.config.state_dim {
            return Err(Error::Dimension {
                what: "critic state",
                expected: self.config.state_dim,
                got: got.last().copied().unwrap_or(0),
            });
        }
        let batch = got[0];
        let feat = forward_stack(&self.trunk, tape, bound, states)?;
        self.heads
            .iter()
            .map(|h| {
                let v = h.forward(tape, bound, feat)?;
                Ok(tape.reshape(v, &[batch])?)
            })
            .collect()
    }

    /// Values for a row-major batch of states: `out[branch][row]`.
    pub fn values(&self, states: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let s = tape.constant(state_tensor(states, self.config.state_dim)?);
        let vs = self.forward_tape(&mut tape, &bound, s)?;
        Ok(vs.into_iter().map(|v| tape.value(v).data().to_vec()).collect())
    }

    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.config.state_dim {
            return Err(Error::Dimension {
                what: "critic state",
                expected: self.config.state_dim,
                got: state.len(),
            });
        }
        Ok(self.values(state)?.into_iter().map(|v| v[0]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::capture(&self.params, &self.config)?.save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        Checkpoint::load(path)?.restore(&mut self.params, &self.config)
    }
}

/// `critic_forward` as a free function.
pub fn critic_forward(net: &CriticNetwork, state: &[f64]) -> Result<Vec<f64>> {
    net.forward(state)
}
