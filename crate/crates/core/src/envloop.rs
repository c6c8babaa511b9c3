//! Set-point tracking environment around a process model.
//!
//! Actions are increments of the knife spacing and the two roll gaps. The
//! process model (the trained forecasters, or the true plant) returns the
//! next width and thickness, and the reward combines error, progress,
//! action and steady-state terms per objective.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, Error, Result};
use crate::forecast::{Forecaster, THICKNESS_TOLERANCE, WIDTH_TOLERANCE};
use crate::plantgen::{plant_step, PlantParams, PlantState, Setpoints};

pub const N_OBJECTIVES: usize = 2;
pub const N_ACTUATORS: usize = 3;
const MAX_RESET_TRIES: usize = 10_000;

/// Actuators (knife, DS gap, OS gap) owned by each objective.
pub const OBJECTIVE_ACTUATORS: [&[usize]; N_OBJECTIVES] = [&[0], &[1, 2]];

/// Unit of the action-penalty difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyUnits {
    /// Set-point change divided by the actuator's action scale.
    #[default]
    Scaled,
    Millimetres,
}

/// Which reward terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTerms {
    pub error: bool,
    pub progress: bool,
    pub action: bool,
    pub steady: bool,
}

impl Default for RewardTerms {
    fn default() -> Self {
        Self {
            error: true,
            progress: true,
            action: true,
            steady: true,
        }
    }
}

impl RewardTerms {
    /// Reward variants 1 to 4: error only, + progress, + action, full.
    pub fn variant(n: usize) -> Result<Self> {
        if !(1..=4).contains(&n) {
            return Err(Error::Config(format!("reward variant {n} outside 1..=4")));
        }
        Ok(Self {
            error: true,
            progress: n >= 2,
            action: n >= 3,
            steady: n >= 4,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub error_coef: f64,
    pub progress_coef: f64,
    pub action_coef: f64,
    pub steady_coef: f64,
    pub steady_threshold: f64,
    /// Width and thickness aggregation weights.
    pub weights: [f64; N_OBJECTIVES],
    pub total_clip: [f64; 2],
    pub terms: RewardTerms,
    /// Apply the steady-state term only when `e < steady_threshold`.
    pub gate_steady: bool,
    pub penalty_units: PenaltyUnits,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            error_coef: 2.0,
            progress_coef: 0.3,
            action_coef: 0.05,
            steady_coef: 0.5,
            steady_threshold: 1.0,
            weights: [0.5, 0.5],
            total_clip: [-5.0, 5.0],
            terms: RewardTerms::default(),
            gate_steady: true,
            penalty_units: PenaltyUnits::Scaled,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let coefs = [
            self.error_coef,
            self.progress_coef,
            self.action_coef,
            self.steady_coef,
            self.steady_threshold,
        ];
        if coefs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("reward coefficients must be finite and non-negative".into()));
        }
        if !(self.total_clip[0] < self.total_clip[1]) {
            return Err(Error::Config(format!(
                "reward clip bounds {:?} must be increasing",
                self.total_clip
            )));
        }
        normalize_weights(self.weights)?;
        Ok(())
    }

    pub fn set_weights(&mut self, weights: [f64; N_OBJECTIVES]) -> Result<()> {
        self.weights = normalize_weights(weights)?;
        Ok(())
    }
}

fn normalize_weights(w: [f64; N_OBJECTIVES]) -> Result<[f64; N_OBJECTIVES]> {
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("objective weights {w:?} must be non-negative")));
    }
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        return Err(Error::Config("objective weights must not all be zero".into()));
    }
    Ok(w.map(|v| v / s))
}

/// Tracking status of one quality objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveState {
    pub name: &'static str,
    pub y: f64,
    pub target: f64,
    pub tolerance: f64,
    /// `|y - target| / tolerance`
    pub e: f64,
    /// Smallest `e` before the current step.
    pub e_best: f64,
    /// Current and previous control values of this objective's actuators.
    pub controls: Vec<f64>,
    pub prev_controls: Vec<f64>,
}

impl ObjectiveState {
    pub fn signed_error(&self) -> f64 {
        (self.y - self.target) / self.tolerance
    }

    pub fn within_tolerance(&self) -> bool {
        (self.y - self.target).abs() <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub error: f64,
    pub progress: f64,
    pub action: f64,
    pub steady: f64,
}

impl RewardComponents {
    pub fn sum(&self) -> f64 {
        self.error + self.progress + self.action + self.steady
    }
}

/// Error, progress, action-penalty and steady-state terms of one
/// objective. Disabled terms are zero.
pub fn reward_components(obj: &ObjectiveState, cfg: &RewardConfig) -> RewardComponents {
    let t = cfg.terms;
    let e = obj.e;
    let error = if t.error { cfg.error_coef * (-e).exp() } else { 0.0 };
    let progress = if t.progress {
        cfg.progress_coef * (obj.e_best - e).tanh()
    } else {
        0.0
    };
    let action = if t.action {
        let d2: f64 = obj
            .controls
            .iter()
            .zip(&obj.prev_controls)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        -cfg.action_coef * d2
    } else {
        0.0
    };
    let steady = if t.steady && (!cfg.gate_steady || e < cfg.steady_threshold) {
        cfg.steady_coef * (cfg.steady_threshold - e)
    } else {
        0.0
    };
    RewardComponents {
        error,
        progress,
        action,
        steady,
    }
}

/// Weighted sum over objectives, clipped to the configured range.
pub fn total_reward(per_objective: &[RewardComponents], cfg: &RewardConfig) -> Result<f64> {
    if per_objective.len() != N_OBJECTIVES {
        return Err(Error::Dimension {
            what: "reward components",
            expected: N_OBJECTIVES,
            got: per_objective.len(),
        });
    }
    let w = normalize_weights(cfg.weights)?;
    let raw: f64 = per_objective.iter().zip(w).map(|(c, w)| w * c.sum()).sum();
    Ok(raw.clamp(cfg.total_clip[0], cfg.total_clip[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub target_width: f64,
    pub target_thickness: f64,
    pub max_steps: usize,
    /// mm per unit action for knife, DS gap, OS gap.
    pub action_scale: [f64; N_ACTUATORS],
    pub history: usize,
    /// Initial-condition sampling: knife offset magnitude range (mm).
    pub knife_offset: [f64; 2],
    /// Mean roll-gap offset magnitude range (mm).
    pub gap_offset: [f64; 2],
    /// Largest initial DS/OS difference (mm).
    pub gap_skew: f64,
    /// Episodes must start at least this far from one of the targets.
    pub min_initial_error: [f64; N_OBJECTIVES],
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            target_width: 480.0,
            target_thickness: 3.0,
            max_steps: 100,
            action_scale: [2.0, 0.05, 0.05],
            history: 4,
            knife_offset: [0.0, 15.0],
            gap_offset: [0.0, 0.4],
            gap_skew: 0.05,
            min_initial_error: [5.0, 0.25],
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.action_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("action scales must be positive".into()));
        }
        for r in [self.knife_offset, self.gap_offset] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("offset range {r:?} must satisfy 0 <= lo <= hi")));
            }
        }
        if self.gap_skew < 0.0 {
            return Err(Error::Config("gap skew must be non-negative".into()));
        }
        Ok(())
    }

    /// `Σ_obj (3 + H) + actuators`
    pub fn state_dim(&self) -> usize {
        N_OBJECTIVES * (3 + self.history) + N_ACTUATORS
    }

    pub fn targets(&self) -> [f64; N_OBJECTIVES] {
        [self.target_width, self.target_thickness]
    }
}

/// Next-step width and thickness under given set-points.
pub trait ProcessModel {
    /// Puts the process at `sp` and returns the current (width, thickness).
    fn reset(&mut self, sp: Setpoints, rng: &mut ChaCha8Rng) -> Result<(f64, f64)>;
    /// Applies `sp` for one step and returns the resulting (width, thickness).
    fn step(&mut self, sp: Setpoints, rng: &mut ChaCha8Rng) -> Result<(f64, f64)>;
}

/// Runs the plant at `sp` for `steps` rows, returning the recorded feature
/// rows (oldest first) and the final state.
fn warm_up(params: &PlantParams, sp: Setpoints, steps: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, PlantState) {
    let mut state = params.steady_state(sp);
    let mut rows = Vec::new();
    for _ in 0..steps {
        rows.extend(state.feature_row());
        state = plant_step(&state, params, rng);
    }
    (rows, state)
}

/// The true plant as a process model.
#[derive(Debug, Clone)]
pub struct PlantProcess {
    params: PlantParams,
    warmup: usize,
    state: Option<PlantState>,
}

impl PlantProcess {
    pub fn new(params: PlantParams, warmup: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            warmup,
            state: None,
        })
    }

    pub fn state(&self) -> Option<&PlantState> {
        self.state.as_ref()
    }
}

impl ProcessModel for PlantProcess {
    fn reset(&mut self, sp: Setpoints, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let (_, state) = warm_up(&self.params, sp, self.warmup, rng);
        let out = (state.width, state.thickness);
        self.state = Some(state);
        Ok(out)
    }

    fn step(&mut self, sp: Setpoints, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Env("plant stepped before reset".into()))?;
        state.setpoints = sp;
        *state = plant_step(state, &self.params, rng);
        Ok((state.width, state.thickness))
    }
}

/// Trained width and thickness forecasters standing in for the plant.
///
/// The input window is seeded by a plant warm-up at the initial
/// set-points. Each step shifts the window by one row whose controls are
/// the new set-points and whose auxiliary channels follow their noise-free
/// AR(1) extrapolation.
#[derive(Debug, Clone)]
pub struct ForecasterProcess {
    width: Forecaster,
    thickness: Forecaster,
    params: PlantParams,
    window: VecDeque<Vec<f64>>,
}

impl ForecasterProcess {
    pub fn new(width: Forecaster, thickness: Forecaster, params: PlantParams) -> Result<Self> {
        let names = params.feature_names();
        for f in [&width, &thickness] {
            if f.feature_names() != names.as_slice() {
                return Err(Error::Config(format!(
                    "forecaster for {} was trained on different feature columns",
                    f.target_column()
                )));
            }
        }
        if width.window() != thickness.window() {
            return Err(Error::Config("width and thickness forecasters use different windows".into()));
        }
        Ok(Self {
            width,
            thickness,
            params,
            window: VecDeque::new(),
        })
    }

    pub fn window_len(&self) -> usize {
        self.width.window()
    }

    fn predict(&self) -> Result<(f64, f64)> {
        let flat: Vec<f64> = self.window.iter().flatten().copied().collect();
        Ok((self.width.predict(&flat)?, self.thickness.predict(&flat)?))
    }
}

impl ProcessModel for ForecasterProcess {
    fn reset(&mut self, sp: Setpoints, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let t = self.window_len();
        let (rows, _) = warm_up(&self.params, sp, t, rng);
        let f = self.params.feature_names().len();
        self.window = rows.chunks(f).map(<[f64]>::to_vec).collect();
        self.predict()
    }

    fn step(&mut self, sp: Setpoints, _rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let last = self
            .window
            .back()
            .ok_or_else(|| Error::Env("forecaster stepped before reset".into()))?;
        let mut row = sp.to_array().to_vec();
        row.extend(
            self.params
                .aux
                .iter()
                .zip(&last[N_ACTUATORS..])
                .map(|(ch, &x)| ch.extrapolate(x, sp)),
        );
        self.window.pop_front();
        self.window.push_back(row);
        self.predict()
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepInfo {
    pub step: usize,
    pub width: f64,
    pub thickness: f64,
    pub width_error: f64,
    pub thickness_error: f64,
    pub setpoints: Setpoints,
    /// Clamped action actually applied.
    pub action: [f64; N_ACTUATORS],
    pub components: [RewardComponents; N_OBJECTIVES],
    pub reward: f64,
    pub success: bool,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct Env<M> {
    model: M,
    plant: PlantParams,
    episode: EpisodeConfig,
    reward: RewardConfig,
    objectives: Option<[ObjectiveState; N_OBJECTIVES]>,
    setpoints: Setpoints,
    history: [VecDeque<f64>; N_OBJECTIVES],
    delta: [f64; N_OBJECTIVES],
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl<M: ProcessModel> Env<M> {
    pub fn new(model: M, plant: PlantParams, episode: EpisodeConfig, reward: RewardConfig) -> Result<Self> {
        plant.validate()?;
        episode.validate()?;
        reward.validate()?;
        let mut reward = reward;
        reward.weights = normalize_weights(reward.weights)?;
        let setpoints = plant.mid_setpoints();
        Ok(Self {
            model,
            plant,
            episode,
            reward,
            objectives: None,
            setpoints,
            history: Default::default(),
            delta: [0.0; N_OBJECTIVES],
            steps: 0,
            done: true,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn episode(&self) -> &EpisodeConfig {
        &self.episode
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn plant(&self) -> &PlantParams {
        &self.plant
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn setpoints(&self) -> Setpoints {
        self.setpoints
    }

    pub fn objectives(&self) -> Option<&[ObjectiveState; N_OBJECTIVES]> {
        self.objectives.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.episode.state_dim()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Replaces the objective weights (normalized to sum 1) for later steps.
    pub fn set_objective_weights(&mut self, weights: [f64; N_OBJECTIVES]) -> Result<()> {
        self.reward.set_weights(weights)
    }

    pub fn objective_weights(&self) -> [f64; N_OBJECTIVES] {
        self.reward.weights
    }

    /// Set-points whose steady state meets both targets; error if outside
    /// the actuator bounds.
    pub fn target_setpoints(&self) -> Result<Setpoints> {
        let sp = self
            .plant
            .setpoints_for(self.episode.target_width, self.episode.target_thickness);
        if !self.plant.bounds.contains(sp) {
            return Err(Error::Env(format!(
                "targets {} mm / {} mm need set-points {sp:?} outside actuator bounds",
                self.episode.target_width, self.episode.target_thickness
            )));
        }
        Ok(sp)
    }

    /// Output range reachable within the actuator bounds, per objective.
    fn output_ranges(&self) -> [[f64; 2]; N_OBJECTIVES] {
        let b = self.plant.bounds;
        let sp = |k, g| Setpoints {
            knife: k,
            ds_gap: g,
            os_gap: g,
        };
        let w_lo = self.plant.steady_width(sp(b.knife[0], b.gap[1]));
        let w_hi = self.plant.steady_width(sp(b.knife[1], b.gap[0]));
        let h_lo = self.plant.steady_thickness(sp(b.knife[0], b.gap[0]));
        let h_hi = self.plant.steady_thickness(sp(b.knife[0], b.gap[1]));
        [[w_lo, w_hi], [h_lo, h_hi]]
    }

    fn controls(&self, obj: usize) -> Vec<f64> {
        let a = self.setpoints.to_array();
        OBJECTIVE_ACTUATORS[obj]
            .iter()
            .map(|&i| match self.reward.penalty_units {
                PenaltyUnits::Scaled => a[i] / self.episode.action_scale[i],
                PenaltyUnits::Millimetres => a[i],
            })
            .collect()
    }

    fn sample_start(&mut self, target: Setpoints) -> Setpoints {
        let ep = &self.episode;
        let mut mag = |r: [f64; 2]| {
            let m = if r[1] > r[0] {
                self.rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            };
            if self.rng.random::<bool>() {
                m
            } else {
                -m
            }
        };
        let dk = mag(ep.knife_offset);
        let dg = mag(ep.gap_offset);
        let skew = if ep.gap_skew > 0.0 {
            self.rng.random_range(-ep.gap_skew..=ep.gap_skew)
        } else {
            0.0
        };
        self.plant.bounds.clamp(Setpoints {
            knife: target.knife + dk,
            ds_gap: target.ds_gap + dg + 0.5 * skew,
            os_gap: target.os_gap + dg - 0.5 * skew,
        })
    }

    /// Starts an episode; all randomness of the episode derives from `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let target = self.target_setpoints()?;
        let targets = self.episode.targets();
        let tol = [WIDTH_TOLERANCE, THICKNESS_TOLERANCE];
        let mut found = None;
        for _ in 0..MAX_RESET_TRIES {
            let sp = self.sample_start(target);
            let (w, h) = self.model.reset(sp, &mut self.rng)?;
            if !(w.is_finite() && h.is_finite()) {
                return Err(Error::NonFinite("process model output at reset".into()));
            }
            let far = (w - targets[0]).abs() >= self.episode.min_initial_error[0]
                || (h - targets[1]).abs() >= self.episode.min_initial_error[1];
            if far {
                found = Some((sp, [w, h]));
                break;
            }
        }
        let (sp, y) = found.ok_or_else(|| {
            Error::Env("could not sample an initial condition away from the targets".into())
        })?;
        self.setpoints = sp;
        let names = ["width", "thickness"];
        let objs: [ObjectiveState; N_OBJECTIVES] = std::array::from_fn(|i| {
            let controls = self.controls(i);
            let e = (y[i] - targets[i]).abs() / tol[i];
            ObjectiveState {
                name: names[i],
                y: y[i],
                target: targets[i],
                tolerance: tol[i],
                e,
                e_best: e,
                prev_controls: controls.clone(),
                controls,
            }
        });
        for (i, o) in objs.iter().enumerate() {
            self.history[i] = std::iter::repeat_n(o.signed_error(), self.episode.history).collect();
        }
        self.delta = [0.0; N_OBJECTIVES];
        self.objectives = Some(objs);
        self.steps = 0;
        self.done = false;
        Ok(self.state())
    }

    /// Per objective: signed error, its change, target position within the
    /// reachable output range, H previous signed errors; then each
    /// set-point scaled to `[-1, 1]` within its bounds.
    pub fn state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.state_dim());
        let ranges = self.output_ranges();
        if let Some(objs) = &self.objectives {
            for (i, o) in objs.iter().enumerate() {
                s.push(o.signed_error());
                s.push(self.delta[i]);
                s.push(to_unit(o.target, ranges[i]));
                s.extend(self.history[i].iter().copied());
            }
        }
        let a = self.setpoints.to_array();
        for (i, v) in a.iter().enumerate() {
            s.push(to_unit(*v, self.plant.bounds.range(i)));
        }
        s
    }

    /// Applies an action in `[-1, 1]^3` (values outside are clamped).
    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool, StepInfo)> {
        if action.len() != N_ACTUATORS {
            return Err(Error::Dimension {
                what: "action",
                expected: N_ACTUATORS,
                got: action.len(),
            });
        }
        if self.objectives.is_none() || self.done {
            return Err(Error::Env("step called without an active episode".into()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let a: [f64; N_ACTUATORS] = std::array::from_fn(|i| action[i].clamp(-1.0, 1.0));
        let cur = self.setpoints.to_array();
        let next = self
            .plant
            .bounds
            .clamp(Setpoints::from_array(std::array::from_fn(|i| {
                cur[i] + a[i] * self.episode.action_scale[i]
            })));
        self.setpoints = next;
        let (w, h) = self.model.step(next, &mut self.rng)?;
        if !(w.is_finite() && h.is_finite()) {
            return Err(Error::NonFinite("process model output".into()));
        }
        self.steps += 1;
        let y = [w, h];
        let controls: [Vec<f64>; N_OBJECTIVES] = std::array::from_fn(|i| self.controls(i));
        let mut objs = self.objectives.take().expect("checked above");
        let mut components = [RewardComponents::default(); N_OBJECTIVES];
        for (i, o) in objs.iter_mut().enumerate() {
            let prev_signed = o.signed_error();
            o.prev_controls = std::mem::replace(&mut o.controls, controls[i].clone());
            o.y = y[i];
            o.e = (y[i] - o.target).abs() / o.tolerance;
            components[i] = reward_components(o, &self.reward);
            o.e_best = o.e_best.min(o.e);
            self.delta[i] = o.signed_error() - prev_signed;
            self.history[i].pop_front();
            self.history[i].push_back(prev_signed);
        }
        let reward = total_reward(&components, &self.reward)?;
        let success = objs.iter().all(ObjectiveState::within_tolerance);
        let done = success || self.steps >= self.episode.max_steps;
        let info = StepInfo {
            step: self.steps,
            width: w,
            thickness: h,
            width_error: w - objs[0].target,
            thickness_error: h - objs[1].target,
            setpoints: next,
            action: a,
            components,
            reward,
            success,
            done,
        };
        self.objectives = Some(objs);
        self.done = done;
        Ok((self.state(), reward, done, info))
    }
}

fn to_unit(v: f64, [lo, hi]: [f64; 2]) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

/// One row of an episode trace file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub width: f64,
    pub thickness: f64,
    pub target_width: f64,
    pub target_thickness: f64,
    pub knife_mm: f64,
    pub ds_gap_mm: f64,
    pub os_gap_mm: f64,
    pub action_knife: f64,
    pub action_ds: f64,
    pub action_os: f64,
    pub width_error_term: f64,
    pub width_progress_term: f64,
    pub width_action_term: f64,
    pub width_steady_term: f64,
    pub thickness_error_term: f64,
    pub thickness_progress_term: f64,
    pub thickness_action_term: f64,
    pub thickness_steady_term: f64,
    pub reward: f64,
    pub done: bool,
}

impl TraceRow {
    pub fn new(info: &StepInfo, targets: [f64; N_OBJECTIVES]) -> Self {
        let [cw, ch] = info.components;
        Self {
            step: info.step,
            width: info.width,
            thickness: info.thickness,
            target_width: targets[0],
            target_thickness: targets[1],
            knife_mm: info.setpoints.knife,
            ds_gap_mm: info.setpoints.ds_gap,
            os_gap_mm: info.setpoints.os_gap,
            action_knife: info.action[0],
            action_ds: info.action[1],
            action_os: info.action[2],
            width_error_term: cw.error,
            width_progress_term: cw.progress,
            width_action_term: cw.action,
            width_steady_term: cw.steady,
            thickness_error_term: ch.error,
            thickness_progress_term: ch.progress,
            thickness_action_term: ch.action,
            thickness_steady_term: ch.steady,
            reward: info.reward,
            done: info.done,
        }
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_error(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_error(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(e: f64, e_best: f64, controls: Vec<f64>, prev: Vec<f64>) -> ObjectiveState {
        ObjectiveState {
            name: "width",
            y: 480.0 + e,
            target: 480.0,
            tolerance: 1.0,
            e,
            e_best,
            controls,
            prev_controls: prev,
        }
    }

    fn quiet_plant() -> PlantParams {
        let mut p = PlantParams::default();
        p.width.noise = 0.0;
        p.thickness.noise = 0.0;
        p.aux.iter_mut().for_each(|c| c.noise = 0.0);
        p
    }

    fn plant_env(max_steps: usize) -> Env<PlantProcess> {
        let p = quiet_plant();
        let episode = EpisodeConfig {
            max_steps,
            ..EpisodeConfig::default()
        };
        Env::new(PlantProcess::new(p.clone(), 8).unwrap(), p, episode, RewardConfig::default()).unwrap()
    }

    #[test]
    fn reward_term_examples() {
        let cfg = RewardConfig::default();
        let c = reward_components(&obj(0.0, 0.0, vec![1.0], vec![1.0]), &cfg);
        assert_eq!(c.error, 2.0);
        assert_eq!(c.progress, 0.0);
        assert_eq!(c.action, 0.0);
        let c = reward_components(&obj(1.0, 1.0, vec![0.0], vec![0.0]), &cfg);
        assert!((c.error - 0.735_758_882_342_884_7).abs() < 1e-12);
        let c = reward_components(&obj(0.5, 0.5, vec![0.0], vec![0.0]), &cfg);
        assert!((c.steady - 0.25).abs() < 1e-15);
        let c = reward_components(&obj(0.2, 0.7, vec![3.0, 1.0], vec![1.0, 2.0]), &cfg);
        assert!((c.progress - 0.3 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((c.action + 0.05 * 5.0).abs() < 1e-15);
    }

    #[test]
    fn steady_term_gating() {
        let mut cfg = RewardConfig::default();
        let far = obj(2.5, 2.5, vec![0.0], vec![0.0]);
        assert_eq!(reward_components(&far, &cfg).steady, 0.0);
        assert_eq!(reward_components(&obj(1.0, 1.0, vec![0.0], vec![0.0]), &cfg).steady, 0.0);
        cfg.gate_steady = false;
        assert!((reward_components(&far, &cfg).steady + 0.75).abs() < 1e-15);
    }

    #[test]
    fn progress_term_is_bounded() {
        let cfg = RewardConfig::default();
        for (e, b) in [(0.0, 1e6), (1e6, 0.0), (3.0, 2.0), (0.1, 0.3)] {
            let p = reward_components(&obj(e, b, vec![0.0], vec![0.0]), &cfg).progress;
            assert!(p.abs() <= 0.3);
            if (e - b).abs() < 10.0 {
                assert!(p.abs() < 0.3);
            }
        }
    }

    #[test]
    fn total_reward_examples() {
        let mut cfg = RewardConfig::default();
        let best = RewardComponents {
            error: 2.0,
            progress: 0.0,
            action: 0.0,
            steady: 0.5,
        };
        assert_eq!(total_reward(&[best, best], &cfg).unwrap(), 2.5);
        let big = RewardComponents {
            error: 7.0,
            ..Default::default()
        };
        assert_eq!(total_reward(&[big, big], &cfg).unwrap(), 5.0);
        cfg.set_weights([1.0, 0.0]).unwrap();
        let other = RewardComponents {
            error: -3.0,
            ..Default::default()
        };
        assert_eq!(total_reward(&[best, other], &cfg).unwrap(), 2.5);
        assert!(total_reward(&[best], &cfg).is_err());
    }

    #[test]
    fn weights_are_normalized() {
        let mut cfg = RewardConfig::default();
        cfg.set_weights([1.0, 1.0]).unwrap();
        assert_eq!(cfg.weights, [0.5, 0.5]);
        cfg.set_weights([3.0, 1.0]).unwrap();
        assert_eq!(cfg.weights, [0.75, 0.25]);
        assert!(cfg.set_weights([0.0, 0.0]).is_err());
        assert!(cfg.set_weights([-1.0, 2.0]).is_err());
    }

    #[test]
    fn reward_variants() {
        assert_eq!(
            RewardTerms::variant(1).unwrap(),
            RewardTerms {
                error: true,
                progress: false,
                action: false,
                steady: false
            }
        );
        assert_eq!(RewardTerms::variant(4).unwrap(), RewardTerms::default());
        assert!(!RewardTerms::variant(3).unwrap().steady);
        assert!(RewardTerms::variant(5).is_err());
    }

    #[test]
    fn state_dimension_formula() {
        let mut env = plant_env(10);
        let s = env.reset(1).unwrap();
        assert_eq!(s.len(), 2 * (3 + 4) + 3);
        assert_eq!(env.state_dim(), 17);
        let (s, ..) = env.step(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.len(), 17);
    }

    #[test]
    fn reset_is_seeded() {
        let mut a = plant_env(10);
        let mut b = plant_env(10);
        assert_eq!(a.reset(42).unwrap(), b.reset(42).unwrap());
        assert_ne!(a.reset(42).unwrap(), a.reset(43).unwrap());
    }

    #[test]
    fn resets_start_away_from_targets() {
        let mut env = plant_env(10);
        for seed in 0..1000 {
            env.reset(seed).unwrap();
            let o = env.objectives().unwrap();
            assert!((o[0].y - o[0].target).abs() >= 5.0 || (o[1].y - o[1].target).abs() >= 0.25);
            assert_eq!(o[0].e_best, o[0].e);
        }
    }

    #[test]
    fn unreachable_targets_are_rejected() {
        let p = quiet_plant();
        let episode = EpisodeConfig {
            target_width: 700.0,
            ..EpisodeConfig::default()
        };
        let mut env = Env::new(PlantProcess::new(p.clone(), 8).unwrap(), p, episode, RewardConfig::default()).unwrap();
        assert!(matches!(env.reset(0), Err(Error::Env(_))));
    }

    #[test]
    fn knife_action_moves_two_millimetres() {
        let mut env = plant_env(10);
        env.reset(3).unwrap();
        let before = env.setpoints();
        let (.., info) = env.step(&[1.0, 0.0, 0.0]).unwrap();
        let want = (before.knife + 2.0).min(500.0);
        assert_eq!(info.setpoints.knife, want);
        assert_eq!(info.setpoints.ds_gap, before.ds_gap);
        // out-of-range actions are clamped to one unit
        let (.., info) = env.step(&[-7.0, 0.0, 3.0]).unwrap();
        assert_eq!(info.action, [-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_action_at_steady_state_keeps_errors() {
        let mut env = plant_env(10);
        env.reset(5).unwrap();
        // settle the lag with zero actions
        for _ in 0..5 {
            env.step(&[0.0; 3]).unwrap();
        }
        let e0 = env.objectives().unwrap().clone();
        let (.., info) = env.step(&[0.0; 3]).unwrap();
        let e1 = env.objectives().unwrap();
        for i in 0..2 {
            assert!((e1[i].e - e0[i].e).abs() < 1e-3 * e0[i].e.max(1.0));
            assert_eq!(info.components[i].action, 0.0);
        }
    }

    #[test]
    fn done_at_tolerance_boundary() {
        let a = ObjectiveState {
            name: "thickness",
            y: 3.05,
            target: 3.0,
            tolerance: 0.05,
            e: 1.0,
            e_best: 1.0,
            controls: vec![],
            prev_controls: vec![],
        };
        // 3.05 - 3.0 rounds just above 0.05 in binary
        let exact = ObjectiveState {
            y: 481.0,
            target: 480.0,
            tolerance: 1.0,
            ..a.clone()
        };
        assert!(exact.within_tolerance());
        let outside = ObjectiveState {
            y: 481.0 + 1e-9,
            ..exact.clone()
        };
        assert!(!outside.within_tolerance());
    }

    #[test]
    fn episode_ends_on_success_or_max_steps() {
        let mut env = plant_env(3);
        env.reset(7).unwrap();
        let mut steps = 0;
        loop {
            let (_, _, done, _) = env.step(&[0.0; 3]).unwrap();
            steps += 1;
            if done {
                break;
            }
        }
        assert_eq!(steps, 3);
        assert!(env.step(&[0.0; 3]).is_err());

        // moving straight to the target set-points succeeds
        let mut env = plant_env(200);
        env.reset(9).unwrap();
        let target = env.target_setpoints().unwrap();
        let mut success = false;
        for _ in 0..200 {
            let sp = env.setpoints().to_array();
            let t = target.to_array();
            let scale = env.episode().action_scale;
            let a: Vec<f64> = (0..3).map(|i| ((t[i] - sp[i]) / scale[i]).clamp(-1.0, 1.0)).collect();
            let (_, _, done, info) = env.step(&a).unwrap();
            if done {
                success = info.success;
                break;
            }
        }
        assert!(success);
    }

    #[test]
    fn e_best_is_monotone_and_bounds_hold() {
        let mut env = plant_env(60);
        env.reset(11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last_best = [f64::INFINITY; 2];
        let mut seen_min = [f64::INFINITY; 2];
        loop {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, r, done, info) = env.step(&a).unwrap();
            assert!((-5.0..=5.0).contains(&r));
            let o = env.objectives().unwrap();
            for i in 0..2 {
                assert!(o[i].e_best <= last_best[i]);
                last_best[i] = o[i].e_best;
                seen_min[i] = seen_min[i].min(o[i].e);
                assert!(o[i].e_best <= seen_min[i]);
                let c = info.components[i];
                assert!(c.error > 0.0 && c.error <= 2.0);
                assert!(c.progress.abs() < 0.3);
                assert!(c.action <= 0.0);
            }
            if done {
                break;
            }
        }
    }

    #[test]
    fn weight_change_affects_only_later_steps() {
        let run = |switch: bool| {
            let mut env = plant_env(10);
            env.reset(13).unwrap();
            let (_, r1, ..) = env.step(&[0.5, -0.2, 0.1]).unwrap();
            if switch {
                env.set_objective_weights([1.0, 0.0]).unwrap();
            }
            let (_, r2, .., info) = env.step(&[0.3, 0.1, 0.1]).unwrap();
            (r1, r2, info)
        };
        let (a1, a2, _) = run(false);
        let (b1, b2, info) = run(true);
        assert_eq!(a1, b1);
        assert_ne!(a2, b2);
        assert_eq!(b2, info.components[0].sum().clamp(-5.0, 5.0));
    }

    #[test]
    fn trace_file_has_one_row_per_step() {
        let mut env = plant_env(4);
        env.reset(1).unwrap();
        let mut rows = Vec::new();
        loop {
            let (_, _, done, info) = env.step(&[0.1, 0.0, 0.0]).unwrap();
            rows.push(TraceRow::new(&info, env.episode().targets()));
            if done {
                break;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        write_trace(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(text.starts_with("step,width,thickness"));
    }
}
