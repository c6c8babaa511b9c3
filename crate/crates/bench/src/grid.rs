//! Grid cells (variant × scenario × seed), forecaster preparation and the
//! worker pool that runs cells.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use calender::checkpoint::fingerprint;
use calender::envloop::{write_trace, Env, EpisodeConfig, ForecasterProcess, PlantProcess, ProcessModel, TraceRow};
use calender::forecast::{linreg_baseline, train_forecaster, Forecaster, LrFeatures, PreparedData, Target};
use calender::mpdppo::{evaluate, train, write_curve, Agent, EpisodeRecord, Evaluation, TrainConfig, TrainOutcome, Variant};
use calender::plantgen::generate_dataset;
use calender::series::ProcessSeries;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Process};
use crate::error::{invalid, io_error, Error, Result};

/// Target pair plus episode length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Scenario {
    pub width: f64,
    pub thickness: f64,
    pub steps: usize,
}

fn mm(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

impl Scenario {
    pub fn new(width: f64, thickness: f64, steps: usize) -> Self {
        Self { width, thickness, steps }
    }

    /// `w480-t3.0-s100`.
    pub fn name(&self) -> String {
        format!("w{}-t{}-s{}", mm(self.width).trim_end_matches(".0"), mm(self.thickness), self.steps)
    }

    /// Accepts the canonical name or `480x3.0[x100]`; a missing episode
    /// length falls back to `default_steps`.
    pub fn parse(s: &str, default_steps: usize) -> Result<Self> {
        let bad = || invalid("scenario", format!("cannot parse {s:?}; expected w480-t3.0-s100 or 480x3.0[x100]"));
        let num = |t: &str| t.parse::<f64>().ok().filter(|v| *v > 0.0 && v.is_finite());
        let parts: Vec<&str> = if s.starts_with('w') { s.split('-').collect() } else { s.split('x').collect() };
        let (w, t, n) = match parts.as_slice() {
            [w, t, n] if s.starts_with('w') => (
                w.strip_prefix('w').and_then(num),
                t.strip_prefix('t').and_then(num),
                n.strip_prefix('s').and_then(|n| n.parse().ok()),
            ),
            [w, t] if !s.starts_with('w') => (num(w), num(t), Some(default_steps)),
            [w, t, n] => (num(w), num(t), n.parse().ok()),
            _ => return Err(bad()),
        };
        match (w, t, n) {
            (Some(w), Some(t), Some(n)) if n > 0 => Ok(Self::new(w, t, n)),
            _ => Err(bad()),
        }
    }

    /// Wide before narrow, thick before thin, short before long.
    pub fn sort_key(&self) -> (i64, i64, usize) {
        (-(self.width * 1e6).round() as i64, -(self.thickness * 1e6).round() as i64, self.steps)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> Self {
        s.name()
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Scenario::parse(&s, 100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub scenario: Scenario,
    pub seed: u64,
}

impl Cell {
    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join("runs")
            .join(self.variant.name())
            .join(self.scenario.name())
            .join(self.seed.to_string())
    }
}

pub fn grid_scenarios(cfg: &Config) -> Vec<Scenario> {
    let x = &cfg.experiment;
    let mut out = Vec::new();
    for &steps in &x.steps_per_episode {
        for &[w, t] in &x.targets {
            out.push(Scenario::new(w, t, steps));
        }
    }
    out
}

pub fn ablation_scenario(cfg: &Config) -> Scenario {
    let [w, t] = cfg.experiment.ablation_target;
    Scenario::new(w, t, cfg.experiment.ablation_steps)
}

fn cells(variants: &[Variant], scenarios: &[Scenario], seeds: &[u64]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &variant in variants {
        for &scenario in scenarios {
            for &seed in seeds {
                out.push(Cell { variant, scenario, seed });
            }
        }
    }
    out
}

/// Configured variants × scenarios × seeds.
pub fn grid_plan(cfg: &Config) -> Vec<Cell> {
    cells(&cfg.experiment.variants, &grid_scenarios(cfg), &cfg.experiment.seeds)
}

/// Every variant at the ablation scenario.
pub fn ablation_plan(cfg: &Config) -> Vec<Cell> {
    cells(&Variant::ALL, &[ablation_scenario(cfg)], &cfg.experiment.seeds)
}

/// Width/thickness of one greedy evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub width: f64,
    pub thickness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub scenario: Scenario,
    pub seed: u64,
    /// Mean greedy-evaluation optimize step; the episode length for failed
    /// runs.
    pub average_optimize_step: f64,
    pub success_rate: f64,
    pub eval_steps: Vec<usize>,
    pub curve: Vec<EpisodeRecord>,
    pub trace: Vec<TracePoint>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl RunRecord {
    fn failure(cell: &Cell, message: String, wall_time_s: f64) -> Self {
        Self {
            variant: cell.variant,
            scenario: cell.scenario,
            seed: cell.seed,
            average_optimize_step: cell.scenario.steps as f64,
            success_rate: 0.0,
            eval_steps: Vec::new(),
            curve: Vec::new(),
            trace: Vec::new(),
            wall_time_s,
            error: Some(message),
        }
    }

    pub fn crashed(&self) -> bool {
        self.error.is_some()
    }
}

/// Processes an agent can be trained against.
#[derive(Debug, Clone)]
pub enum Models {
    Plant,
    Forecasters { width: Forecaster, thickness: Forecaster },
}

/// Forecast accuracy on the held-out test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub target: Target,
    pub seed: u64,
    pub model: String,
    pub mae: f64,
    pub rmse: f64,
    pub qualification_rate: f64,
}

pub fn forecast_dataset(cfg: &Config) -> Result<ProcessSeries> {
    let x = &cfg.experiment;
    let mut rng = ChaCha8Rng::seed_from_u64(x.data_seed);
    Ok(generate_dataset(&cfg.plant, x.dataset_steps, cfg.forecaster.window, x.excitation, &mut rng)?)
}

/// Trains one forecaster and scores it next to the linear baseline.
pub fn fit_forecaster(cfg: &Config, series: &ProcessSeries, target: Target, seed: u64) -> Result<(Forecaster, [MetricsRow; 2])> {
    let data = PreparedData::new(series, &cfg.plant.feature_names(), target.column(), cfg.forecaster.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(target as u64);
    let (model, report) = train_forecaster(&cfg.forecaster, &data, target.tolerance(), &mut rng)?;
    let lr = linreg_baseline(&data, LrFeatures::LastStep, target.tolerance())?;
    let row = |model: &str, m: calender::forecast::ForecastMetrics| MetricsRow {
        target,
        seed,
        model: model.into(),
        mae: m.mae,
        rmse: m.rmse,
        qualification_rate: m.qualification_rate,
    };
    Ok((model, [row("lstnet", report.test), row("linear-regression", lr.test)]))
}

/// Directory holding the forecasters for this configuration and seed.
pub fn forecaster_dir(cfg: &Config, out: &Path, seed: u64) -> Result<PathBuf> {
    let x = &cfg.experiment;
    let key = fingerprint(&(&cfg.plant, &cfg.forecaster, x.dataset_steps, x.excitation, x.data_seed, seed))?;
    Ok(out.join("forecaster").join(&key[..16]))
}

/// Loads cached forecasters or trains both and writes them with
/// `metrics.csv`.
pub fn prepare_forecasters(cfg: &Config, out: &Path, seed: u64) -> Result<(Forecaster, Forecaster, Option<Vec<MetricsRow>>)> {
    let dir = forecaster_dir(cfg, out, seed)?;
    let (wp, tp) = (dir.join("width.json"), dir.join("thickness.json"));
    if wp.exists() && tp.exists() {
        return Ok((Forecaster::load(&wp)?, Forecaster::load(&tp)?, None));
    }
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let series = forecast_dataset(cfg)?;
    let (width, mut rows) = fit_forecaster(cfg, &series, Target::Width, seed).map(|(f, r)| (f, r.to_vec()))?;
    let (thickness, more) = fit_forecaster(cfg, &series, Target::Thickness, seed)?;
    rows.extend(more);
    crate::report::write_csv(&dir.join("metrics.csv"), &rows)?;
    width.save(&wp)?;
    thickness.save(&tp)?;
    Ok((width, thickness, Some(rows)))
}

pub fn prepare_models(cfg: &Config, out: &Path) -> Result<Models> {
    match cfg.experiment.process {
        Process::Plant => Ok(Models::Plant),
        Process::Forecaster => {
            let (width, thickness, _) = prepare_forecasters(cfg, out, cfg.experiment.data_seed)?;
            Ok(Models::Forecasters { width, thickness })
        }
    }
}

/// Episode and reward settings of a cell.
fn cell_env_config(cfg: &Config, cell: &Cell) -> (EpisodeConfig, calender::envloop::RewardConfig) {
    let episode = EpisodeConfig {
        target_width: cell.scenario.width,
        target_thickness: cell.scenario.thickness,
        max_steps: cell.scenario.steps,
        ..cfg.env.clone()
    };
    let mut reward = cfg.reward.clone();
    if let Variant::Reward(_) = cell.variant {
        reward.terms = cell.variant.reward_terms();
    }
    (episode, reward)
}

pub fn build_agent(cfg: &Config, cell: &Cell) -> Result<Agent> {
    let (episode, _) = cell_env_config(cfg, cell);
    let layout = cell.variant.layout(
        episode.state_dim(),
        &cfg.agent.width_branch(),
        &cfg.agent.thickness_branch(),
        &cfg.agent.trunk_hidden,
        &cfg.agent.critic_hidden,
    );
    Ok(Agent::new(layout, cfg.agent.ppo.clone(), cell.seed)?)
}

/// Runs `f` against the cell's environment.
fn with_env<T>(
    cfg: &Config,
    models: &Models,
    cell: &Cell,
    f: &mut dyn FnMut(&mut dyn EnvOps) -> Result<T>,
) -> Result<T> {
    let (episode, reward) = cell_env_config(cfg, cell);
    match models {
        Models::Plant => {
            let model = PlantProcess::new(cfg.plant.clone(), cfg.forecaster.window)?;
            f(&mut Env::new(model, cfg.plant.clone(), episode, reward)?)
        }
        Models::Forecasters { width, thickness } => {
            let model = ForecasterProcess::new(width.clone(), thickness.clone(), cfg.plant.clone())?;
            f(&mut Env::new(model, cfg.plant.clone(), episode, reward)?)
        }
    }
}

/// Object-safe slice of `Env` used by the harness.
trait EnvOps {
    fn train(&mut self, agent: &mut Agent, cfg: &TrainConfig) -> Result<TrainOutcome>;
    fn evaluate(&mut self, agent: &Agent, episodes: usize, seed: u64) -> Result<Evaluation>;
    fn targets(&self) -> [f64; 2];
}

impl<M: ProcessModel> EnvOps for Env<M> {
    fn train(&mut self, agent: &mut Agent, cfg: &TrainConfig) -> Result<TrainOutcome> {
        Ok(train(self, agent, cfg)?)
    }

    fn evaluate(&mut self, agent: &Agent, episodes: usize, seed: u64) -> Result<Evaluation> {
        Ok(evaluate(self, episodes, seed, |s| agent.greedy(s))?)
    }

    fn targets(&self) -> [f64; 2] {
        self.episode().targets()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_error(path))
}

/// Trains and evaluates one cell, writing `curve.csv`, `trace.csv`,
/// `checkpoint/` and `record.json` under its run directory.
pub fn run_cell(cfg: &Config, models: &Models, cell: &Cell, out: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let dir = cell.dir(out);
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let mut agent = build_agent(cfg, cell)?;
    let tc = TrainConfig {
        episodes: cfg.experiment.episodes,
        eval_episodes: cfg.experiment.eval_episodes,
        seed: cell.seed,
    };
    let (outcome, eval, targets) = with_env(cfg, models, cell, &mut |env| {
        let outcome = env.train(&mut agent, &tc)?;
        let eval = env.evaluate(&agent, tc.eval_episodes, tc.seed)?;
        Ok((outcome, eval, env.targets()))
    })?;
    write_curve(&dir.join("curve.csv"), &outcome.curve)?;
    let rows: Vec<TraceRow> = eval.first_trace.iter().map(|i| TraceRow::new(i, targets)).collect();
    write_trace(&dir.join("trace.csv"), &rows)?;
    let ckpt = dir.join("checkpoint");
    agent.save(&ckpt)?;
    outcome.best_policy.save(&ckpt.join("best_policy.json"))?;
    let record = RunRecord {
        variant: cell.variant,
        scenario: cell.scenario,
        seed: cell.seed,
        average_optimize_step: eval.mean_optimize_step,
        success_rate: eval.success_rate,
        eval_steps: eval.optimize_steps,
        curve: outcome.curve,
        trace: eval
            .first_trace
            .iter()
            .map(|i| TracePoint {
                step: i.step,
                width: i.width,
                thickness: i.thickness,
            })
            .collect(),
        wall_time_s: start.elapsed().as_secs_f64(),
        error: None,
    };
    write_json(&dir.join("record.json"), &record)?;
    Ok(record)
}

/// Greedy evaluation of a saved cell checkpoint on fresh episodes.
pub fn evaluate_cell(cfg: &Config, models: &Models, cell: &Cell, out: &Path) -> Result<Evaluation> {
    let mut agent = build_agent(cfg, cell)?;
    agent.load(&cell.dir(out).join("checkpoint"))?;
    with_env(cfg, models, cell, &mut |env| env.evaluate(&agent, cfg.experiment.eval_episodes, cell.seed))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// `run_cell` that turns errors and panics into failed records.
pub fn run_cell_guarded(cfg: &Config, models: &Models, cell: &Cell, out: &Path) -> RunRecord {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_cell(cfg, models, cell, out)));
    let message = match result {
        Ok(Ok(r)) => return r,
        Ok(Err(e)) => e.to_string(),
        Err(p) => format!("panicked: {}", panic_message(p)),
    };
    let record = RunRecord::failure(cell, message, start.elapsed().as_secs_f64());
    let dir = cell.dir(out);
    if std::fs::create_dir_all(&dir).is_ok() {
        let _ = write_json(&dir.join("record.json"), &record);
    }
    record
}

/// Runs every cell on at most `workers` threads. Records come back in
/// plan order.
pub fn run_grid(cfg: &Config, models: &Models, plan: &[Cell], out: &Path, workers: usize) -> Vec<RunRecord> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<RunRecord>>> = plan.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, plan.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = plan.get(i) else { break };
                let rec = run_cell_guarded(cfg, models, cell, out);
                match &rec.error {
                    None => eprintln!(
                        "[{}/{}] {} {} seed {}: {:.1} ({:.1}s)",
                        i + 1,
                        plan.len(),
                        cell.variant,
                        cell.scenario,
                        cell.seed,
                        rec.average_optimize_step,
                        rec.wall_time_s
                    ),
                    Some(e) => eprintln!("[{}/{}] {} {} seed {}: failed: {e}", i + 1, plan.len(), cell.variant, cell.scenario, cell.seed),
                }
                *slots[i].lock().expect("slot lock") = Some(rec);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every cell ran"))
        .collect()
}

/// Every `runs/<variant>/<scenario>/<seed>/record.json` under `out`.
pub fn load_records(out: &Path) -> Result<Vec<RunRecord>> {
    let runs = out.join("runs");
    let mut paths = Vec::new();
    let list = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(io_error(p))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for v in list(&runs)? {
        for s in list(&v)? {
            for seed in list(&s)? {
                let p = seed.join("record.json");
                if p.exists() {
                    paths.push(p);
                }
            }
        }
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io_error(p))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}
