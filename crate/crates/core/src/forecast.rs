//! LSTNet next-step forecaster and a least-squares baseline.
//!
//! Pipeline: conv1d → relu → max-pool → layer-norm, then an LSTM over the
//! pooled sequence in parallel with a Skip-GRU, concatenated, dropout,
//! tanh fusion layer and a linear scalar output.

use std::ops::Range;
use std::path::Path;

use diffcore::{
    dropout, gru_cell, lstm_cell, Adam, AdamConfig, Bound, GruVars, LstmVars, Mode, ParamId, ParamSet, Tape,
    Tensor, Var, LAYER_NORM_EPS,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{io_error, Error, Result};
use crate::neuro::{Activation, Dense};
use crate::plantgen::{THICKNESS_COLUMN, WIDTH_COLUMN};
use crate::series::ProcessSeries;

pub const WIDTH_TOLERANCE: f64 = 1.0;
pub const THICKNESS_TOLERANCE: f64 = 0.05;

const TRAIN_FRACTION: f64 = 0.70;
const VAL_FRACTION: f64 = 0.15;
const EVAL_BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub window: usize,
    pub kernel: usize,
    pub conv_channels: usize,
    pub pool: usize,
    pub lstm_hidden: usize,
    pub skip_hidden: usize,
    /// Skip period in pooled steps.
    pub skip_period: usize,
    pub dropout: f64,
    pub fusion_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            window: 32,
            kernel: 6,
            conv_channels: 32,
            pool: 2,
            lstm_hidden: 64,
            skip_hidden: 16,
            skip_period: 4,
            dropout: 0.1,
            fusion_hidden: 32,
            lr: 1e-3,
            batch_size: 1024,
            epochs: 100,
            patience: None,
        }
    }
}

impl ForecasterConfig {
    /// Sequence length after convolution and pooling.
    pub fn pooled_len(&self) -> usize {
        if self.window < self.kernel || self.pool == 0 {
            0
        } else {
            (self.window - self.kernel + 1) / self.pool
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("forecaster: {m}")));
        if self.kernel == 0 || self.window < self.kernel {
            return bad(format!("window {} must be at least kernel {}", self.window, self.kernel));
        }
        if self.pool == 0 || self.pooled_len() == 0 {
            return bad(format!("pool {} leaves no pooled steps", self.pool));
        }
        if self.skip_period == 0 || self.skip_period > self.pooled_len() {
            return bad(format!(
                "skip period {} must lie in [1, {}]",
                self.skip_period,
                self.pooled_len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("conv_channels", self.conv_channels),
            ("lstm_hidden", self.lstm_hidden),
            ("skip_hidden", self.skip_hidden),
            ("fusion_hidden", self.fusion_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        Ok(())
    }
}

/// Which quality variable a model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Width,
    Thickness,
}

impl Target {
    pub fn column(self) -> &'static str {
        match self {
            Target::Width => WIDTH_COLUMN,
            Target::Thickness => THICKNESS_COLUMN,
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Target::Width => WIDTH_TOLERANCE,
            Target::Thickness => THICKNESS_TOLERANCE,
        }
    }
}

/// z-score statistics of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub mean: f64,
    pub std: f64,
}

impl Norm {
    pub fn fit(values: impl Iterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Err(Error::Empty("normalization sample"));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Ok(Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GruIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruIds {
    fn bind(&self, b: &Bound) -> GruVars {
        GruVars {
            w_ih: b.var(self.w_ih),
            w_hh: b.var(self.w_hh),
            b_ih: b.var(self.b_ih),
            b_hh: b.var(self.b_hh),
        }
    }
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Runs a GRU over `seq: [B, L, C]` from a zero state, returning the final
/// hidden state `[B, H]`.
pub fn gru_sequence(tape: &mut Tape, seq: Var, p: &GruVars) -> Result<Var> {
    let (batch, len) = seq_batch_len(tape, seq)?;
    let hidden = tape.shape(p.w_hh)[0];
    let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
    for t in 0..len {
        let x = tape.time_step(seq, t)?;
        h = gru_cell(tape, x, h, p)?;
    }
    Ok(h)
}

/// Skip-GRU: for each phase `r < period` the GRU reads the pooled steps
/// `L-1-r, L-1-r-period, ...` in time order; final hiddens are concatenated
/// phase by phase into `[B, period * H]`. Period 1 is a plain GRU.
pub fn skip_gru(tape: &mut Tape, seq: Var, period: usize, p: &GruVars) -> Result<Var> {
    let (batch, len) = seq_batch_len(tape, seq)?;
    if period == 0 || period > len {
        return Err(Error::Config(format!("skip period {period} for sequence length {len}")));
    }
    let hidden = tape.shape(p.w_hh)[0];
    let mut finals = Vec::with_capacity(period);
    for r in 0..period {
        let mut steps: Vec<usize> = (0..len).rev().skip(r).step_by(period).collect();
        steps.reverse();
        let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
        for t in steps {
            let x = tape.time_step(seq, t)?;
            h = gru_cell(tape, x, h, p)?;
        }
        finals.push(h);
    }
    Ok(tape.concat_last(&finals)?)
}

fn seq_batch_len(tape: &Tape, seq: Var) -> Result<(usize, usize)> {
    match tape.shape(seq) {
        [b, l, _] => Ok((*b, *l)),
        s => Err(Error::Dimension {
            what: "sequence rank",
            expected: 3,
            got: s.len(),
        }),
    }
}

/// Network fingerprint input: configuration plus input width.
#[derive(Serialize)]
struct NetSpec<'a> {
    config: &'a ForecasterConfig,
    n_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lstnet {
    config: ForecasterConfig,
    n_features: usize,
    params: ParamSet,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    norm_gain: ParamId,
    norm_bias: ParamId,
    lstm: LstmIds,
    gru: GruIds,
    fusion: Dense,
    output: Dense,
}

impl Lstnet {
    pub fn new<R: Rng + ?Sized>(config: ForecasterConfig, n_features: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if n_features == 0 {
            return Err(Error::Config("forecaster needs at least one feature".into()));
        }
        let c = &config;
        let mut params = ParamSet::new();
        let conv_bound = 1.0 / ((c.kernel * n_features) as f64).sqrt();
        let conv_kernel = params.add(
            "conv.kernel",
            uniform(&[c.kernel, n_features, c.conv_channels], conv_bound, rng),
        );
        let conv_bias = params.add("conv.bias", uniform(&[c.conv_channels], conv_bound, rng));
        let norm_gain = params.add("norm.gain", Tensor::ones(&[c.conv_channels]));
        let norm_bias = params.add("norm.bias", Tensor::zeros(&[c.conv_channels]));
        let h = c.lstm_hidden;
        let lb = 1.0 / (h as f64).sqrt();
        let lstm = LstmIds {
            w_ih: params.add("lstm.w_ih", uniform(&[c.conv_channels, 4 * h], lb, rng)),
            w_hh: params.add("lstm.w_hh", uniform(&[h, 4 * h], lb, rng)),
            bias: params.add("lstm.bias", uniform(&[4 * h], lb, rng)),
        };
        let g = c.skip_hidden;
        let gb = 1.0 / (g as f64).sqrt();
        let gru = GruIds {
            w_ih: params.add("skip_gru.w_ih", uniform(&[c.conv_channels, 3 * g], gb, rng)),
            w_hh: params.add("skip_gru.w_hh", uniform(&[g, 3 * g], gb, rng)),
            b_ih: params.add("skip_gru.b_ih", uniform(&[3 * g], gb, rng)),
            b_hh: params.add("skip_gru.b_hh", uniform(&[3 * g], gb, rng)),
        };
        let cat = h + c.skip_period * g;
        let fusion = Dense::new(&mut params, "fusion", cat, c.fusion_hidden, 1.0, Activation::Tanh, rng);
        let output = Dense::new(&mut params, "output", c.fusion_hidden, 1, 1.0, Activation::Identity, rng);
        Ok(Self {
            config,
            n_features,
            params,
            conv_kernel,
            conv_bias,
            norm_gain,
            norm_bias,
            lstm,
            gru,
            fusion,
            output,
        })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_layer(&self) -> Dense {
        self.output
    }

    /// Normalized prediction `[B]` for windows `x: [B, T, F]`.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.config;
        let batch = match tape.shape(x) {
            [b, t, f] if *t == c.window && *f == self.n_features => *b,
            s => {
                return Err(Error::Dimension {
                    what: "forecaster window",
                    expected: c.window * self.n_features,
                    got: s.iter().skip(1).product(),
                })
            }
        };
        let z = tape.conv1d(x, bound.var(self.conv_kernel), 1)?;
        let z = tape.add_row(z, bound.var(self.conv_bias))?;
        let z = tape.relu(z)?;
        // pool windows end at the newest step; the oldest remainder is dropped
        let conv_len = c.window - c.kernel + 1;
        let keep = c.pooled_len() * c.pool;
        let z = if keep < conv_len {
            tape.slice_time(z, conv_len - keep, keep)?
        } else {
            z
        };
        let z = tape.max_pool1d(z, c.pool)?;
        let seq = tape.layer_norm(z, bound.var(self.norm_gain), bound.var(self.norm_bias), LAYER_NORM_EPS)?;

        let lv = LstmVars {
            w_ih: bound.var(self.lstm.w_ih),
            w_hh: bound.var(self.lstm.w_hh),
            bias: bound.var(self.lstm.bias),
        };
        let mut h = tape.constant(Tensor::zeros(&[batch, c.lstm_hidden]));
        let mut cell = tape.constant(Tensor::zeros(&[batch, c.lstm_hidden]));
        for t in 0..c.pooled_len() {
            let xt = tape.time_step(seq, t)?;
            (h, cell) = lstm_cell(tape, xt, h, cell, &lv)?;
        }
        let skip = skip_gru(tape, seq, c.skip_period, &self.gru.bind(bound))?;
        let cat = tape.concat_last(&[h, skip])?;
        let cat = dropout(tape, cat, c.dropout, mode, rng)?;
        let f = self.fusion.forward(tape, bound, cat)?;
        let y = self.output.forward(tape, bound, f)?;
        Ok(tape.reshape(y, &[batch])?)
    }

    /// Eval-mode normalized predictions for row-major windows `[n, T, F]`.
    pub fn predict_normalized(&self, windows: &[f64]) -> Result<Vec<f64>> {
        let per = self.config.window * self.n_features;
        if windows.is_empty() || windows.len() % per != 0 {
            return Err(Error::Dimension {
                what: "forecaster windows",
                expected: per,
                got: windows.len(),
            });
        }
        let n = windows.len() / per;
        let mut out = Vec::with_capacity(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for chunk in windows.chunks(EVAL_BATCH * per) {
            let b = chunk.len() / per;
            let mut tape = Tape::new();
            let bound = self.params.bind_frozen(&mut tape);
            let x = tape.constant(Tensor::new(
                vec![b, self.config.window, self.n_features],
                chunk.to_vec(),
            )?);
            let y = self.forward_tape(&mut tape, &bound, x, Mode::Eval, &mut rng)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    fn spec(&self) -> NetSpec<'_> {
        NetSpec {
            config: &self.config,
            n_features: self.n_features,
        }
    }
}

/// Windowed, normalized dataset with a chronological 70/15/15 split.
///
/// Window `i` covers rows `i..i + T`; its target is row `i + T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub feature_names: Vec<String>,
    pub target_column: String,
    pub window: usize,
    pub n_features: usize,
    /// Normalized feature rows, row-major `[rows, F]`.
    pub features: Vec<f64>,
    /// Raw target per row (mm).
    pub targets: Vec<f64>,
    pub feature_norm: Vec<Norm>,
    pub target_norm: Norm,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl PreparedData {
    pub fn new(series: &ProcessSeries, feature_names: &[String], target_column: &str, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        let rows = series.n_rows();
        if rows <= window {
            return Err(Error::Empty("dataset (no complete window)"));
        }
        let n_windows = rows - window;
        let n_train = (n_windows as f64 * TRAIN_FRACTION).floor() as usize;
        let n_val = (n_windows as f64 * VAL_FRACTION).floor() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n_windows {
            return Err(Error::Empty("dataset split"));
        }
        let f = feature_names.len();
        let raw = series.select(feature_names)?;
        let targets = series.column(target_column)?;
        // statistics from rows touched by training windows and their targets
        let stat_rows = n_train + window;
        let feature_norm = (0..f)
            .map(|j| Norm::fit((0..stat_rows).map(|i| raw[i * f + j])))
            .collect::<Result<Vec<_>>>()?;
        let target_norm = Norm::fit(targets[..stat_rows].iter().copied())?;
        let features = raw
            .chunks(f)
            .flat_map(|r| r.iter().zip(&feature_norm).map(|(x, n)| n.normalize(*x)))
            .collect();
        Ok(Self {
            feature_names: feature_names.to_vec(),
            target_column: target_column.to_owned(),
            window,
            n_features: f,
            features,
            targets,
            feature_norm,
            target_norm,
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..n_windows,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.targets.len() - self.window
    }

    pub fn window_slice(&self, i: usize) -> &[f64] {
        let f = self.n_features;
        &self.features[i * f..(i + self.window) * f]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i + self.window]
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * self.window * self.n_features);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.window_slice(i));
            y.push(self.target_norm.normalize(self.target(i)));
        }
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub qualification_rate: f64,
}

/// MAE, RMSE and the fraction with `|ŷ - y| <= tolerance`.
pub fn metrics(predictions: &[f64], targets: &[f64], tolerance: f64) -> Result<ForecastMetrics> {
    if predictions.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Dimension {
            what: "predictions",
            expected: targets.len(),
            got: predictions.len(),
        });
    }
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance {tolerance} must be positive")));
    }
    let n = predictions.len() as f64;
    let (mut abs, mut sq, mut ok) = (0.0, 0.0, 0usize);
    for (p, y) in predictions.iter().zip(targets) {
        let e = (p - y).abs();
        abs += e;
        sq += e * e;
        if e <= tolerance {
            ok += 1;
        }
    }
    Ok(ForecastMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        qualification_rate: ok as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training MAE in mm.
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<EpochStats>,
    pub best_epoch: usize,
    pub test: ForecastMetrics,
}

/// Trained network with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    net: Lstnet,
    feature_names: Vec<String>,
    target_column: String,
    feature_norm: Vec<Norm>,
    target_norm: Norm,
}

#[derive(Serialize, Deserialize)]
struct ForecasterFile {
    config: ForecasterConfig,
    feature_names: Vec<String>,
    target_column: String,
    feature_norm: Vec<Norm>,
    target_norm: Norm,
    checkpoint: Checkpoint,
}

impl Forecaster {
    pub fn new(net: Lstnet, data: &PreparedData) -> Result<Self> {
        if net.n_features != data.n_features || net.config.window != data.window {
            return Err(Error::Dimension {
                what: "forecaster input",
                expected: net.config.window * net.n_features,
                got: data.window * data.n_features,
            });
        }
        Ok(Self {
            net,
            feature_names: data.feature_names.clone(),
            target_column: data.target_column.clone(),
            feature_norm: data.feature_norm.clone(),
            target_norm: data.target_norm,
        })
    }

    pub fn net(&self) -> &Lstnet {
        &self.net
    }

    pub fn window(&self) -> usize {
        self.net.config.window
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_column(&self) -> &str {
        &self.target_column
    }

    pub fn feature_norm(&self) -> &[Norm] {
        &self.feature_norm
    }

    pub fn target_norm(&self) -> Norm {
        self.target_norm
    }

    /// Prediction in mm from a raw (unnormalized) `[T, F]` window.
    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        let f = self.feature_names.len();
        if window.len() != self.window() * f {
            return Err(Error::Dimension {
                what: "forecaster window",
                expected: self.window() * f,
                got: window.len(),
            });
        }
        let z: Vec<f64> = window
            .chunks(f)
            .flat_map(|r| r.iter().zip(&self.feature_norm).map(|(x, n)| n.normalize(*x)))
            .collect();
        Ok(self.target_norm.denormalize(self.net.predict_normalized(&z)?[0]))
    }

    /// Predictions in mm for windows `idx` of prepared data.
    pub fn predict_windows(&self, data: &PreparedData, idx: Range<usize>) -> Result<Vec<f64>> {
        if idx.is_empty() {
            return Err(Error::Empty("window range"));
        }
        let f = data.n_features;
        let x = &data.features[idx.start * f..(idx.end - 1 + data.window) * f];
        // windows overlap; materialize each one
        let per = data.window * f;
        let mut flat = Vec::with_capacity(idx.len() * per);
        for i in 0..idx.len() {
            flat.extend_from_slice(&x[i * f..i * f + per]);
        }
        Ok(self
            .net
            .predict_normalized(&flat)?
            .into_iter()
            .map(|z| self.target_norm.denormalize(z))
            .collect())
    }

    pub fn evaluate(&self, data: &PreparedData, idx: Range<usize>, tolerance: f64) -> Result<ForecastMetrics> {
        let pred = self.predict_windows(data, idx.clone())?;
        let y: Vec<f64> = idx.map(|i| data.target(i)).collect();
        metrics(&pred, &y, tolerance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ForecasterFile {
            config: self.net.config.clone(),
            feature_names: self.feature_names.clone(),
            target_column: self.target_column.clone(),
            feature_norm: self.feature_norm.clone(),
            target_norm: self.target_norm,
            checkpoint: Checkpoint::capture(&self.net.params, &self.net.spec())?,
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(io_error(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let file: ForecasterFile = serde_json::from_str(&text)?;
        let f = file.feature_names.len();
        if file.feature_norm.len() != f {
            return Err(Error::Checkpoint(format!(
                "{} normalizers for {f} features",
                file.feature_norm.len()
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Lstnet::new(file.config, f, &mut rng)?;
        let spec = NetSpec {
            config: &net.config.clone(),
            n_features: f,
        };
        file.checkpoint.restore(&mut net.params, &spec)?;
        Ok(Self {
            net,
            feature_names: file.feature_names,
            target_column: file.target_column,
            feature_norm: file.feature_norm,
            target_norm: file.target_norm,
        })
    }
}

fn batch_loss<R: Rng + ?Sized>(
    net: &Lstnet,
    tape: &mut Tape,
    bound: &Bound,
    x: Vec<f64>,
    y: Vec<f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let b = y.len();
    let c = &net.config;
    let x = tape.constant(Tensor::new(vec![b, c.window, net.n_features], x)?);
    let y = tape.constant(Tensor::vector(y));
    let pred = net.forward_tape(tape, bound, x, mode, rng)?;
    let err = tape.sub(pred, y)?;
    let err = tape.abs(err)?;
    Ok(tape.mean(err)?)
}

/// Trains an LSTNet with Adam on the MAE loss over shuffled minibatches and
/// returns the parameters with the best validation MAE.
pub fn train_forecaster<R: Rng + ?Sized>(
    config: &ForecasterConfig,
    data: &PreparedData,
    tolerance: f64,
    rng: &mut R,
) -> Result<(Forecaster, TrainReport)> {
    config.validate()?;
    if config.window != data.window {
        return Err(Error::Config(format!(
            "forecaster window {} but data prepared with {}",
            config.window, data.window
        )));
    }
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Empty("dataset split"));
    }
    let mut net = Lstnet::new(config.clone(), data.n_features, rng)?;
    let mut adam = Adam::new(
        &net.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let scale = data.target_norm.std;
    let mut order: Vec<usize> = data.train.clone().collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let (x, y) = data.gather(idx);
            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape);
            let loss = batch_loss(&net, &mut tape, &bound, x, y, Mode::Train, rng)?;
            let l = tape.value(loss).item()?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("forecaster loss at epoch {epoch}")));
            }
            total += l * idx.len() as f64;
            tape.backward(loss)?;
            net.params.accumulate_grads(&tape, &bound);
            adam.step(&mut net.params)?;
        }
        let candidate = Forecaster::new(net.clone(), data)?;
        let val_mae = candidate.evaluate(data, data.val.clone(), tolerance)?.mae;
        let train_mae = total / order.len() as f64 * scale;
        if !val_mae.is_finite() {
            return Err(Error::NonFinite(format!("validation MAE at epoch {epoch}")));
        }
        trace.push(EpochStats {
            epoch,
            train_mae,
            val_mae,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_mae < *b) {
            best = Some((val_mae, epoch, net.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            net.params = params;
            e
        }
        None => 0,
    };
    let model = Forecaster::new(net, data)?;
    let test = model.evaluate(data, data.test.clone(), tolerance)?;
    Ok((
        model,
        TrainReport {
            trace,
            best_epoch,
            test,
        },
    ))
}

/// Per-window regressors for the linear baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrFeatures {
    /// Feature row of the last window step.
    #[default]
    LastStep,
    /// Mean feature row over the window.
    WindowMean,
}

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Solves `(XᵀX + ridge·I) β = Xᵀy` by Cholesky factorization.
pub fn least_squares(x: &[f64], n_cols: usize, y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if n_cols == 0 || y.is_empty() || x.len() != y.len() * n_cols {
        return Err(Error::Dimension {
            what: "design matrix",
            expected: y.len() * n_cols,
            got: x.len(),
        });
    }
    let k = n_cols;
    let mut a = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for (row, &yi) in x.chunks(k).zip(y) {
        for i in 0..k {
            b[i] += row[i] * yi;
            for j in 0..=i {
                a[i * k + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        a[i * k + i] += ridge;
    }
    // lower-triangular factor in place
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Singular(format!("normal equations pivot {j} is {d}")));
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    let mut z = vec![0.0; k];
    for i in 0..k {
        let s: f64 = (0..i).map(|p| a[i * k + p] * z[p]).sum();
        z[i] = (b[i] - s) / a[i * k + i];
    }
    let mut beta = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|p| a[p * k + i] * beta[p]).sum();
        beta[i] = (z[i] - s) / a[i * k + i];
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite coefficients".into()));
    }
    Ok(beta)
}

fn lr_design(data: &PreparedData, idx: Range<usize>, mode: LrFeatures) -> Vec<f64> {
    let f = data.n_features;
    let mut x = Vec::with_capacity(idx.len() * (f + 1));
    for i in idx {
        let w = data.window_slice(i);
        match mode {
            LrFeatures::LastStep => x.extend_from_slice(&w[w.len() - f..]),
            LrFeatures::WindowMean => {
                let t = data.window as f64;
                x.extend((0..f).map(|j| w.iter().skip(j).step_by(f).sum::<f64>() / t));
            }
        }
        x.push(1.0);
    }
    x
}

/// Linear model fitted on training windows and scored on test windows.
/// Coefficients are for normalized features, intercept last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub coefficients: Vec<f64>,
    pub features: LrFeatures,
    pub test: ForecastMetrics,
}

pub fn linreg_baseline(data: &PreparedData, features: LrFeatures, tolerance: f64) -> Result<LinearBaseline> {
    let k = data.n_features + 1;
    let x = lr_design(data, data.train.clone(), features);
    let y: Vec<f64> = data.train.clone().map(|i| data.target(i)).collect();
    let coefficients = least_squares(&x, k, &y, DEFAULT_RIDGE)?;
    let xt = lr_design(data, data.test.clone(), features);
    let pred: Vec<f64> = xt
        .chunks(k)
        .map(|r| r.iter().zip(&coefficients).map(|(a, b)| a * b).sum())
        .collect();
    let yt: Vec<f64> = data.test.clone().map(|i| data.target(i)).collect();
    Ok(LinearBaseline {
        coefficients,
        features,
        test: metrics(&pred, &yt, tolerance)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> ForecasterConfig {
        ForecasterConfig {
            window: 8,
            kernel: 3,
            conv_channels: 4,
            pool: 2,
            lstm_hidden: 5,
            skip_hidden: 3,
            skip_period: 2,
            dropout: 0.2,
            fusion_hidden: 4,
            lr: 1e-2,
            batch_size: 16,
            epochs: 10,
            patience: None,
        }
    }

    fn series(rows: usize, f: impl Fn(usize) -> (f64, f64, f64)) -> ProcessSeries {
        let cols = vec!["a".to_string(), "b".to_string(), WIDTH_COLUMN.to_string()];
        let mut s = ProcessSeries::new(cols);
        for i in 0..rows {
            let (a, b, y) = f(i);
            s.push_row(&[a, b, y]).unwrap();
        }
        s
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn config_validation() {
        assert!(ForecasterConfig::default().validate().is_ok());
        assert_eq!(ForecasterConfig::default().pooled_len(), 13);
        let mut c = tiny();
        c.kernel = 9;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.skip_period = 4;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn metrics_hand_cases() {
        let m = metrics(&[3.0, 4.0], &[3.0, 4.0], 1.0).unwrap();
        assert_eq!((m.mae, m.rmse, m.qualification_rate), (0.0, 0.0, 1.0));
        let m = metrics(&[1.0, -1.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!((m.mae, m.rmse, m.qualification_rate), (1.0, 1.0, 1.0));
        let m = metrics(&[0.0, 2.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(m.mae, 1.0);
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.qualification_rate, 0.5);
        assert!(metrics(&[], &[], 1.0).is_err());
    }

    #[test]
    fn norm_round_trip() {
        let n = Norm::fit([480.1, 479.2, 481.9, 500.0].into_iter()).unwrap();
        for y in [480.48, -3.0, 1e6] {
            assert!((n.denormalize(n.normalize(y)) - y).abs() < 1e-12 * y.abs().max(1.0));
        }
        assert_eq!(Norm::fit([2.0, 2.0].into_iter()).unwrap().std, 1.0);
    }

    #[test]
    fn split_is_chronological_and_stats_are_train_only() {
        let s = series(108, |i| (i as f64, 1.0, 2.0 * i as f64));
        let d = PreparedData::new(&s, &names(), WIDTH_COLUMN, 8).unwrap();
        assert_eq!(d.n_windows(), 100);
        assert_eq!((d.train.clone(), d.val.clone(), d.test.clone()), (0..70, 70..85, 85..100));
        // column a over rows 0..78
        assert!((d.feature_norm[0].mean - 38.5).abs() < 1e-12);
        assert_eq!(d.target(0), 16.0);
    }

    #[test]
    fn zero_parameters_predict_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Lstnet::new(tiny(), 2, &mut rng).unwrap();
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            net.params_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = net.output_layer();
        net.params_mut().value_mut(out.bias).data_mut()[0] = 0.75;
        let s = series(200, |i| ((i as f64).sin(), 2.0, 480.0 + i as f64 * 0.01));
        let d = PreparedData::new(&s, &names(), WIDTH_COLUMN, 8).unwrap();
        let fc = Forecaster::new(net, &d).unwrap();
        let p = fc.predict_windows(&d, 0..5).unwrap();
        let want = d.target_norm.denormalize(0.75);
        assert!(p.iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Lstnet::new(tiny(), 2, &mut rng).unwrap();
        let x: Vec<f64> = (0..3 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(net.predict_normalized(&x).unwrap(), net.predict_normalized(&x).unwrap());
    }

    #[test]
    fn raw_predict_matches_prepared_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Lstnet::new(tiny(), 2, &mut rng).unwrap();
        let s = series(200, |i| ((i as f64 * 0.1).sin(), (i as f64 * 0.03).cos(), 480.0));
        let d = PreparedData::new(&s, &names(), WIDTH_COLUMN, 8).unwrap();
        let fc = Forecaster::new(net, &d).unwrap();
        let raw = s.select(&names()).unwrap();
        let a = fc.predict(&raw[10 * 2..18 * 2]).unwrap();
        let b = fc.predict_windows(&d, 10..11).unwrap()[0];
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn constant_target_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = series(400, |i| ((i as f64 * 0.2).sin(), (i as f64 * 0.05).cos(), 480.0));
        let d = PreparedData::new(&s, &names(), WIDTH_COLUMN, 8).unwrap();
        let (_, report) = train_forecaster(&tiny(), &d, 1.0, &mut rng).unwrap();
        assert_eq!(report.trace.len(), 10);
        assert!(report.trace.iter().all(|e| e.train_mae.is_finite() && e.val_mae.is_finite()));
        // within a hundredth of the width tolerance
        assert!(report.test.mae < 1e-2, "{:?}", report.test);
    }

    #[test]
    fn training_is_reproducible_and_keeps_best_epoch() {
        let s = series(300, |i| ((i as f64 * 0.2).sin(), (i as f64 * 0.05).cos(), (i as f64 * 0.2).sin()));
        let d = PreparedData::new(&s, &names(), WIDTH_COLUMN, 8).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            train_forecaster(&tiny(), &d, 1.0, &mut rng).unwrap()
        };
        let (fa, ra) = run();
        let (fb, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(fa, fb);
        let best = ra.trace.iter().map(|e| e.val_mae).fold(f64::INFINITY, f64::min);
        let m = fa.evaluate(&d, d.val.clone(), 1.0).unwrap();
        assert!((m.mae - best).abs() < 1e-12);
        assert_eq!(ra.trace[ra.best_epoch - 1].val_mae, best);
    }

    #[test]
    fn patience_stops_early() {
        let s = series(300, |i| ((i as f64 * 0.2).sin(), 0.0, 1.0));
        let d = PreparedData::new(&s, &names(), WIDTH_COLUMN, 8).unwrap();
        let mut cfg = tiny();
        cfg.epochs = 200;
        cfg.lr = 0.0;
        cfg.patience = Some(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, r) = train_forecaster(&cfg, &d, 1.0, &mut rng).unwrap();
        assert_eq!(r.trace.len(), 4);
    }

    #[test]
    fn forecaster_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = series(200, |i| ((i as f64 * 0.1).sin(), 1.0 + i as f64, 470.0 + (i % 7) as f64));
        let d = PreparedData::new(&s, &names(), WIDTH_COLUMN, 8).unwrap();
        let fc = Forecaster::new(Lstnet::new(tiny(), 2, &mut rng).unwrap(), &d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("width.json");
        fc.save(&p).unwrap();
        assert_eq!(Forecaster::load(&p).unwrap(), fc);
    }

    #[test]
    fn least_squares_recovers_exact_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let beta = [2.0, -3.0, 0.5, 10.0];
        let n = 200;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).chain([1.0]).collect();
            y.push(r.iter().zip(&beta).map(|(a, b)| a * b).sum());
            x.extend(r);
        }
        let b = least_squares(&x, 4, &y, 0.0).unwrap();
        let b_ridge = least_squares(&x, 4, &y, 1e-6).unwrap();
        for i in 0..4 {
            assert!((b[i] - beta[i]).abs() < 1e-9);
            assert!((b[i] - b_ridge[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn duplicate_features_are_damped() {
        let x: Vec<f64> = (0..50).flat_map(|i| [i as f64, i as f64, 1.0]).collect();
        let y: Vec<f64> = (0..50).map(|i| 2.0 * i as f64 + 1.0).collect();
        let b = least_squares(&x, 3, &y, 1e-6).unwrap();
        assert!((b[0] + b[1] - 2.0).abs() < 1e-4);
        assert!((b[0] - b[1]).abs() < 1e-4);
    }

    #[test]
    fn linear_baseline_fits_linear_series() {
        let a = |i: usize| (i as f64 * 0.3).sin();
        let b = |i: usize| (i as f64 * 0.11).cos();
        // the target at row k is linear in the features of row k - 1
        let shifted = series(300, |i| {
            let y = if i == 0 { 480.0 } else { 3.0 * a(i - 1) - 2.0 * b(i - 1) + 480.0 };
            (a(i), b(i), y)
        });
        let d = PreparedData::new(&shifted, &names(), WIDTH_COLUMN, 8).unwrap();
        let lb = linreg_baseline(&d, LrFeatures::LastStep, 1.0).unwrap();
        assert!(lb.test.mae < 1e-4, "{:?}", lb.test);
        assert!(linreg_baseline(&d, LrFeatures::WindowMean, 1.0).is_ok());
    }
}
