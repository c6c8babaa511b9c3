//! Synthetic calendering plant.
//!
//! Width and thickness follow first-order lags toward steady states set by
//! the knife spacing and the two roll gaps. Auxiliary channels (temperatures,
//! currents, speeds) are AR(1) processes whose means may track a control.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::ProcessSeries;

pub const KNIFE_COLUMN: &str = "knife_spacing_mm";
pub const DS_GAP_COLUMN: &str = "ds_roll_gap_mm";
pub const OS_GAP_COLUMN: &str = "os_roll_gap_mm";
pub const WIDTH_COLUMN: &str = "width_mm";
pub const THICKNESS_COLUMN: &str = "thickness_mm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WidthResponse {
    /// Steady-state width per mm of knife spacing.
    pub shrink: f64,
    pub lag: f64,
    pub noise: f64,
}

impl Default for WidthResponse {
    fn default() -> Self {
        Self {
            shrink: 0.985,
            lag: 0.6,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThicknessResponse {
    /// Steady-state thickness per mm of mean roll gap.
    pub draw_ratio: f64,
    /// Additive thickness per mm of DS-minus-OS gap difference.
    pub skew: f64,
    pub lag: f64,
    pub noise: f64,
}

impl Default for ThicknessResponse {
    fn default() -> Self {
        Self {
            draw_ratio: 1.0,
            skew: 0.1,
            lag: 0.5,
            noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Coupling {
    /// Width lost per mm of mean roll gap above `ref_gap`.
    pub gap_to_width: f64,
    pub ref_gap: f64,
}

impl Default for Coupling {
    fn default() -> Self {
        Self {
            gap_to_width: 20.0,
            ref_gap: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorBounds {
    pub knife: [f64; 2],
    pub gap: [f64; 2],
}

impl Default for ActuatorBounds {
    fn default() -> Self {
        Self {
            knife: [360.0, 500.0],
            gap: [1.8, 3.6],
        }
    }
}

impl ActuatorBounds {
    pub fn clamp(&self, sp: Setpoints) -> Setpoints {
        Setpoints {
            knife: sp.knife.clamp(self.knife[0], self.knife[1]),
            ds_gap: sp.ds_gap.clamp(self.gap[0], self.gap[1]),
            os_gap: sp.os_gap.clamp(self.gap[0], self.gap[1]),
        }
    }

    pub fn contains(&self, sp: Setpoints) -> bool {
        self.clamp(sp) == sp
    }

    /// `[lo, hi]` for actuator `i` in knife, DS, OS order.
    pub fn range(&self, i: usize) -> [f64; 2] {
        if i == 0 {
            self.knife
        } else {
            self.gap
        }
    }
}

/// Control variable an auxiliary channel mean may follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    Knife,
    DsGap,
    OsGap,
    MeanGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlLink {
    pub control: Control,
    pub coefficient: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxChannel {
    pub name: String,
    pub mean: f64,
    pub persistence: f64,
    pub noise: f64,
    #[serde(default)]
    pub link: Option<ControlLink>,
}

impl AuxChannel {
    fn plain(name: &str, mean: f64, persistence: f64, noise: f64) -> Self {
        Self {
            name: name.to_owned(),
            mean,
            persistence,
            noise,
            link: None,
        }
    }

    fn linked(name: &str, mean: f64, persistence: f64, noise: f64, link: ControlLink) -> Self {
        Self {
            link: Some(link),
            ..Self::plain(name, mean, persistence, noise)
        }
    }

    /// Mean the channel reverts to under the given set-points.
    pub fn target_mean(&self, sp: Setpoints) -> f64 {
        match self.link {
            None => self.mean,
            Some(l) => self.mean + l.coefficient * (sp.control(l.control) - l.reference),
        }
    }

    /// Noise-free AR(1) extrapolation one step ahead.
    pub fn extrapolate(&self, current: f64, sp: Setpoints) -> f64 {
        let m = self.target_mean(sp);
        m + self.persistence * (current - m)
    }
}

fn default_aux() -> Vec<AuxChannel> {
    let knife = |coefficient| ControlLink {
        control: Control::Knife,
        coefficient,
        reference: 430.0,
    };
    let gap = |coefficient| ControlLink {
        control: Control::MeanGap,
        coefficient,
        reference: 2.7,
    };
    vec![
        AuxChannel::linked("calender_main_motor_current_a", 180.0, 0.9, 1.5, gap(-40.0)),
        AuxChannel::plain("calender_line_speed", 30.0, 0.95, 0.15),
        AuxChannel::plain("calender_discharge_temp_c", 95.0, 0.97, 0.3),
        AuxChannel::plain("draw_roll_speed", 31.0, 0.95, 0.15),
        AuxChannel::plain("conveyor_belt_speed", 29.0, 0.95, 0.15),
        AuxChannel::plain("top_roll_temp_c", 85.0, 0.98, 0.2),
        AuxChannel::plain("bottom_roll_temp_c", 88.0, 0.98, 0.2),
        AuxChannel::linked("extruder_main_motor_current_a", 320.0, 0.9, 3.0, knife(0.5)),
        AuxChannel::plain("extruder_screw_speed", 40.0, 0.95, 0.3),
        AuxChannel::linked("extruder_head_pressure_n", 12.0, 0.9, 0.2, knife(0.01)),
        AuxChannel::plain("extruder_head_temp_c", 100.0, 0.97, 0.3),
        AuxChannel::linked("sheet_temp_after_calender_c", 75.0, 0.95, 0.4, gap(5.0)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    pub width: WidthResponse,
    pub thickness: ThicknessResponse,
    pub coupling: Coupling,
    pub bounds: ActuatorBounds,
    pub aux: Vec<AuxChannel>,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            width: WidthResponse::default(),
            thickness: ThicknessResponse::default(),
            coupling: Coupling::default(),
            bounds: ActuatorBounds::default(),
            aux: default_aux(),
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let lag_ok = |l: f64| l > 0.0 && l <= 1.0;
        if !lag_ok(self.width.lag) || !lag_ok(self.thickness.lag) {
            return Err(Error::Config("plant lags must lie in (0, 1]".into()));
        }
        if self.width.noise < 0.0 || self.thickness.noise < 0.0 {
            return Err(Error::Config("plant noise must be non-negative".into()));
        }
        for ch in &self.aux {
            if ch.persistence.abs() >= 1.0 || ch.noise < 0.0 {
                return Err(Error::Config(format!(
                    "aux channel {} needs |persistence| < 1 and noise >= 0",
                    ch.name
                )));
            }
        }
        let b = self.bounds;
        if !(b.knife[0] > 0.0 && b.knife[0] < b.knife[1] && b.gap[0] > 0.0 && b.gap[0] < b.gap[1]) {
            return Err(Error::Config("actuator bounds must be positive, increasing ranges".into()));
        }
        Ok(())
    }

    pub fn steady_width(&self, sp: Setpoints) -> f64 {
        self.width.shrink * sp.knife - self.coupling.gap_to_width * (sp.mean_gap() - self.coupling.ref_gap)
    }

    pub fn steady_thickness(&self, sp: Setpoints) -> f64 {
        self.thickness.draw_ratio * sp.mean_gap() + self.thickness.skew * (sp.ds_gap - sp.os_gap)
    }

    /// Symmetric-gap set-points whose steady state hits both targets.
    pub fn setpoints_for(&self, width: f64, thickness: f64) -> Setpoints {
        let gap = thickness / self.thickness.draw_ratio;
        let knife = (width + self.coupling.gap_to_width * (gap - self.coupling.ref_gap)) / self.width.shrink;
        Setpoints {
            knife,
            ds_gap: gap,
            os_gap: gap,
        }
    }

    /// Column names of the process-parameter features, controls first.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec![
            KNIFE_COLUMN.to_owned(),
            DS_GAP_COLUMN.to_owned(),
            OS_GAP_COLUMN.to_owned(),
        ];
        names.extend(self.aux.iter().map(|c| c.name.clone()));
        names
    }

    /// Feature columns followed by the width and thickness columns.
    pub fn series_columns(&self) -> Vec<String> {
        let mut c = self.feature_names();
        c.push(WIDTH_COLUMN.to_owned());
        c.push(THICKNESS_COLUMN.to_owned());
        c
    }

    /// Plant resting at the steady state of `sp`, auxiliaries at their means.
    pub fn steady_state(&self, sp: Setpoints) -> PlantState {
        PlantState {
            width: self.steady_width(sp),
            thickness: self.steady_thickness(sp),
            setpoints: sp,
            aux: self.aux.iter().map(|c| c.target_mean(sp)).collect(),
        }
    }

    pub fn mid_setpoints(&self) -> Setpoints {
        let b = self.bounds;
        let g = 0.5 * (b.gap[0] + b.gap[1]);
        Setpoints {
            knife: 0.5 * (b.knife[0] + b.knife[1]),
            ds_gap: g,
            os_gap: g,
        }
    }
}

/// Actuator set-points (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoints {
    pub knife: f64,
    pub ds_gap: f64,
    pub os_gap: f64,
}

impl Setpoints {
    pub fn mean_gap(&self) -> f64 {
        0.5 * (self.ds_gap + self.os_gap)
    }

    pub fn control(&self, c: Control) -> f64 {
        match c {
            Control::Knife => self.knife,
            Control::DsGap => self.ds_gap,
            Control::OsGap => self.os_gap,
            Control::MeanGap => self.mean_gap(),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.knife, self.ds_gap, self.os_gap]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            knife: a[0],
            ds_gap: a[1],
            os_gap: a[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub width: f64,
    pub thickness: f64,
    /// Set-points applied during the next step.
    pub setpoints: Setpoints,
    pub aux: Vec<f64>,
}

impl PlantState {
    /// Feature row (controls then auxiliaries) in `feature_names` order.
    pub fn feature_row(&self) -> Vec<f64> {
        let mut row = self.setpoints.to_array().to_vec();
        row.extend_from_slice(&self.aux);
        row
    }
}

const MIN_OUTPUT: f64 = 1e-3;

/// Advances the plant one step under `state.setpoints`.
pub fn plant_step<R: Rng + ?Sized>(state: &PlantState, params: &PlantParams, rng: &mut R) -> PlantState {
    let sp = state.setpoints;
    let w_ss = params.steady_width(sp);
    let h_ss = params.steady_thickness(sp);
    let zw: f64 = rng.sample(StandardNormal);
    let zh: f64 = rng.sample(StandardNormal);
    let width = state.width + params.width.lag * (w_ss - state.width) + params.width.noise * zw;
    let thickness =
        state.thickness + params.thickness.lag * (h_ss - state.thickness) + params.thickness.noise * zh;
    let aux = params
        .aux
        .iter()
        .zip(&state.aux)
        .map(|(ch, &x)| {
            let z: f64 = rng.sample(StandardNormal);
            ch.extrapolate(x, sp) + ch.noise * z
        })
        .collect();
    PlantState {
        width: width.max(MIN_OUTPUT),
        thickness: thickness.max(MIN_OUTPUT),
        setpoints: sp,
        aux,
    }
}

/// How set-points move while recording a training series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Excitation {
    /// Set-points never move.
    Hold,
    RandomWalk,
    StepChanges,
    Mixed,
}

const WALK_KNIFE_STD: f64 = 1.0;
const WALK_GAP_STD: f64 = 0.015;
const JUMP_PROBABILITY: f64 = 1.0 / 40.0;
const HOLD_STEPS: std::ops::Range<usize> = 20..80;
const MAX_GAP_SKEW: f64 = 0.2;

struct Exciter {
    kind: Excitation,
    hold_left: usize,
}

impl Exciter {
    fn jump<R: Rng + ?Sized>(bounds: &ActuatorBounds, rng: &mut R) -> Setpoints {
        let knife = rng.random_range(bounds.knife[0]..=bounds.knife[1]);
        let gap = rng.random_range(bounds.gap[0]..=bounds.gap[1]);
        let skew = rng.random_range(-MAX_GAP_SKEW..=MAX_GAP_SKEW);
        bounds.clamp(Setpoints {
            knife,
            ds_gap: gap + 0.5 * skew,
            os_gap: gap - 0.5 * skew,
        })
    }

    fn walk<R: Rng + ?Sized>(sp: Setpoints, bounds: &ActuatorBounds, rng: &mut R) -> Setpoints {
        let reflect = |v: f64, [lo, hi]: [f64; 2]| {
            let v = if v < lo { 2.0 * lo - v } else { v };
            let v = if v > hi { 2.0 * hi - v } else { v };
            v.clamp(lo, hi)
        };
        let zk: f64 = rng.sample(StandardNormal);
        let zd: f64 = rng.sample(StandardNormal);
        let zo: f64 = rng.sample(StandardNormal);
        Setpoints {
            knife: reflect(sp.knife + WALK_KNIFE_STD * zk, bounds.knife),
            ds_gap: reflect(sp.ds_gap + WALK_GAP_STD * zd, bounds.gap),
            os_gap: reflect(sp.os_gap + WALK_GAP_STD * zo, bounds.gap),
        }
    }

    fn next<R: Rng + ?Sized>(&mut self, sp: Setpoints, bounds: &ActuatorBounds, rng: &mut R) -> Setpoints {
        match self.kind {
            Excitation::Hold => sp,
            Excitation::RandomWalk => Self::walk(sp, bounds, rng),
            Excitation::StepChanges => {
                if self.hold_left == 0 {
                    self.hold_left = rng.random_range(HOLD_STEPS);
                    Self::jump(bounds, rng)
                } else {
                    self.hold_left -= 1;
                    sp
                }
            }
            Excitation::Mixed => {
                if rng.random::<f64>() < JUMP_PROBABILITY {
                    Self::jump(bounds, rng)
                } else {
                    Self::walk(sp, bounds, rng)
                }
            }
        }
    }
}

/// Records `n_steps` rows of plant operation under the given excitation.
///
/// Row `t` holds the set-points applied at step `t`, the auxiliary readings
/// and the width/thickness measured before that step, so a window ending at
/// row `t` predicts the width/thickness of row `t + 1`.
pub fn generate_dataset<R: Rng + ?Sized>(
    params: &PlantParams,
    n_steps: usize,
    window: usize,
    excitation: Excitation,
    rng: &mut R,
) -> Result<ProcessSeries> {
    params.validate()?;
    if n_steps < window + 1 {
        return Err(Error::Dataset(format!(
            "{n_steps} steps cannot fill a window of {window} plus one target"
        )));
    }
    let mut series = ProcessSeries::new(params.series_columns());
    let mut state = params.steady_state(params.mid_setpoints());
    let mut exciter = Exciter {
        kind: excitation,
        hold_left: 0,
    };
    for t in 0..n_steps {
        if t > 0 {
            state.setpoints = exciter.next(state.setpoints, &params.bounds, rng);
        }
        let mut row = state.feature_row();
        row.push(state.width);
        row.push(state.thickness);
        series.push_row(&row)?;
        state = plant_step(&state, params, rng);
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet() -> PlantParams {
        let mut p = PlantParams::default();
        p.width.noise = 0.0;
        p.thickness.noise = 0.0;
        for ch in &mut p.aux {
            ch.noise = 0.0;
        }
        p
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let p = quiet();
        let s = p.steady_state(Setpoints {
            knife: 470.0,
            ds_gap: 2.5,
            os_gap: 2.4,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let next = plant_step(&s, &p, &mut rng);
        assert!((next.width - s.width).abs() < 1e-12);
        assert!((next.thickness - s.thickness).abs() < 1e-12);
        for (a, b) in next.aux.iter().zip(&s.aux) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_lag_jumps_to_steady_state() {
        let mut p = quiet();
        p.width.lag = 1.0;
        p.thickness.lag = 1.0;
        let mut s = p.steady_state(p.mid_setpoints());
        s.setpoints = Setpoints {
            knife: 487.8,
            ds_gap: 3.0,
            os_gap: 3.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let next = plant_step(&s, &p, &mut rng);
        assert!((next.width - p.steady_width(s.setpoints)).abs() < 1e-12);
        assert!((next.thickness - 3.0).abs() < 1e-12);
    }

    #[test]
    fn default_steady_width_example() {
        let p = PlantParams::default();
        let w = p.steady_width(Setpoints {
            knife: 487.8,
            ds_gap: 3.0,
            os_gap: 3.0,
        });
        // 0.985 * 487.8 - 20 * (3.0 - 3.0)
        assert!((w - 480.483).abs() < 1e-9);
    }

    #[test]
    fn setpoints_for_inverts_steady_state() {
        let p = PlantParams::default();
        for (w, h) in [(480.0, 3.0), (480.0, 2.2), (380.0, 3.0), (380.0, 2.2)] {
            let sp = p.setpoints_for(w, h);
            assert!(p.bounds.contains(sp));
            assert!((p.steady_width(sp) - w).abs() < 1e-9);
            assert!((p.steady_thickness(sp) - h).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_free_lag_converges_geometrically() {
        let p = quiet();
        let mut s = p.steady_state(p.mid_setpoints());
        s.setpoints = Setpoints {
            knife: 400.0,
            ds_gap: 2.2,
            os_gap: 2.3,
        };
        let w_ss = p.steady_width(s.setpoints);
        let h_ss = p.steady_thickness(s.setpoints);
        let (w0, h0) = ((s.width - w_ss).abs(), (s.thickness - h_ss).abs());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 1..=20 {
            s = plant_step(&s, &p, &mut rng);
            let we = (s.width - w_ss).abs();
            let he = (s.thickness - h_ss).abs();
            assert!((we - 0.4f64.powi(t) * w0).abs() < 1e-9 * w0.max(1.0));
            assert!((he - 0.5f64.powi(t) * h0).abs() < 1e-9);
        }
    }

    #[test]
    fn steady_width_monotonicity() {
        let p = PlantParams::default();
        let base = Setpoints {
            knife: 430.0,
            ds_gap: 2.7,
            os_gap: 2.7,
        };
        let more_knife = Setpoints { knife: 431.0, ..base };
        let wider_gap = Setpoints {
            ds_gap: 2.8,
            os_gap: 2.8,
            ..base
        };
        assert!(p.steady_width(more_knife) > p.steady_width(base));
        assert!(p.steady_width(wider_gap) < p.steady_width(base));
    }

    #[test]
    fn dataset_is_reproducible_and_finite() {
        let p = PlantParams::default();
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate_dataset(&p, 500, 32, Excitation::Mixed, &mut rng).unwrap()
        };
        let a = gen(11);
        assert_eq!(a, gen(11));
        assert_ne!(a, gen(12));
        assert_eq!(a.n_rows(), 500);
        assert_eq!(a.n_cols(), 3 + p.aux.len() + 2);
        let w = a.column(WIDTH_COLUMN).unwrap();
        let h = a.column(THICKNESS_COLUMN).unwrap();
        assert!(w.iter().chain(&h).all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn held_quiet_plant_is_constant() {
        let p = quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_dataset(&p, 100, 32, Excitation::Hold, &mut rng).unwrap();
        let first = s.row(0).to_vec();
        for i in 1..s.n_rows() {
            for (a, b) in s.row(i).iter().zip(&first) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_short_dataset_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(generate_dataset(&PlantParams::default(), 32, 32, Excitation::Mixed, &mut rng).is_err());
    }

    #[test]
    fn excitations_respect_bounds() {
        let p = PlantParams::default();
        for ex in [Excitation::RandomWalk, Excitation::StepChanges, Excitation::Mixed] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let s = generate_dataset(&p, 3000, 32, ex, &mut rng).unwrap();
            for i in 0..s.n_rows() {
                let r = s.row(i);
                let sp = Setpoints::from_array([r[0], r[1], r[2]]);
                assert!(p.bounds.contains(sp), "{ex:?} row {i}: {sp:?}");
            }
        }
    }

    #[test]
    fn mixed_excitation_spans_the_target_widths() {
        let p = PlantParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = generate_dataset(&p, 50_000, 32, Excitation::Mixed, &mut rng).unwrap();
        let w = s.column(WIDTH_COLUMN).unwrap();
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= 370.0 && hi >= 490.0, "{lo}..{hi}");
        let h = s.column(THICKNESS_COLUMN).unwrap();
        let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= 2.1 && hi >= 3.1, "{lo}..{hi}");
    }
}
