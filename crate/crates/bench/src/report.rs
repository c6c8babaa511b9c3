//! Aggregate tables computed from run records.

use std::collections::BTreeMap;
use std::path::Path;

use calender::mpdppo::Variant;
use serde::Serialize;

use crate::error::{io_error, Result};
use crate::grid::{RunRecord, Scenario};

/// Optimize-step statistics of one (variant, scenario) over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub variant: Variant,
    pub scenario: Scenario,
    pub width_mm: f64,
    pub thickness_mm: f64,
    pub steps_per_episode: usize,
    pub seeds: usize,
    /// Seeds whose greedy evaluation never reached both tolerances.
    pub failed_seeds: usize,
    pub crashed_seeds: usize,
    pub mean_optimize_step: f64,
    pub min_optimize_step: f64,
    pub max_optimize_step: f64,
}

impl Summary {
    /// Every seed ended at the failure sentinel.
    pub fn all_failed(&self) -> bool {
        self.failed_seeds == self.seeds
    }
}

/// Summaries ordered by variant then scenario.
pub fn summarize(records: &[RunRecord]) -> Vec<Summary> {
    let mut groups: BTreeMap<(Variant, (i64, i64, usize)), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.variant, r.scenario.sort_key())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.seed);
            let steps: Vec<f64> = rs.iter().map(|r| r.average_optimize_step).collect();
            let sentinel = rs[0].scenario.steps as f64;
            Summary {
                variant: rs[0].variant,
                scenario: rs[0].scenario,
                width_mm: rs[0].scenario.width,
                thickness_mm: rs[0].scenario.thickness,
                steps_per_episode: rs[0].scenario.steps,
                seeds: rs.len(),
                failed_seeds: steps.iter().filter(|&&s| s >= sentinel).count(),
                crashed_seeds: rs.iter().filter(|r| r.crashed()).count(),
                mean_optimize_step: steps.iter().sum::<f64>() / steps.len() as f64,
                min_optimize_step: steps.iter().copied().fold(f64::INFINITY, f64::min),
                max_optimize_step: steps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

pub fn find<'a>(summaries: &'a [Summary], variant: Variant, scenario: &Scenario) -> Option<&'a Summary> {
    summaries.iter().find(|s| s.variant == variant && s.scenario.name() == scenario.name())
}

/// One row of an ablation table: a variant, or an ordering check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub kind: &'static str,
    pub name: String,
    pub mean_optimize_step: Option<f64>,
    pub failed_seeds: Option<usize>,
    pub seeds: Option<usize>,
    /// `pass`/`fail` for gated checks, `info` for reported orderings,
    /// `missing` when a variant has no records.
    pub verdict: String,
}

/// Ordering to verify between variants at one scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Check {
    /// `a` strictly fewer steps than `b`.
    Less(Variant, Variant),
    /// `a` no more steps than `b`.
    AtMost(Variant, Variant),
    /// `a` has the most steps among the set (ties count), or failed.
    Worst(Variant, &'static [Variant]),
}

impl Check {
    pub fn describe(&self) -> String {
        match self {
            Check::Less(a, b) => format!("{a} < {b}"),
            Check::AtMost(a, b) => format!("{a} <= {b}"),
            Check::Worst(a, among) => {
                let names: Vec<String> = among.iter().map(|v| v.name()).collect();
                format!("{a} worst of {}", names.join(" / "))
            }
        }
    }

    /// `None` if a variant is missing.
    pub fn holds(&self, summaries: &[Summary], scenario: &Scenario) -> Option<bool> {
        let mean = |v: Variant| find(summaries, v, scenario).map(|s| s.mean_optimize_step);
        match *self {
            Check::Less(a, b) => Some(mean(a)? < mean(b)?),
            Check::AtMost(a, b) => Some(mean(a)? <= mean(b)?),
            Check::Worst(a, among) => {
                let sa = find(summaries, a, scenario)?;
                let mut worst = true;
                for &v in among {
                    worst &= sa.mean_optimize_step >= mean(v)?;
                }
                Some(worst || sa.all_failed())
            }
        }
    }
}

/// Ablation table layout: variants shown and the checks under them.
pub struct AblationTable {
    pub file: &'static str,
    pub variants: &'static [Variant],
    pub gated: &'static [Check],
    pub reported: &'static [Check],
}

const TABLE_VI_SET: &[Variant] = &[Variant::SingleNet, Variant::MultibranchUniform, Variant::MpdPpo];

pub const ABLATION_TABLES: [AblationTable; 3] = [
    AblationTable {
        file: "tableVI.csv",
        variants: TABLE_VI_SET,
        gated: &[
            Check::Less(Variant::MpdPpo, Variant::SingleNet),
            Check::Worst(Variant::SingleNet, TABLE_VI_SET),
        ],
        reported: &[],
    },
    AblationTable {
        file: "tableVII.csv",
        variants: &[Variant::MpdPpoUniformClip, Variant::MpdPpo],
        gated: &[Check::Less(Variant::MpdPpo, Variant::MpdPpoUniformClip)],
        reported: &[],
    },
    AblationTable {
        file: "tableVIII.csv",
        variants: &[Variant::Reward(1), Variant::Reward(2), Variant::Reward(3), Variant::Reward(4)],
        gated: &[Check::AtMost(Variant::Reward(4), Variant::Reward(3))],
        reported: &[Check::Less(Variant::Reward(2), Variant::Reward(1))],
    },
];

pub fn ablation_rows(table: &AblationTable, summaries: &[Summary], scenario: &Scenario) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &v in table.variants {
        let s = find(summaries, v, scenario);
        rows.push(AblationRow {
            kind: "variant",
            name: v.name(),
            mean_optimize_step: s.map(|s| s.mean_optimize_step),
            failed_seeds: s.map(|s| s.failed_seeds),
            seeds: s.map(|s| s.seeds),
            verdict: if s.is_some() { String::new() } else { "missing".into() },
        });
    }
    let checks = table.gated.iter().map(|c| (c, true)).chain(table.reported.iter().map(|c| (c, false)));
    for (c, gated) in checks {
        let verdict = match (c.holds(summaries, scenario), gated) {
            (None, _) => "missing".to_string(),
            (Some(ok), true) => if ok { "pass" } else { "fail" }.to_string(),
            (Some(ok), false) => format!("info: {ok}"),
        };
        rows.push(AblationRow {
            kind: "check",
            name: c.describe(),
            mean_optimize_step: None,
            failed_seeds: None,
            seeds: None,
            verdict,
        });
    }
    rows
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_error(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_error(path))?;
    Ok(())
}

/// `tableV.csv`: one row per (variant, scenario).
pub fn write_table_v(path: &Path, summaries: &[Summary]) -> Result<()> {
    write_csv(path, summaries)
}

/// `tableVI.csv`, `tableVII.csv` and `tableVIII.csv` for the records at
/// `scenario`.
pub fn write_ablation_tables(dir: &Path, summaries: &[Summary], scenario: &Scenario) -> Result<()> {
    for t in &ABLATION_TABLES {
        write_csv(&dir.join(t.file), &ablation_rows(t, summaries, scenario))?;
    }
    Ok(())
}
