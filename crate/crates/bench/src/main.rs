use std::path::PathBuf;
use std::process::ExitCode;

use calender::mpdppo::Variant;
use calender_bench::grid::{self, Cell, Models};
use calender_bench::{emit_outputs, load_config, Config, Result, Scenario};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calender", version, about = "Calendering controller experiments")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Variant name, e.g. mpd-ppo or reward-3.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Scenario as w480-t3.0-s100 or 480x3.0[x100].
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load cached) width and thickness forecasters.
    TrainForecaster,
    /// Train and evaluate one variant/scenario/seed cell.
    TrainAgent,
    /// Run the configured variant × scenario × seed grid.
    RunGrid,
    /// Run every variant at the ablation scenario.
    RunAblations,
    /// Greedy evaluation of a trained cell's checkpoint.
    Evaluate,
    /// Rebuild tables and plots from the records under the output directory.
    EmitPlots,
}

struct Setup {
    cfg: Config,
    variant: Option<Variant>,
}

fn setup(cli: &Cli) -> Result<Setup> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seeds = vec![seed];
    }
    let variant = cli.variant.as_deref().map(Variant::parse).transpose()?;
    if let Some(v) = variant {
        cfg.experiment.variants = vec![v];
    }
    if let Some(s) = &cli.scenario {
        let s = Scenario::parse(s, cfg.env.max_steps)?;
        cfg.experiment.targets = vec![[s.width, s.thickness]];
        cfg.experiment.steps_per_episode = vec![s.steps];
        cfg.experiment.ablation_target = [s.width, s.thickness];
        cfg.experiment.ablation_steps = s.steps;
    }
    cfg.validate()?;
    Ok(Setup { cfg, variant })
}

fn single_cell(s: &Setup) -> Cell {
    let x = &s.cfg.experiment;
    Cell {
        variant: x.variants[0],
        scenario: grid::grid_scenarios(&s.cfg)[0],
        seed: x.seeds[0],
    }
}

fn report(cfg: &Config, cli: &Cli) -> Result<()> {
    let records = grid::load_records(&cli.out_dir)?;
    for p in emit_outputs(&records, &cli.out_dir, Some(&grid::ablation_scenario(cfg)))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_plan(cfg: &Config, cli: &Cli, plan: &[Cell]) -> Result<()> {
    let models = grid::prepare_models(cfg, &cli.out_dir)?;
    let records = grid::run_grid(cfg, &models, plan, &cli.out_dir, cfg.experiment.workers);
    let crashed = records.iter().filter(|r| r.crashed()).count();
    if crashed > 0 {
        eprintln!("{crashed} of {} runs crashed and were recorded as failed", records.len());
    }
    report(cfg, cli)
}

fn run(cli: &Cli) -> Result<()> {
    let s = setup(cli)?;
    let cfg = &s.cfg;
    match cli.command {
        Command::TrainForecaster => {
            let seed = cli.seed.unwrap_or(cfg.experiment.data_seed);
            let (_, _, rows) = grid::prepare_forecasters(cfg, &cli.out_dir, seed)?;
            let dir = grid::forecaster_dir(cfg, &cli.out_dir, seed)?;
            match rows {
                None => println!("forecasters already trained in {}", dir.display()),
                Some(rows) => {
                    println!("target,model,mae,rmse,qualification_rate");
                    for r in rows {
                        println!("{:?},{},{:.4},{:.4},{:.4}", r.target, r.model, r.mae, r.rmse, r.qualification_rate);
                    }
                    println!("saved to {}", dir.display());
                }
            }
        }
        Command::TrainAgent => {
            let cell = single_cell(&s);
            let models = grid::prepare_models(cfg, &cli.out_dir)?;
            let r = grid::run_cell(cfg, &models, &cell, &cli.out_dir)?;
            println!(
                "{} {} seed {}: average optimize step {} (success rate {}), eval steps {:?}",
                r.variant, r.scenario, r.seed, r.average_optimize_step, r.success_rate, r.eval_steps
            );
            println!("outputs in {}", cell.dir(&cli.out_dir).display());
        }
        Command::RunGrid => run_plan(cfg, cli, &grid::grid_plan(cfg))?,
        Command::RunAblations => {
            let mut plan = grid::ablation_plan(cfg);
            if let Some(v) = s.variant {
                plan.retain(|c| c.variant == v);
            }
            run_plan(cfg, cli, &plan)?
        }
        Command::Evaluate => {
            let cell = single_cell(&s);
            let models: Models = grid::prepare_models(cfg, &cli.out_dir)?;
            let e = grid::evaluate_cell(cfg, &models, &cell, &cli.out_dir)?;
            println!(
                "{} {} seed {}: average optimize step {} (success rate {}), eval steps {:?}",
                cell.variant, cell.scenario, cell.seed, e.mean_optimize_step, e.success_rate, e.optimize_steps
            );
        }
        Command::EmitPlots => report(cfg, cli)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
