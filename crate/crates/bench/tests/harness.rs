use std::path::Path;
use std::process::Command;

use calender::mpdppo::Variant;
use calender_bench::config::Process;
use calender_bench::grid::{self, Cell, Models};
use calender_bench::{emit_outputs, Config, RunRecord, Scenario};

fn tiny() -> Config {
    let mut cfg = Config::default();
    cfg.experiment.process = Process::Plant;
    cfg.experiment.episodes = 3;
    cfg.experiment.eval_episodes = 2;
    cfg.agent.trunk_hidden = vec![8];
    cfg.agent.critic_hidden = vec![8];
    cfg.agent.ppo.minibatch = 16;
    cfg.agent.ppo.epochs = 2;
    cfg
}

fn cell(variant: Variant, width: f64, seed: u64) -> Cell {
    Cell {
        variant,
        scenario: Scenario::new(width, 3.0, 20),
        seed,
    }
}

fn without_time(mut r: Vec<RunRecord>) -> Vec<RunRecord> {
    r.iter_mut().for_each(|r| r.wall_time_s = 0.0);
    r
}

#[test]
fn single_cell_plan_gives_one_record_and_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let plan = [cell(Variant::MpdPpo, 480.0, 3)];
    let records = grid::run_grid(&cfg, &Models::Plant, &plan, dir.path(), 1);
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert!(r.error.is_none(), "{:?}", r.error);
    assert!((1.0..=20.0).contains(&r.average_optimize_step));
    assert_eq!(r.curve.len(), 3);
    assert_eq!(r.eval_steps.len(), 2);
    let run = plan[0].dir(dir.path());
    assert!(run.ends_with("runs/mpd-ppo/w480-t3.0-s20/3"));
    for f in ["curve.csv", "trace.csv", "record.json", "checkpoint/policy.json", "checkpoint/critic.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(grid::load_records(dir.path()).unwrap(), records);
}

#[test]
fn crashed_cells_are_recorded_and_the_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let plan = [cell(Variant::MpdPpo, 5000.0, 0), cell(Variant::SingleNet, 480.0, 0)];
    let records = grid::run_grid(&cfg, &Models::Plant, &plan, dir.path(), 1);
    assert_eq!(records.len(), 2);
    assert!(records[0].crashed());
    assert_eq!(records[0].average_optimize_step, 20.0);
    assert!(!records[1].crashed());
    assert_eq!(grid::load_records(dir.path()).unwrap().len(), 2);
}

#[test]
fn worker_count_does_not_change_results() {
    let cfg = tiny();
    let plan: Vec<Cell> = (0..3).map(|s| cell(Variant::MpdPpo, 480.0, s)).collect();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let serial = without_time(grid::run_grid(&cfg, &Models::Plant, &plan, a.path(), 1));
    let pooled = without_time(grid::run_grid(&cfg, &Models::Plant, &plan, b.path(), 3));
    assert_eq!(serial, pooled);
    for c in &plan {
        let read = |root: &Path| std::fs::read(c.dir(root).join("curve.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }
}

#[test]
fn outputs_are_deterministic_and_cover_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let mut plan = Vec::new();
    for v in [Variant::MpdPpo, Variant::Reward(1)] {
        for w in [480.0, 380.0] {
            plan.push(cell(v, w, 0));
        }
    }
    let records = grid::run_grid(&cfg, &Models::Plant, &plan, dir.path(), 1);
    let abl = Scenario::new(480.0, 3.0, 20);
    let files = emit_outputs(&records, dir.path(), Some(&abl)).unwrap();
    let table = std::fs::read_to_string(dir.path().join("aggregate/tableV.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    assert!(table.lines().nth(1).unwrap().starts_with("mpd-ppo,w480-t3.0-s20,480.0,3.0,20,1,"));
    let tables: Vec<_> = ["tableVI.csv", "tableVII.csv", "tableVIII.csv"]
        .iter()
        .map(|f| dir.path().join("aggregate").join(f))
        .collect();
    assert!(tables.iter().all(|t| files.contains(t)));
    let vi = std::fs::read_to_string(&tables[0]).unwrap();
    assert!(vi.contains("check,mpd-ppo < ppo-single-net,,,,missing"), "{vi}");
    let plots = std::fs::read_dir(dir.path().join("plots")).unwrap().count();
    assert_eq!(plots, 4);
    let snapshot: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    let mut shuffled = records.clone();
    shuffled.reverse();
    let again = emit_outputs(&shuffled, dir.path(), Some(&abl)).unwrap();
    assert_eq!(again, files);
    let snapshot2: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(snapshot, snapshot2);
    assert!(emit_outputs(&[], dir.path(), None).is_err());
}

#[test]
fn forecasters_are_cached_by_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.experiment.dataset_steps = 800;
    cfg.forecaster.epochs = 1;
    cfg.forecaster.batch_size = 64;
    cfg.forecaster.conv_channels = 4;
    cfg.forecaster.lstm_hidden = 4;
    cfg.forecaster.skip_hidden = 2;
    cfg.forecaster.fusion_hidden = 4;
    let (w, t, rows) = grid::prepare_forecasters(&cfg, dir.path(), 1).unwrap();
    let rows = rows.expect("first call trains");
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.mae.is_finite() && r.mae > 0.0));
    let fdir = grid::forecaster_dir(&cfg, dir.path(), 1).unwrap();
    assert!(fdir.join("metrics.csv").exists());
    let (w2, t2, again) = grid::prepare_forecasters(&cfg, dir.path(), 1).unwrap();
    assert!(again.is_none());
    assert_eq!((w, t), (w2, t2));
    assert_ne!(fdir, grid::forecaster_dir(&cfg, dir.path(), 2).unwrap());
}

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_calender"))
        .args(["--out-dir", dir.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_trains_evaluates_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(
        &cfg_path,
        "[agent]\ntrunk_hidden = [8]\ncritic_hidden = [8]\n[agent.ppo]\nepochs = 2\nminibatch = 16\n\
         [experiment]\nprocess = \"plant\"\nepisodes = 2\neval_episodes = 2\n",
    )
    .unwrap();
    let c = cfg_path.to_str().unwrap();
    let common = ["--config", c, "--variant", "reward-3", "--scenario", "380x2.2x15", "--seed", "4"];
    let out = cli(dir.path(), &[&["train-agent"], &common[..]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("runs/reward-3/w380-t2.2-s15/4/curve.csv").exists());
    let out = cli(dir.path(), &[&["evaluate"], &common[..]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("average optimize step"));
    let out = cli(dir.path(), &["emit-plots", "--config", c]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("aggregate/tableV.csv").exists());
    assert!(dir.path().join("plots/reward-3__w380-t2.2-s15.svg").exists());

    std::fs::write(&cfg_path, "[agent.width]\nclip_epsilon = 2.0\n").unwrap();
    let out = cli(dir.path(), &["train-agent", "--config", c]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("agent.width.clip_epsilon"));
    let out = cli(dir.path(), &["run-grid", "--variant", "dqn"]);
    assert!(!out.status.success());
}
