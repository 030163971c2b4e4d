use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use pibc_core::correction::WaypointSchedule;
use pibc_core::features::{Dataset, MirrorMap};
use pibc_core::kinematics::KinematicTree;
use pibc_core::mann::{MannWeights, CHECKPOINT_FORMAT};
use pibc_core::rollout::{
    metric_drift, metric_foot_traces, rollout as run_model, summarize, RolloutConfig, RolloutSummary, TrajectoryLog,
};
use pibc_core::synth::{generate_corpus, verify_consistency, ConsistencyReport};
use pibc_core::train::{write_history, SweepManifest, SweepRun, TrainConfig, TrainSnapshot, Trainer};
use pibc_core::trajectory::Trajectory;
use pibc_core::Error as CoreError;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{EvalArgs, GenDataArgs, InspectArgs, RolloutArgs, TrainArgs};

const MODEL_FILE: &str = "model.json";
const SNAPSHOT_FILE: &str = "snapshot.json";
const HISTORY_FILE: &str = "history.csv";
const MANIFEST_FILE: &str = "sweep.toml";
const EPISODE_PREFIX: &str = "episode_";

/// An input file or directory that does not exist.
#[derive(Debug)]
pub struct MissingInput(pub String);

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing input: {}", self.0)
    }
}

impl std::error::Error for MissingInput {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<MissingInput>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            if e.is_numeric() {
                return 2;
            }
            if let CoreError::Io(io) = e {
                if io.kind() == std::io::ErrorKind::NotFound {
                    return 3;
                }
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(MissingInput(format!("{what} `{}` does not exist", path.display())).into());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(args.config.as_deref(), None)?;
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    if let Some(e) = args.episodes {
        cfg.data.episodes = e;
    }
    if let Some(d) = args.duration {
        cfg.data.episode_duration = d;
    }
    if let Some(a) = args.asymmetry {
        cfg.data.asymmetry = a;
    }
    if args.mirror {
        cfg.data.mirror = true;
    }
    let tree = cfg.robot.tree();
    let corpus = generate_corpus(&tree, &cfg.robot.dims, &cfg.data.corpus())?;
    fs::create_dir_all(&args.out)?;
    let mut report = ConsistencyReport::default();
    let mut frames = 0;
    for (e, traj) in corpus.iter().enumerate() {
        traj.save(args.out.join(format!("{EPISODE_PREFIX}{e:03}.csv")))?;
        let r = verify_consistency(&tree, traj)?;
        report.max_linear = report.max_linear.max(r.max_linear);
        report.max_angular = report.max_angular.max(r.max_angular);
        report.max_position_drift = report.max_position_drift.max(r.max_position_drift);
        report.max_rotation_drift = report.max_rotation_drift.max(r.max_rotation_drift);
        report.samples += r.samples;
        frames += traj.len();
    }
    fs::write(args.out.join("robot.toml"), tree.to_toml_string())?;
    fs::write(args.out.join("mirror_map.txt"), MirrorMap::for_tree(&tree)?.to_text(&tree))?;
    write_json(&args.out.join("consistency.json"), &report)?;
    cfg.write_to(&args.out)?;
    let samples = Dataset::build(&tree, &corpus, &cfg.data.dataset(0.0), None)?.len();
    println!(
        "episodes: {}  frames: {}  duration: {:.1} min",
        corpus.len(),
        frames,
        frames as f64 / cfg.rollout.rate_hz / 60.0
    );
    println!(
        "training samples: {samples}{}",
        if cfg.data.mirror { " (mirrored)" } else { "" }
    );
    println!(
        "consistency: max support-foot speed {:.3e} m/s, {:.3e} rad/s; max stance drift {:.3e} m",
        report.max_linear, report.max_angular, report.max_position_drift
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<Trajectory>> {
    require(dir, "data directory")?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(EPISODE_PREFIX) && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MissingInput(format!("no {EPISODE_PREFIX}*.csv files in `{}`", dir.display())).into());
    }
    files
        .iter()
        .map(|p| Trajectory::load(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn parse_weights(text: &str) -> Result<Vec<f64>> {
    let body = text.trim().strip_prefix("w=").unwrap_or(text.trim());
    body.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad PI weight `{s}` in --sweep"))
        })
        .collect()
}

fn run_dir_name(w: f64, seed: u64) -> String {
    format!("w{w}_s{seed}")
}

fn train_one(config: TrainConfig, dataset: &Dataset, dir: &Path, resume: bool, exp: &ExperimentConfig) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut exp = exp.clone();
    exp.train.run = config.clone();
    exp.train.sweep.clear();
    exp.write_to(dir)?;
    let snap_path = dir.join(SNAPSHOT_FILE);
    let mut trainer = if resume && snap_path.exists() {
        info!("{}: resuming from {}", dir.display(), snap_path.display());
        Trainer::resume(config, dataset, TrainSnapshot::load(&snap_path)?)?
    } else {
        Trainer::new(config, dataset)?
    };
    let (n_train, n_test) = trainer.split_sizes();
    info!("{}: {n_train} training / {n_test} test samples", dir.display());
    while !trainer.is_finished() {
        match trainer.run_epoch() {
            Ok([tr, te]) => {
                info!(
                    "{} epoch {}: train L_D {:.4e} L_B {:.4e} | test L_D {:.4e} L_B {:.4e}",
                    dir.display(),
                    tr.epoch,
                    tr.data,
                    tr.pi,
                    te.data,
                    te.pi
                );
            }
            Err(e) => {
                write_history(fs::File::create(dir.join(HISTORY_FILE))?, trainer.history())?;
                if let CoreError::NonFiniteLoss {
                    last_good: Some(w), ..
                } = &e
                {
                    w.save(dir.join("model_last_good.json"))?;
                }
                return Err(e.into());
            }
        }
        trainer.snapshot().save(&snap_path)?;
        write_history(fs::File::create(dir.join(HISTORY_FILE))?, trainer.history())?;
    }
    let outcome = trainer.finish();
    outcome.best.save(dir.join(MODEL_FILE))?;
    Ok(outcome.best_epoch)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(args.config.as_deref(), Some(&args.data))?;
    let run = &mut cfg.train.run;
    if let Some(w) = args.pi_weight {
        run.pi_weight = w;
    }
    if let Some(e) = args.epochs {
        run.epochs = e;
    }
    if let Some(s) = args.seed {
        run.seed = s;
    }
    if let Some(lr) = args.lr {
        run.optimizer.lr = lr;
    }
    if let Some(b) = args.batch_size {
        run.batch_size = b;
    }
    if let Some(s) = &args.sweep {
        cfg.train.sweep = parse_weights(s)?;
    }
    if let Some(s) = args.seeds {
        cfg.train.seeds = s;
    }
    if let Some(j) = args.jobs {
        cfg.train.jobs = j;
    }
    cfg.train.run.validate()?;
    if cfg.train.seeds == 0 || cfg.train.jobs == 0 {
        bail!("--seeds and --jobs must be at least 1");
    }
    let corpus = load_corpus(&args.data)?;
    let tree = cfg.robot.tree();
    if corpus[0].dof() != tree.dof() {
        bail!(
            "data has {} joints but the configured robot has {}",
            corpus[0].dof(),
            tree.dof()
        );
    }
    let dataset = Dataset::build(&tree, &corpus, &cfg.data.dataset(cfg.train.run.test_fraction), None)?;
    info!("dataset: {} samples from {} episodes", dataset.len(), corpus.len());
    fs::create_dir_all(&args.out)?;

    if cfg.train.sweep.is_empty() {
        cfg.write_to(&args.out)?;
        let best = train_one(cfg.train.run.clone(), &dataset, &args.out, args.resume, &cfg)?;
        println!("best epoch {best}; checkpoint {}", args.out.join(MODEL_FILE).display());
        return Ok(());
    }

    let mut jobs = Vec::new();
    for &w in &cfg.train.sweep {
        for k in 0..cfg.train.seeds {
            let mut run = cfg.train.run.clone();
            run.pi_weight = w;
            run.seed = cfg.train.run.seed + k;
            jobs.push(run);
        }
    }
    cfg.write_to(&args.out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<usize>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.train.jobs.min(jobs.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = jobs.get(k) else { break };
                let dir = args.out.join(run_dir_name(run.pi_weight, run.seed));
                let r = train_one(run.clone(), &dataset, &dir, args.resume, &cfg);
                results.lock().expect("result lock")[k] = Some(r);
            });
        }
    });
    let mut manifest = SweepManifest::default();
    let mut failures = Vec::new();
    for (run, r) in jobs.iter().zip(results.into_inner().expect("result lock")) {
        let name = run_dir_name(run.pi_weight, run.seed);
        match r.expect("every job ran") {
            Ok(best_epoch) => manifest.runs.push(SweepRun {
                pi_weight: run.pi_weight,
                seed: run.seed,
                checkpoint: format!("{name}/{MODEL_FILE}"),
                best_epoch,
            }),
            Err(e) => {
                warn!("{name} failed: {e:#}");
                failures.push((name, e));
            }
        }
    }
    manifest.save(args.out.join(MANIFEST_FILE))?;
    println!("{} of {} runs finished; manifest {}", manifest.runs.len(), jobs.len(), args.out.join(MANIFEST_FILE).display());
    if let Some((name, e)) = failures.into_iter().next() {
        return Err(e.context(format!("sweep run {name} failed")));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<MannWeights> {
    require(path, "checkpoint")?;
    MannWeights::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn robot_for(cfg: &mut ExperimentConfig, weights: &MannWeights) -> Result<KinematicTree> {
    let n = (weights.config.input_dim - 78) / 2;
    if cfg.robot.tree().dof() != n {
        if n < 6 {
            bail!("checkpoint has {n} joints; the biped needs at least 6");
        }
        cfg.robot.extra_joints = n - 6;
    }
    Ok(cfg.robot.tree())
}

struct RolloutResult {
    log: TrajectoryLog,
    summary: RolloutSummary,
    waypoints: WaypointSchedule,
    start: pibc_core::kinematics::KinematicState,
}

fn rollout_with(weights: &MannWeights, tree: &KinematicTree, cfg: &ExperimentConfig) -> Result<RolloutResult> {
    let rc: RolloutConfig = cfg.rollout.config(cfg.data.window)?;
    let (_, seed, reference_wp) = cfg.rollout.reference.build(tree, &cfg.robot.dims, &rc)?;
    let waypoints = match &cfg.rollout.waypoints {
        Some(p) => {
            require(p, "waypoint file")?;
            WaypointSchedule::load(p)?
        }
        None => reference_wp,
    };
    let log = run_model(weights, tree, &seed, &waypoints, &rc)?;
    let summary = summarize(&log, &seed.state, &waypoints, &rc);
    Ok(RolloutResult {
        log,
        summary,
        waypoints,
        start: seed.state,
    })
}

fn write_drift(path: &Path, r: &RolloutResult) -> Result<()> {
    let drift = metric_drift(&r.log, &r.start, &r.waypoints);
    let mut f = fs::File::create(path)?;
    writeln!(f, "# schema: pibc-drift v1")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["time", "dx", "dy", "dz", "roll", "pitch", "yaw"])?;
    for row in &drift.series {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn rollout(args: RolloutArgs) -> Result<()> {
    let weights = load_model(&args.model)?;
    let mut cfg = ExperimentConfig::resolve(args.config.as_deref(), args.model.parent())?;
    if let Some(s) = args.steps {
        cfg.rollout.steps = s;
    }
    if args.no_correction {
        cfg.rollout.correction = false;
    }
    if let Some(k) = args.k0 {
        cfg.rollout.k0 = k;
    }
    if let Some(k) = args.k1 {
        cfg.rollout.k1 = k;
    }
    if let Some(p) = args.waypoints {
        cfg.rollout.waypoints = Some(p);
    }
    if let Some(b) = args.command_blend {
        cfg.rollout.command_blend = b;
    }
    if let Some(l) = args.step_length {
        cfg.rollout.reference.step_length = l;
    }
    let tree = robot_for(&mut cfg, &weights)?;
    let r = rollout_with(&weights, &tree, &cfg)?;
    fs::create_dir_all(&args.out)?;
    cfg.write_to(&args.out)?;
    r.log.save_csv(args.out.join("rollout.csv"))?;
    write_json(&args.out.join("summary.json"), &r.summary)?;
    metric_foot_traces(&r.log).write_csv(fs::File::create(args.out.join("foot_traces.csv"))?, "rollout")?;
    write_drift(&args.out.join("drift.csv"), &r)?;
    let s = &r.summary;
    println!(
        "{} steps ({:.2} s), correction {}: support-foot slide {:.3} m/s summed ({:.3} per s), terminal y {:.4} m, yaw {:.4} rad",
        s.steps,
        s.duration,
        if s.correction { "on" } else { "off" },
        s.foot_slide.linear_sum,
        s.foot_slide.linear_per_second,
        s.terminal_lateral,
        s.terminal_yaw
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct EvalRow {
    pi_weight: f64,
    seed: u64,
    status: &'static str,
    summary: Option<RolloutSummary>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<fs::File>> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# schema: {schema}")?;
    Ok(csv::Writer::from_writer(f))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let manifest_path = args.sweep.join(MANIFEST_FILE);
    require(&manifest_path, "sweep manifest")?;
    let manifest = SweepManifest::load(&manifest_path)?;
    if manifest.runs.is_empty() {
        return Err(MissingInput(format!("sweep manifest `{}` lists no runs", manifest_path.display())).into());
    }
    let missing: Vec<String> = manifest
        .runs
        .iter()
        .filter(|r| !args.sweep.join(&r.checkpoint).exists())
        .map(|r| r.checkpoint.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MissingInput(format!("incomplete sweep, missing runs: {}", missing.join(", "))).into());
    }
    let mut cfg = ExperimentConfig::resolve(args.config.as_deref(), Some(&args.sweep))?;
    if let Some(s) = args.steps {
        cfg.rollout.steps = s;
    }
    if args.no_correction {
        cfg.rollout.correction = false;
    }

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for run in &manifest.runs {
        let weights = load_model(&args.sweep.join(&run.checkpoint))?;
        let tree = robot_for(&mut cfg, &weights)?;
        info!("rolling out w = {}, seed {}", run.pi_weight, run.seed);
        match rollout_with(&weights, &tree, &cfg) {
            Ok(r) => {
                traces.push((format!("w{}_s{}", run.pi_weight, run.seed), metric_foot_traces(&r.log)));
                rows.push(EvalRow {
                    pi_weight: run.pi_weight,
                    seed: run.seed,
                    status: "ok",
                    summary: Some(r.summary),
                });
            }
            Err(e) if e.downcast_ref::<CoreError>().is_some_and(CoreError::is_numeric) => {
                warn!("w = {}, seed {} diverged: {e:#}", run.pi_weight, run.seed);
                rows.push(EvalRow {
                    pi_weight: run.pi_weight,
                    seed: run.seed,
                    status: "diverged",
                    summary: None,
                });
            }
            Err(e) => return Err(e),
        }
    }

    fs::create_dir_all(&args.out)?;
    cfg.write_to(&args.out)?;
    let nan = f64::NAN;
    let mut w = csv_writer(&args.out.join("fig4_foot_slide.csv"), "pibc-fig4 v1")?;
    w.write_record([
        "pi_weight",
        "seed",
        "status",
        "linear_rmse_sum",
        "angular_rmse_sum",
        "linear_per_second",
        "angular_per_second",
    ])?;
    for r in &rows {
        let f = r.summary.as_ref().map(|s| s.foot_slide);
        w.write_record([
            r.pi_weight.to_string(),
            r.seed.to_string(),
            r.status.to_string(),
            f.map_or(nan, |f| f.linear_sum).to_string(),
            f.map_or(nan, |f| f.angular_sum).to_string(),
            f.map_or(nan, |f| f.linear_per_second).to_string(),
            f.map_or(nan, |f| f.angular_per_second).to_string(),
        ])?;
    }
    w.flush()?;

    let mut weights: Vec<f64> = rows.iter().map(|r| r.pi_weight).collect();
    weights.sort_by(f64::total_cmp);
    weights.dedup();
    let mut w = csv_writer(&args.out.join("fig4_summary.csv"), "pibc-fig4-summary v1")?;
    w.write_record([
        "pi_weight",
        "runs",
        "diverged",
        "mean_linear",
        "median_linear",
        "mean_angular",
        "median_angular",
        "median_max_support_pitch",
        "median_support_height_std",
    ])?;
    for &pw in &weights {
        let group: Vec<&RolloutSummary> = rows
            .iter()
            .filter(|r| r.pi_weight == pw)
            .filter_map(|r| r.summary.as_ref())
            .collect();
        let total = rows.iter().filter(|r| r.pi_weight == pw).count();
        let lin: Vec<f64> = group.iter().map(|s| s.foot_slide.linear_sum).collect();
        let ang: Vec<f64> = group.iter().map(|s| s.foot_slide.angular_sum).collect();
        let mean = |v: &[f64]| if v.is_empty() { nan } else { v.iter().sum::<f64>() / v.len() as f64 };
        w.write_record([
            pw.to_string(),
            total.to_string(),
            (total - group.len()).to_string(),
            mean(&lin).to_string(),
            median(lin.clone()).to_string(),
            mean(&ang).to_string(),
            median(ang.clone()).to_string(),
            median(group.iter().map(|s| s.max_support_pitch).collect()).to_string(),
            median(group.iter().map(|s| s.support_height_std).collect()).to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&args.out.join("stance_metrics.csv"), "pibc-stance v1")?;
    w.write_record([
        "pi_weight",
        "seed",
        "max_support_pitch",
        "support_height_std",
        "terminal_x",
        "terminal_lateral",
        "terminal_yaw",
    ])?;
    for r in &rows {
        let s = r.summary.as_ref();
        w.write_record([
            r.pi_weight.to_string(),
            r.seed.to_string(),
            s.map_or(nan, |s| s.max_support_pitch).to_string(),
            s.map_or(nan, |s| s.support_height_std).to_string(),
            s.map_or(nan, |s| s.terminal_x).to_string(),
            s.map_or(nan, |s| s.terminal_lateral).to_string(),
            s.map_or(nan, |s| s.terminal_yaw).to_string(),
        ])?;
    }
    w.flush()?;

    let mut f = fs::File::create(args.out.join("foot_traces.csv"))?;
    let mut first = true;
    for (label, t) in &traces {
        let mut buf = Vec::new();
        t.write_csv(&mut buf, label)?;
        let text = String::from_utf8(buf)?;
        // one schema line and header for the whole file
        let body: String = if first {
            text
        } else {
            text.lines().skip(2).map(|l| format!("{l}\n")).collect()
        };
        f.write_all(body.as_bytes())?;
        first = false;
    }
    write_json(&args.out.join("eval.json"), &rows)?;
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    println!("evaluated {} runs ({} diverged); outputs in {}", rows.len(), rows.len() - ok, args.out.display());
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let w = load_model(&args.checkpoint)?;
    let c = &w.config;
    println!("format:        {CHECKPOINT_FORMAT}");
    println!("config hash:   {}", c.hash());
    println!("joints (n):    {}", (c.input_dim - 78) / 2);
    println!("input/output:  {} / {}", c.input_dim, c.output_dim);
    println!("gating:        {} inputs -> {} hidden -> {} experts", c.gating_indices.len(), c.gating_hidden, c.experts);
    println!("expert hidden: {}", c.hidden);
    println!("parameters:    {}", w.parameter_count());
    println!("init seed:     {}", w.seed);
    println!("finite:        {}", w.is_finite());
    Ok(())
}
