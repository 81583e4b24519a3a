//! Command-line entry point: world generation, demonstration generation,
//! training, evaluation, and plot emission. Exit codes: 0 success, 1
//! validation error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use navlab::env::{generate_world, OccupancyGrid, Pose, WorldSpec};
use navlab::eval::{
    config_hash, run_suite, ExpertPolicy, MetricsReport, ModelPolicy, RandomPolicy,
    CURVE_BUCKET,
};
use navlab::expert::{demonstrate, sample_tasks, Demonstration, NavTask};
use navlab::manifest::RunManifest;
use navlab::model::{ActMode, Variant};
use navlab::plot::{render_collision_curves, render_map, Trace};
use navlab::trainer::{
    build_pool, init_state, load_checkpoint, train, DemoPool, TrainConfig, TrainState,
};

#[derive(Parser)]
#[command(name = "navlab", about = "Target-driven navigation lab", version)]
struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate connected occupancy-grid worlds.
    Worldgen(WorldgenArgs),
    /// Sample stop-balanced tasks and record expert demonstrations.
    #[command(name = "demogen")]
    DemoGen(DemoGenArgs),
    /// Train a model from a config (and optionally a demo archive).
    Train(TrainArgs),
    /// Evaluate a policy on a task suite and write a metrics report.
    Eval(EvalArgs),
    /// Render trajectory maps and collision curves.
    Plot(PlotArgs),
}

#[derive(Args)]
struct WorldgenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// TOML file with width/height/obstacle_density/room_count.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoGenArgs {
    /// Directory of world files from `worldgen`.
    #[arg(long)]
    worlds: PathBuf,
    #[arg(long)]
    tasks: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML). Optional when resuming.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Demo archive directory from `demo-gen`; omitted = generate from config.
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Updates between printed loss lines.
    #[arg(long, default_value_t = 100)]
    print_interval: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Suite definition (TOML).
    #[arg(long)]
    suite: PathBuf,
    /// Comma-separated episode seeds; one report per seed.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Policy: full|novg|nocp|notc (checkpoint) or random|expert.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Output directory for reports and traces.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// traces.json emitted by `eval`.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Metrics report JSON for the collision curve.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(msg: impl Into<String>) -> CliError {
        CliError {
            code: 1,
            message: msg.into(),
        }
    }

    fn runtime(msg: impl Into<String>) -> CliError {
        CliError {
            code: 2,
            message: msg.into(),
        }
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Worldgen(a) => cmd_worldgen(a),
        Command::DemoGen(a) => cmd_demo_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn io_runtime<T>(r: std::io::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::runtime(e.to_string()))
}

fn cmd_worldgen(args: WorldgenArgs) -> CliResult {
    let started = Instant::now();
    let spec = match &args.spec {
        Some(path) => {
            let text = io_runtime(fs::read_to_string(path))?;
            toml::from_str::<WorldSpec>(&text)
                .map_err(|e| CliError::validation(format!("spec: {e}")))?
        }
        None => WorldSpec::default(),
    };
    spec.validate()
        .map_err(|e| CliError::validation(e.to_string()))?;
    io_runtime(fs::create_dir_all(&args.out))?;
    let mut manifest = RunManifest::new(
        "worldgen",
        serde_json::json!({"seed": args.seed, "count": args.count, "spec": spec}),
    );
    manifest.seeds.push(args.seed);
    for i in 0..args.count {
        let seed = args.seed + i as u64;
        let grid = generate_world(seed, &spec)
            .map_err(|e| CliError::runtime(format!("world {seed}: {e}")))?;
        let path = args.out.join(format!("world_{seed}.txt"));
        io_runtime(fs::write(&path, grid.to_text()))?;
        manifest.outputs.push(path.display().to_string());
    }
    manifest.wall_secs = started.elapsed().as_secs_f64();
    io_runtime(manifest.write_atomic(&args.out.join("manifest.json")))?;
    println!("wrote {} worlds to {}", args.count, args.out.display());
    Ok(())
}

fn load_worlds(dir: &Path) -> Result<Vec<OccupancyGrid>, CliError> {
    let mut paths: Vec<PathBuf> = io_runtime(fs::read_dir(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("world_") && n.ends_with(".txt"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::validation(format!(
            "no world_*.txt files in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            let text = io_runtime(fs::read_to_string(p))?;
            OccupancyGrid::from_text(&text)
                .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn cmd_demo_gen(args: DemoGenArgs) -> CliResult {
    let started = Instant::now();
    let worlds = load_worlds(&args.worlds)?;
    let tasks = sample_tasks(&worlds, args.tasks, args.seed)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    io_runtime(fs::create_dir_all(&args.out))?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for task in &tasks {
        let grid = worlds
            .iter()
            .find(|w| w.world_seed == task.world_seed)
            .expect("task references a loaded world");
        match demonstrate(grid, task) {
            Ok(demo) => records.push(demo.to_record()),
            Err(_) => skipped += 1,
        }
    }
    io_runtime(fs::write(args.out.join("demos.txt"), records.join("\n")))?;
    // Carry the worlds along so the archive is self-contained.
    for w in &worlds {
        io_runtime(fs::write(
            args.out.join(format!("world_{}.txt", w.world_seed)),
            w.to_text(),
        ))?;
    }
    let mut manifest = RunManifest::new(
        "demo-gen",
        serde_json::json!({"tasks": args.tasks, "seed": args.seed}),
    );
    manifest.seeds.push(args.seed);
    manifest.inputs.push(args.worlds.display().to_string());
    manifest
        .outputs
        .push(args.out.join("demos.txt").display().to_string());
    manifest.wall_secs = started.elapsed().as_secs_f64();
    io_runtime(manifest.write_atomic(&args.out.join("manifest.json")))?;
    println!(
        "wrote {} demonstrations ({} unreachable tasks skipped)",
        records.len(),
        skipped
    );
    Ok(())
}

fn load_demo_archive(dir: &Path, holdout_fraction: f64) -> Result<DemoPool, CliError> {
    let worlds = load_worlds(dir)?;
    let text = io_runtime(fs::read_to_string(dir.join("demos.txt")))?;
    let mut demos = Vec::new();
    for record in text.split("\n\n").filter(|r| !r.trim().is_empty()) {
        let demo = Demonstration::from_record(record)
            .map_err(|e| CliError::validation(format!("demos.txt: {e}")))?;
        let w = worlds
            .iter()
            .position(|g| g.world_seed == demo.task.world_seed)
            .ok_or_else(|| {
                CliError::validation(format!(
                    "demo references missing world {}",
                    demo.task.world_seed
                ))
            })?;
        demos.push((w, demo));
    }
    if demos.is_empty() {
        return Err(CliError::validation("demo archive is empty"));
    }
    Ok(DemoPool::new(worlds, demos, holdout_fraction))
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let started = Instant::now();
    let (cfg, mut state): (TrainConfig, TrainState) = match (&args.resume, &args.config) {
        (Some(path), _) => {
            let (cfg, state) =
                load_checkpoint(path).map_err(|e| CliError::validation(e.to_string()))?;
            (cfg, state)
        }
        (None, Some(path)) => {
            let text = io_runtime(fs::read_to_string(path))?;
            let cfg = TrainConfig::from_toml(&text)
                .map_err(|e| CliError::validation(e.to_string()))?;
            let state = init_state(&cfg);
            (cfg, state)
        }
        (None, None) => {
            return Err(CliError::validation(
                "either --config or --resume is required",
            ))
        }
    };
    let pool = match &args.demos {
        Some(dir) => load_demo_archive(dir, cfg.holdout_fraction)?,
        None => build_pool(&cfg).map_err(|e| CliError::runtime(e.to_string()))?,
    };
    io_runtime(fs::create_dir_all(&args.out))?;
    let print_interval = args.print_interval.max(1);
    train(&cfg, &pool, &mut state, Some(&args.out), |rec| {
        if rec.update % print_interval == 0 {
            println!(
                "update {:>6}  total {:.4}  recon {:.4}  kl {:.4}  ce {:.4}  cpm {:.4}  tcm {:.4}  |g| {:.3}",
                rec.update,
                rec.loss.total,
                rec.loss.recon,
                rec.loss.kl,
                rec.loss.action_ce,
                rec.loss.cpm,
                rec.loss.tcm,
                rec.grad_norm
            );
        }
    })
    .map_err(|e| CliError::runtime(e.to_string()))?;
    io_runtime(fs::write(args.out.join("log.csv"), state.log.to_csv()))?;
    io_runtime(fs::write(
        args.out.join("summary.json"),
        state.log.summary_json(),
    ))?;
    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    manifest.seeds = vec![cfg.seed, cfg.world_seed, cfg.task_seed];
    manifest
        .outputs
        .push(args.out.join("log.csv").display().to_string());
    manifest.wall_secs = started.elapsed().as_secs_f64();
    io_runtime(manifest.write_atomic(&args.out.join("manifest.json")))?;
    if let Some(acc) = state.log.evals.last() {
        println!(
            "done: {} updates, held-out accuracy {:.3}",
            state.update, acc.holdout_accuracy
        );
    } else {
        println!("done: {} updates", state.update);
    }
    Ok(())
}

/// Evaluation suite recipe: worlds plus a stop-balanced task sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SuiteSpec {
    world_seed: u64,
    world_count: usize,
    width: usize,
    height: usize,
    obstacle_density: f64,
    room_count: usize,
    n_tasks: usize,
    task_seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> SuiteSpec {
        SuiteSpec {
            world_seed: 9000,
            world_count: 5,
            width: 12,
            height: 12,
            obstacle_density: 0.1,
            room_count: 2,
            n_tasks: 200,
            task_seed: 9100,
        }
    }
}

impl SuiteSpec {
    fn build(&self) -> Result<(Vec<OccupancyGrid>, Vec<NavTask>), CliError> {
        let spec = WorldSpec {
            width: self.width,
            height: self.height,
            obstacle_density: self.obstacle_density,
            room_count: self.room_count,
        };
        spec.validate()
            .map_err(|e| CliError::validation(e.to_string()))?;
        let mut worlds = Vec::with_capacity(self.world_count);
        for i in 0..self.world_count {
            worlds.push(
                generate_world(self.world_seed + i as u64, &spec)
                    .map_err(|e| CliError::runtime(e.to_string()))?,
            );
        }
        let tasks = sample_tasks(&worlds, self.n_tasks, self.task_seed)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        Ok((worlds, tasks))
    }
}

/// Self-contained trace record: enough to redraw the episode on its world.
#[derive(Serialize, Deserialize)]
struct TraceRecord {
    world: String,
    start: Pose,
    goal: Pose,
    poses: Vec<Pose>,
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let started = Instant::now();
    let suite_text = io_runtime(fs::read_to_string(&args.suite))?;
    let suite: SuiteSpec = toml::from_str(&suite_text)
        .map_err(|e| CliError::validation(format!("suite: {e}")))?;
    let (worlds, tasks) = suite.build()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::validation("--seeds must be comma-separated integers"))?;

    // Resolve the policy.
    enum Kind<'a> {
        Model(ModelPolicy<'a>),
        Random,
        Expert,
    }
    let loaded = match args.checkpoint.as_deref() {
        Some(path) => {
            Some(load_checkpoint(path).map_err(|e| CliError::validation(e.to_string()))?)
        }
        None => None,
    };
    let kind = match args.variant.as_str() {
        "random" => Kind::Random,
        "expert" => Kind::Expert,
        name => {
            let variant = Variant::parse(name)
                .ok_or_else(|| CliError::validation(format!("unknown variant `{name}`")))?;
            let (cfg, state) = loaded
                .as_ref()
                .ok_or_else(|| CliError::validation("--checkpoint required for model variants"))?;
            if cfg.model.variant != variant {
                return Err(CliError::validation(format!(
                    "checkpoint holds variant `{}`, requested `{}`",
                    cfg.model.variant.name(),
                    variant.name()
                )));
            }
            Kind::Model(ModelPolicy::new(&state.model, ActMode::Deterministic))
        }
    };

    io_runtime(fs::create_dir_all(&args.report))?;
    let hash = config_hash(&suite_text);
    let mut all_outputs = Vec::new();
    for &seed in &seeds {
        let results = match &kind {
            Kind::Model(p) => run_suite(&worlds, &tasks, p, seed),
            Kind::Random => run_suite(&worlds, &tasks, &RandomPolicy::default(), seed),
            Kind::Expert => run_suite(&worlds, &tasks, &ExpertPolicy::default(), seed),
        };
        let report =
            MetricsReport::from_results(&worlds, &tasks, &results, vec![seed], hash.clone())
                .map_err(|e| CliError::runtime(e.to_string()))?;
        let report_path = args.report.join(format!("report_{seed}.json"));
        io_runtime(fs::write(&report_path, report.to_json()))?;
        let mut rows =
            String::from("task,success,steps_taken,executed,shortest,collisions,timeout\n");
        for (i, r) in results.iter().enumerate() {
            rows.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i, r.success as u8, r.steps_taken, r.executed_length, r.shortest_length,
                r.collisions, r.timeout as u8
            ));
        }
        io_runtime(fs::write(
            args.report.join(format!("episodes_{seed}.csv")),
            rows,
        ))?;
        let traces: Vec<TraceRecord> = results
            .iter()
            .zip(&tasks)
            .map(|(r, t)| TraceRecord {
                world: worlds
                    .iter()
                    .find(|w| w.world_seed == t.world_seed)
                    .unwrap()
                    .to_text(),
                start: t.start,
                goal: t.goal,
                poses: r.poses.clone(),
            })
            .collect();
        io_runtime(fs::write(
            args.report.join(format!("traces_{seed}.json")),
            serde_json::to_string(&traces).expect("traces serialize"),
        ))?;
        all_outputs.push(report_path.display().to_string());
        println!(
            "seed {seed}: SR {:.3}  SPL {:.3}  P {:.3}  mean collisions {:.2}",
            report.sr, report.spl, report.p, report.mean_collisions
        );
    }
    let mut manifest = RunManifest::new(
        "eval",
        serde_json::json!({"suite": suite, "variant": args.variant}),
    );
    manifest.seeds = seeds;
    manifest.inputs = args
        .checkpoint
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    manifest.outputs = all_outputs;
    manifest.wall_secs = started.elapsed().as_secs_f64();
    io_runtime(manifest.write_atomic(&args.report.join("manifest.json")))?;
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> CliResult {
    let started = Instant::now();
    if args.traces.is_none() && args.report.is_none() {
        return Err(CliError::validation(
            "at least one of --traces or --report is required",
        ));
    }
    io_runtime(fs::create_dir_all(&args.out))?;
    let mut manifest = RunManifest::new("plot", serde_json::json!({}));
    if let Some(path) = &args.traces {
        let text = io_runtime(fs::read_to_string(path))?;
        let records: Vec<TraceRecord> = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("traces: {e}")))?;
        // Group traces per world and draw one map each.
        let mut worlds: Vec<(String, OccupancyGrid, Vec<Trace>)> = Vec::new();
        for rec in records {
            let entry = match worlds.iter_mut().find(|(t, _, _)| *t == rec.world) {
                Some(e) => e,
                None => {
                    let grid = OccupancyGrid::from_text(&rec.world)
                        .map_err(|e| CliError::validation(e.to_string()))?;
                    worlds.push((rec.world.clone(), grid, Vec::new()));
                    worlds.last_mut().unwrap()
                }
            };
            entry.2.push(Trace {
                start: rec.start,
                goal: rec.goal,
                poses: rec.poses,
            });
        }
        for (_, grid, traces) in &worlds {
            let img = render_map(grid, traces);
            let path = args.out.join(format!("map_{}.png", grid.world_seed));
            img.save(&path)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            manifest.outputs.push(path.display().to_string());
        }
        manifest.inputs.push(path.display().to_string());
    }
    if let Some(path) = &args.report {
        let text = io_runtime(fs::read_to_string(path))?;
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("report: {e}")))?;
        let curve: Vec<(f64, f64)> = report.curve.iter().map(|&m| (m, 0.0)).collect();
        let img = render_collision_curves(&[("run".to_string(), curve)], CURVE_BUCKET);
        let out = args.out.join("collision_curve.png");
        img.save(&out)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        manifest.inputs.push(path.display().to_string());
        manifest.outputs.push(out.display().to_string());
    }
    manifest.wall_secs = started.elapsed().as_secs_f64();
    io_runtime(manifest.write_atomic(&args.out.join("manifest.json")))?;
    println!("wrote plots to {}", args.out.display());
    Ok(())
}
