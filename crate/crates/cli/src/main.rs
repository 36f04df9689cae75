use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stepnav::config::{ConfigError, RunConfig};
use stepnav::expert::{collect_demonstrations, ExpertError, RrtLmpc};
use stepnav::geometry::{generate_suite, Environment, GeometryError, SuiteSpec, TrapLayout, Vec2};
use stepnav::io::{self, Checkpoint, Header, MetricsRow};
use stepnav::sim::{evaluate_parallel, metrics_from_traces, time_ratio, LmpcDirect, SacPolicy, SubgoalPolicy};
use stepnav::train::Trainer;

mod plot;

#[derive(Parser)]
#[command(name = "stepnav", version, about = "Subgoal navigation for a LIP biped: suites, demonstrations, training, evaluation, plots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` file applied on top of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment suite, one file per environment.
    GenEnvs {
        #[command(flatten)]
        common: Common,
        /// Preset suite; without it `--count` and `--obstacles` describe a custom one.
        #[arg(long, value_enum)]
        suite: Option<SuiteKind>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        obstacles: Option<usize>,
        /// Shared goal as `x,y`.
        #[arg(long, value_parser = parse_point)]
        goal: Option<Vec2>,
        /// Trap layouts appended to the suite.
        #[arg(long, value_enum, value_delimiter = ',')]
        traps: Vec<Trap>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out the RRT-LMPC expert and store its transitions.
    CollectDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        envs: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the subgoal policy; writes curves and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        envs: PathBuf,
        /// Demonstration file; omit to train from scratch.
        #[arg(long)]
        demo: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints and baselines; the first method is the time-ratio reference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Vec<Baseline>,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render traces or learning curves as SVG (plus CSV series).
    Plot {
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Suite used to draw obstacles under trajectories.
        #[arg(long)]
        envs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize any stepnav artifact.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteKind {
    Train,
    Unseen,
}

#[derive(Clone, Copy, ValueEnum)]
enum Trap {
    Cup,
    Wall,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Baseline {
    LmpcDirect,
    RrtLmpc,
}

impl Baseline {
    fn name(self) -> &'static str {
        match self {
            Baseline::LmpcDirect => "lmpc-direct",
            Baseline::RrtLmpc => "rrt-lmpc",
        }
    }
}

/// Errors that map onto dedicated exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Infeasible(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Infeasible(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn parse_point(s: &str) -> Result<Vec2, String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok(Vec2::new(p(x)?, p(y)?))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg = cfg.overlay(&text)?;
    }
    if !c.set.is_empty() {
        cfg = cfg.overlay(&c.set.join("\n"))?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

/// A suite is a directory of environment files (read in name order) or a
/// single file.
fn load_suite(path: &Path) -> Result<Vec<Environment>> {
    require(path, "suite")?;
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut envs = Vec::new();
    for f in &files {
        envs.extend(io::read_environments(f).with_context(|| format!("reading {}", f.display()))?.1);
    }
    if envs.is_empty() {
        return Err(usage(format!("no environments in {}", path.display())));
    }
    Ok(envs)
}

fn gen_envs(common: &Common, suite: Option<SuiteKind>, count: Option<usize>, obstacles: Option<usize>, goal: Option<Vec2>, traps: &[Trap], out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    let mut spec = match (suite, count, obstacles) {
        (Some(SuiteKind::Train), None, None) => cfg.suite_train.clone(),
        (Some(SuiteKind::Unseen), None, None) => cfg.suite_unseen.clone(),
        (None, Some(count), Some(obstacles)) => SuiteSpec {
            obstacle_counts: vec![obstacles],
            per_count: count,
            goal,
            traps: Vec::new(),
        },
        _ => return Err(usage("give either --suite or both --count and --obstacles")),
    };
    if suite.is_some() && goal.is_some() {
        spec.goal = goal;
    }
    spec.traps.extend(traps.iter().map(|t| match t {
        Trap::Cup => TrapLayout::Cup,
        Trap::Wall => TrapLayout::Wall,
    }));
    // record what was generated under the suite it stands for
    match suite {
        Some(SuiteKind::Unseen) => cfg.suite_unseen = spec.clone(),
        _ => cfg.suite_train = spec.clone(),
    }
    let envs = generate_suite(&spec, cfg.seed)?;
    let header = Header::new("stepnav-envs", &cfg.hash(), cfg.seed);
    for env in &envs {
        io::write_environments(&out.join(format!("env-{:03}.json", env.id)), &header, std::slice::from_ref(env))?;
    }
    println!("wrote {} environments to {}", envs.len(), out.display());
    Ok(())
}

fn collect_demos(common: &Common, envs: &Path, n: Option<usize>, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let suite = load_suite(envs)?;
    let n = n.unwrap_or(cfg.demo_count);
    let data = collect_demonstrations(&suite, n, cfg.seed, &cfg.expert, &cfg.train.episode, cfg.demo_include_failures)?;
    io::write_demos(out, &Header::new("stepnav-demos", &cfg.hash(), cfg.seed), &data)?;
    let kept = data.episodes.iter().filter(|e| e.kept).count();
    println!(
        "wrote {} transitions from {kept}/{} expert episodes to {}",
        data.transitions.len(),
        data.episodes.len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, envs: &Path, demo: Option<&Path>, episodes: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = episodes {
        cfg.train.episodes = e;
    }
    let suite = load_suite(envs)?;
    let demos = match demo {
        Some(p) => {
            require(p, "demonstration file")?;
            let t = io::read_demos(p)?.1.transitions;
            if t.is_empty() {
                return Err(Failure::Infeasible(format!("{} holds no transitions", p.display())).into());
            }
            t
        }
        None => Vec::new(),
    };
    let hash = cfg.hash();
    let header = Header::new("stepnav-checkpoint", &hash, cfg.seed);
    fs::create_dir_all(out)?;
    io::write_atomic(&out.join("config.txt"), cfg.to_flat().as_bytes())?;
    let mut trainer = Trainer::new(cfg.training(), &demos);
    let every = cfg.checkpoint_every;
    let mut write_error = None;
    let result = trainer.train(&suite, &mut |t, row| {
        let done = row.episode + 1;
        if every > 0 && done % every == 0 && write_error.is_none() {
            let ck = Checkpoint {
                header: header.clone(),
                episode: done as u64,
                sac: t.sac.clone(),
            };
            if let Err(e) = io::write_checkpoint(&out.join(format!("checkpoint-{done:05}.snck")), &ck) {
                write_error = Some(e);
            }
        }
        if done % 50 == 0 {
            let recent = &t.curves[t.curves.len().saturating_sub(50)..];
            eprintln!(
                "episode {done}: success(last 50) {:.0}%, alpha {:.3}",
                stepnav::train::success_rate(recent),
                row.alpha
            );
        }
    });
    if let Some(e) = write_error {
        return Err(e.into());
    }
    // curves up to the failure are still worth keeping
    io::write_curves(&out.join("curves.csv"), &Header::new("stepnav-curves", &hash, cfg.seed), &trainer.curves)?;
    result?;
    io::write_checkpoint(
        &out.join("final.snck"),
        &Checkpoint {
            header,
            episode: trainer.episode as u64,
            sac: trainer.sac.clone(),
        },
    )?;
    println!(
        "trained {} episodes ({} updates); success over the last 10% {:.1}%",
        trainer.episode,
        trainer.sac.updates,
        stepnav::train::success_rate(&trainer.curves[trainer.curves.len() - trainer.curves.len().div_ceil(10)..])
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(common: &Common, checkpoints: &[PathBuf], baselines: &[Baseline], suite_path: &Path, trials: Option<usize>, workers: usize, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    if checkpoints.is_empty() && baselines.is_empty() {
        return Err(usage("give at least one --checkpoint or --baseline"));
    }
    let suite = load_suite(suite_path)?;
    let trials = trials.unwrap_or(cfg.eval_trials);
    let ecfg = &cfg.train.episode;
    let mut learners = Vec::new();
    for p in checkpoints {
        require(p, "checkpoint")?;
        let name = format!("sac:{}", p.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default());
        learners.push((name, io::read_checkpoint(p)?.sac));
    }
    let mut runs = Vec::new();
    for (name, sac) in &learners {
        let make = || Box::new(SacPolicy::new(sac, false, name.clone())) as Box<dyn SubgoalPolicy + '_>;
        runs.push((name.clone(), evaluate_parallel(&make, &suite, trials, cfg.seed, ecfg, workers)));
    }
    for b in baselines {
        let expert = cfg.expert.clone();
        let make = move || -> Box<dyn SubgoalPolicy> {
            match b {
                Baseline::LmpcDirect => Box::new(LmpcDirect),
                Baseline::RrtLmpc => Box::new(RrtLmpc::new(expert.clone())),
            }
        };
        runs.push((b.name().to_string(), evaluate_parallel(&make, &suite, trials, cfg.seed, ecfg, workers)));
    }
    let hash = cfg.hash();
    let lip = &ecfg.mpc.lip;
    let reference = &runs[0].1;
    let mut rows = Vec::new();
    println!("{:<24} {:>16} {:>20} {:>10}", "method", "success %", "reward", "time ratio");
    for (name, traces) in &runs {
        let mut m = metrics_from_traces(name, traces, lip);
        m.time_ratio = time_ratio(traces, reference, lip);
        println!(
            "{:<24} {:>7.1} ± {:<6.1} {:>9.2} ± {:<8.2} {:>10}",
            m.method,
            m.success_mean,
            m.success_std,
            m.reward_mean,
            m.reward_std,
            m.time_ratio.map_or("-".to_string(), |r| format!("{r:.3}"))
        );
        rows.push(MetricsRow::from(&m));
        let flat: Vec<_> = traces.iter().flatten().cloned().collect();
        let file = format!("traces-{}.jsonl", name.replace(':', "-"));
        io::write_traces(&out.join(file), &Header::new("stepnav-traces", &hash, cfg.seed), &flat)?;
    }
    io::write_metrics(&out.join("metrics.csv"), &Header::new("stepnav-metrics", &hash, cfg.seed), &rows)?;
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    require(path, "file")?;
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"SNCK") {
        let ck = io::read_checkpoint(path)?;
        println!("checkpoint v{} config {} seed {}", ck.header.version, ck.header.config_hash, ck.header.seed);
        println!("episodes {} updates {} alpha {:.4}", ck.episode, ck.sac.updates, ck.sac.alpha());
        println!("actor params {} critic params {} x{}", ck.sac.actor.params.len(), ck.sac.critics[0].params.len(), ck.sac.critics.len());
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| usage("not a stepnav artifact"))?;
    let first = text.lines().next().unwrap_or("");
    if first.starts_with('#') {
        if first.contains("format=stepnav-curves") {
            let (h, rows) = io::read_curves(path)?;
            let tail = &rows[rows.len() - rows.len().div_ceil(10)..];
            println!("curves seed {} config {}: {} episodes, success over the last 10% {:.1}%", h.seed, h.config_hash, rows.len(), stepnav::train::success_rate(tail));
        } else {
            let (h, rows) = io::read_metrics(path)?;
            println!("metrics seed {} config {}", h.seed, h.config_hash);
            for r in rows {
                println!("{:<24} success {:.1} ± {:.1} reward {:.2} ± {:.2}", r.method, r.success_mean, r.success_std, r.reward_mean, r.reward_std);
            }
        }
        return Ok(());
    }
    if first.trim() == "{" {
        let (h, envs) = io::read_environments(path)?;
        for e in envs {
            println!("env {} seed {}: {} obstacles, goal ({:.2}, {:.2})", e.id, h.seed, e.obstacles.len(), e.goal.x, e.goal.y);
        }
        return Ok(());
    }
    let head: serde_json::Value = serde_json::from_str(first).map_err(|_| usage("not a stepnav artifact"))?;
    if head.get("header").is_some() {
        let (h, data) = io::read_demos(path)?;
        let kept = data.episodes.iter().filter(|e| e.kept).count();
        println!("demos seed {}: {} transitions from {kept}/{} episodes over {} environments", h.seed, data.transitions.len(), data.episodes.len(), data.env_ids.len());
    } else {
        let (h, traces) = io::read_traces(path)?;
        let ok = traces.iter().filter(|t| t.success()).count();
        println!("traces seed {}: {} episodes, {ok} reached the goal", h.seed, traces.len());
        for t in &traces {
            println!("  env {} seed {} {:?} after {} steps, return {:.2}", t.env_id, t.seed, t.outcome, t.len(), t.total_reward);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenEnvs {
            common,
            suite,
            count,
            obstacles,
            goal,
            traps,
            out,
        } => gen_envs(&common, suite, count, obstacles, goal, &traps, &out),
        Command::CollectDemos { common, envs, n, out } => collect_demos(&common, &envs, n, &out),
        Command::Train {
            common,
            envs,
            demo,
            episodes,
            out,
        } => train(&common, &envs, demo.as_deref(), episodes, &out),
        Command::Eval {
            common,
            checkpoint,
            baseline,
            suite,
            trials,
            workers,
            out,
        } => eval(&common, &checkpoint, &baseline, &suite, trials, workers, &out),
        Command::Plot { traces, curves, envs, out } => {
            if traces.is_none() && curves.is_none() {
                return Err(usage("give --traces and/or --curves"));
            }
            let suite = envs.as_deref().map(load_suite).transpose()?;
            if let Some(p) = &traces {
                require(p, "trace file")?;
                let n = plot::traces(p, suite.as_deref(), &out)?;
                println!("wrote {n} trace plots to {}", out.display());
            }
            if let Some(p) = &curves {
                require(p, "curve file")?;
                plot::curves(p, &out)?;
                println!("wrote curve plots to {}", out.display());
            }
            Ok(())
        }
        Command::Inspect { path } => inspect(&path),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 2,
                Failure::Infeasible(_) => 3,
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<GeometryError>().is_some() {
            return 3;
        }
        if let Some(x) = cause.downcast_ref::<ExpertError>() {
            return match x {
                ExpertError::NoDemonstrations(_) | ExpertError::StartBlocked | ExpertError::NoPath(_) => 3,
                ExpertError::NoEnvironments => 2,
            };
        }
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
