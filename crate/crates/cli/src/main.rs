use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atd_core::bench::{run_suite, Experiment, ExperimentConfig};
use atd_core::env::{save_scene, SceneFormat};
use atd_core::policy::PolicyKind;
use atd_core::validation;
use atd_core::Error;
use clap::{Args, Parser, Subcommand};

/// Diffusion-guided active target discovery.
#[derive(Debug, Parser)]
#[command(name = "atd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a scene from the configured prior and write it as CSV or PGM.
    GenScene {
        #[command(flatten)]
        common: Common,
    },
    /// Run one episode and write its per-step trace CSV.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the policies x budgets x seeds matrix and write the results CSV.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Directory for per-episode trace CSVs.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Dump the score field behind one selection of an episode.
    Scores {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Measurement index whose field is written.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Also write the episode trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the built-in oracle checks (and check a config if given).
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Overrides {
    /// diffatd, random, max_ent, greedy_adaptive, ucb or eps_greedy.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
}

enum Failure {
    Input(Error),
    Runtime(Error),
}

type Outcome = Result<(), Failure>;

fn input<T>(r: atd_core::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Input)
}

fn runtime<T>(r: atd_core::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => input(ExperimentConfig::load(p)),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply(cfg: &mut ExperimentConfig, o: &Overrides) -> Result<(), Failure> {
    if let Some(p) = &o.policy {
        cfg.policy.kind = input(PolicyKind::parse(p))?;
    }
    if let Some(b) = o.budget {
        cfg.budget = b;
    }
    input(cfg.validate())
}

fn seed_of(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn gen_scene(c: &Common) -> Outcome {
    let cfg = load_config(c.config.as_deref())?;
    let exp = input(Experiment::<f64>::prepare(&cfg))?;
    let fmt = SceneFormat::from_path(&c.out)
        .ok_or_else(|| Failure::Input(Error::config("out", "extension must be .csv or .pgm")))?;
    let seed = seed_of(&cfg, c.seed);
    let scene = runtime(exp.scene(seed))?;
    runtime(save_scene(&scene, &c.out, fmt))?;
    eprintln!(
        "scene seed {seed}: {}x{}, {} target locations -> {}",
        scene.layout().rows(),
        scene.layout().cols(),
        scene.target_locations(),
        c.out.display()
    );
    Ok(())
}

fn run(c: &Common, o: &Overrides) -> Outcome {
    let mut cfg = load_config(c.config.as_deref())?;
    apply(&mut cfg, o)?;
    let exp = input(Experiment::<f64>::prepare(&cfg))?;
    let seed = seed_of(&cfg, c.seed);
    let r = runtime(exp.run(&cfg.policy, cfg.budget, seed))?;
    runtime(r.save_trace(&c.out))?;
    eprintln!(
        "{} B={} seed {seed}: R={} U={} SR={:.4} ({:.2}s) -> {}",
        cfg.policy.kind.name(),
        cfg.budget,
        r.collected,
        r.target_locations,
        r.sr_term,
        r.wall_time,
        c.out.display()
    );
    Ok(())
}

fn suite(config: Option<&Path>, out: Option<&Path>, jobs: usize, trace: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    if jobs == 0 {
        return Err(Failure::Input(Error::config("jobs", "must be at least 1")));
    }
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("results.csv"));
    let cells = cfg.policies().len() * cfg.budgets().len() * cfg.seeds.len();
    eprintln!("running {cells} episodes on {jobs} thread(s)");
    let report = input(run_suite::<f64>(&cfg, jobs))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        runtime(std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        }))?;
    }
    runtime(report.save_csv(&out))?;
    if let Some(dir) = trace {
        runtime(std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        }))?;
        for ep in &report.episodes {
            let name = format!("{}_B{}_seed{}.csv", ep.policy.name(), ep.budget, ep.seed);
            runtime(ep.save_trace(&dir.join(name)))?;
        }
    }
    for r in &report.rows {
        eprintln!(
            "{:16} B={:<4} SR {:.4} +- {:.4} (n={})",
            r.policy.name(),
            r.budget,
            r.mean_sr,
            r.std_sr,
            r.n_seeds
        );
    }
    eprintln!("results -> {}", out.display());
    match report.failures.first() {
        None => Ok(()),
        Some(_) => {
            for f in &report.failures {
                eprintln!(
                    "failed: {} B={} seed {}: {}",
                    f.policy.name(),
                    f.budget,
                    f.seed,
                    f.error
                );
            }
            Err(Failure::Runtime(Error::config(
                "suite",
                format!("{} of {cells} episodes failed", report.failures.len()),
            )))
        }
    }
}

fn scores(c: &Common, o: &Overrides, step: usize, trace: Option<&Path>) -> Outcome {
    let mut cfg = load_config(c.config.as_deref())?;
    apply(&mut cfg, o)?;
    if step >= cfg.budget {
        return Err(Failure::Input(Error::config(
            "step",
            format!("must be below the budget {}", cfg.budget),
        )));
    }
    let exp = input(Experiment::<f64>::prepare(&cfg))?;
    let seed = seed_of(&cfg, c.seed);
    let scene = runtime(exp.scene(seed))?;
    let mut field = None;
    let r = runtime(
        exp.run_observed(&scene, &cfg.policy, cfg.budget, seed, &mut |t, f| {
            if t == step {
                field = Some(f.clone());
            }
        }),
    )?;
    let field = field.ok_or(Failure::Runtime(Error::ExhaustedCandidates))?;
    runtime(field.save_csv(&c.out))?;
    if let Some(p) = trace {
        runtime(r.save_trace(p))?;
    }
    eprintln!(
        "score field at measurement {step} ({} candidates) -> {}",
        field.len(),
        c.out.display()
    );
    Ok(())
}

fn validate(config: Option<&Path>, seed: u64) -> Outcome {
    if let Some(p) = config {
        let cfg = load_config(Some(p))?;
        input(Experiment::<f64>::prepare(&cfg))?;
        let _ = writeln!(std::io::stdout(), "PASS config: {}", p.display());
    }
    let outcomes = runtime(validation::run_all(seed))?;
    for o in &outcomes {
        let _ = writeln!(std::io::stdout(), "{o}");
    }
    match outcomes.iter().find(|o| !o.passed) {
        None => Ok(()),
        Some(o) => Err(Failure::Runtime(Error::config(
            "validate",
            format!("suite `{}` failed", o.name),
        ))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match &cli.command {
        Command::GenScene { common } => gen_scene(common),
        Command::Run { common, overrides } => run(common, overrides),
        Command::Suite {
            config,
            out,
            jobs,
            trace,
        } => suite(config.as_deref(), out.as_deref(), *jobs, trace.as_deref()),
        Command::Scores {
            common,
            overrides,
            step,
            trace,
        } => scores(common, overrides, *step, trace.as_deref()),
        Command::Validate { config, seed } => validate(config.as_deref(), *seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
