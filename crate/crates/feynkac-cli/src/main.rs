mod claims;
mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use feynkac::duhamel::{solve, BaseKernel};

use claims::{find_claim, run_claim, ClaimOutcome, RunContext, CATALOG};
use config::{ExperimentConfig, Prepared};
use output::Outputs;

#[derive(Parser)]
#[command(name = "feynkac", version, about = "Feynman-Kac kernel experiments for Levy processes")]
struct Cli {
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the claims of an experiment config.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// List the claim ids a config may request.
    ListClaims,
}

const EXIT_CLAIM: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_COMPUTE: u8 = 3;

struct Failure {
    stage: String,
    error: anyhow::Error,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_COMPUTE);
        }
    }
    match cli.command {
        Command::ListClaims => {
            for c in CATALOG {
                println!("{:<22} {}", c.id, c.description);
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, output_dir, seed_override } => run(&config, output_dir, seed_override, cli.threads),
    }
}

fn load(path: &Path, seed_override: Option<u64>) -> anyhow::Result<Prepared> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    cfg.prepare()
}

fn run(path: &Path, output_dir: Option<PathBuf>, seed_override: Option<u64>, threads: Option<usize>) -> ExitCode {
    let prep = match load(path, seed_override) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: invalid config: {e:#}");
            return ExitCode::from(EXIT_SCHEMA);
        }
    };
    let dir = output_dir.or_else(|| prep.config.output_dir.clone()).unwrap_or_else(|| Path::new("out").join(&prep.config.name));
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("error: stage output: cannot create {}: {e}", dir.display());
        return ExitCode::from(EXIT_COMPUTE);
    }
    let started = unix_now();
    let mut outputs = Outputs::default();
    let result = execute(&prep, &dir, &mut outputs);
    let (code, failed_stage) = match &result {
        Ok(outcomes) if outcomes.iter().all(|o| o.pass) => (0, None),
        Ok(_) => (EXIT_CLAIM, None),
        Err(f) => {
            eprintln!("error: stage {}: {:#}", f.stage, f.error);
            (EXIT_COMPUTE, Some(f.stage.clone()))
        }
    };
    if let Ok(outcomes) = &result {
        if let Err(e) = write_summary(&dir, &prep.hash, outcomes) {
            eprintln!("error: stage output: {e:#}");
            return ExitCode::from(EXIT_COMPUTE);
        }
        print_summary(&prep, outcomes);
    }
    let written = outputs.write_all(&dir, &prep.hash).and_then(|_| write_metadata(&dir, &prep, &outputs, started, threads, code, failed_stage));
    if let Err(e) = written {
        eprintln!("error: stage output: {e:#}");
        return ExitCode::from(EXIT_COMPUTE);
    }
    ExitCode::from(code)
}

fn stage<T>(name: &str, r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(|error| Failure { stage: name.to_string(), error })
}

fn execute(prep: &Prepared, dir: &Path, outputs: &mut Outputs) -> Result<Vec<ClaimOutcome>, Failure> {
    let cfg = &prep.config;
    let g = &cfg.grid;
    let base = stage("kernel", BaseKernel::new(prep.model.clone(), &g.times, g.half_width, g.dx, &prep.spectral).map_err(Into::into))?;
    stage("kernel", base.grid.save(&dir.join("base_kernel.fkg")).map_err(Into::into))?;
    let needs_solution = cfg.claims.iter().any(|id| find_claim(id).is_some_and(|c| c.uses_solution));
    let solution = if needs_solution {
        let sol = stage("solve", solve(&base, &prep.measure, &prep.solve).map_err(Into::into))?;
        let mut buf = Vec::new();
        stage("solve", sol.write_ledger_csv(&mut buf).map_err(Into::into))?;
        outputs.append_with_header("ledger.csv", &buf);
        for (ti, t) in sol.times().iter().enumerate() {
            let mut buf = Vec::new();
            stage("solve", sol.write_slice_csv(&mut buf, ti).map_err(Into::into))?;
            let text = String::from_utf8_lossy(&buf);
            let rows: String = text.lines().skip(1).map(|l| format!("{t:e},{l}\n")).collect();
            outputs.append("solution_slices.csv", "t,x,y,value", rows.as_bytes());
        }
        stage("solve", sol.p_a.save(&dir.join("p_a.fkg")).map_err(Into::into))?;
        Some(sol)
    } else {
        None
    };
    let mut ctx = RunContext { prep, base, solution, horizon: None, outputs };
    let mut outcomes = Vec::new();
    for id in &cfg.claims {
        outcomes.push(stage(&format!("claim {id}"), run_claim(id, &mut ctx))?);
    }
    Ok(outcomes)
}

fn write_summary(dir: &Path, hash: &str, outcomes: &[ClaimOutcome]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["config_hash", "claim", "verdict", "value", "threshold", "detail"])?;
    for o in outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        w.write_record([hash, &o.id, verdict, &format!("{:e}", o.value), &format!("{:e}", o.threshold), &o.detail])?;
    }
    w.flush()?;
    Ok(())
}

fn print_summary(prep: &Prepared, outcomes: &[ClaimOutcome]) {
    println!("{} ({})", prep.config.name, prep.hash);
    for o in outcomes {
        println!("  {:<4} {:<22} {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn write_metadata(dir: &Path, prep: &Prepared, outputs: &Outputs, started: f64, threads: Option<usize>, code: u8, failed_stage: Option<String>) -> anyhow::Result<()> {
    let mut files: Vec<String> = outputs.names().map(String::from).collect();
    for extra in ["summary.csv", "base_kernel.fkg", "p_a.fkg"] {
        if dir.join(extra).exists() {
            files.push(extra.to_string());
        }
    }
    files.sort();
    let meta = serde_json::json!({
        "config_hash": prep.hash,
        "name": prep.config.name,
        "seed": prep.config.seed,
        "config": prep.config,
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "started_unix": started,
        "finished_unix": unix_now(),
        "exit_code": code,
        "failed_stage": failed_stage,
        "files": files,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
