use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kgp::bench::{parse_sizes, run_bench, to_csv, BenchOptions, DEFAULT_SIZES};
use kgp::commands::{aborted_error, generate, predict_run, train_run};
use kgp::io::{write_bytes, write_json, RunConfig};
use kgp::verify::{run_suite, Perturbation, Suite, VerifyOptions};
use kgp::{KgpError, Result};

#[derive(Parser)]
#[command(name = "kgp", version, about = "Kronecker-structured GP regression on rectilinear and gappy grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (snapshot tensors plus manifest.json).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict mean and variance (or variance bounds) on a test split.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Manifest whose test split is predicted; defaults to the model's.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Report relative error against the stored test snapshots.
        #[arg(long)]
        truth: bool,
    },
    /// Run a self-check suite; exit 0 iff every check passes.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negative-control hook.
        #[arg(long, value_enum)]
        perturb: Option<PerturbArg>,
        #[arg(long, default_value_t = 1e-3)]
        perturb_size: f64,
    },
    /// Time structured vs dense NLML across lattice sizes.
    Bench {
        /// Comma-separated spatial sizes M.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = 1)]
        dims: usize,
        #[arg(long, default_value_t = 4096)]
        dense_cap: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbArg {
    Pseudovalues,
    Factor,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KGP_THREADS") {
        let n: usize = v.parse().map_err(|_| KgpError::Validation(format!("KGP_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(KgpError::Validation("KGP_THREADS must be positive".into()));
        }
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn run(cmd: Command) -> Result<i32> {
    init_threads()?;
    match cmd {
        Command::Generate { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(out, &cfg);
            let man = generate(&cfg, &dir)?;
            println!("wrote {} training and {} test snapshots to {}", man.train.len(), man.test.len(), dir.display());
            Ok(0)
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(out, &cfg);
            let o = train_run(&cfg, &dir)?;
            println!(
                "nlml {:.6} -> {:.6} (best at iteration {}), sigma2 {:.3e}; model in {}",
                o.initial_nlml,
                o.best_nlml,
                o.best_iteration,
                o.sigma2,
                dir.display()
            );
            match &o.aborted {
                Some(reason) => Err(aborted_error(reason)),
                None => Ok(0),
            }
        }
        Command::Predict { model, test, out, truth } => {
            let r = predict_run(&model, test.as_deref(), &out, truth)?;
            if let (Some(errs), Some(m)) = (&r.relative_errors, r.mean_relative_error) {
                for (p, e) in r.test_params.iter().zip(errs) {
                    println!("mu = {p:?}: relative error {e:.4e}");
                }
                println!("mean relative error {m:.4e}");
            }
            println!("wrote {} to {}", r.files.join(", "), out.display());
            Ok(0)
        }
        Command::Verify { suite, seed, out, perturb, perturb_size } => {
            let suite: Suite = suite.parse()?;
            let perturbation = match perturb {
                None => Perturbation::None,
                Some(PerturbArg::Pseudovalues) => Perturbation::Pseudovalues(perturb_size),
                Some(PerturbArg::Factor) => Perturbation::Factor(perturb_size),
            };
            let opts = VerifyOptions { seed, perturbation, ..VerifyOptions::default() };
            let report = run_suite(suite, &opts)?;
            let failed = report.checks.iter().filter(|c| !c.passed).count();
            let worst = report.checks.iter().filter_map(|c| c.margin).fold(f64::INFINITY, f64::min);
            println!(
                "{:?}: {} checks, {} failed, worst margin {:.3e}",
                report.suite,
                report.checks.len(),
                failed,
                worst
            );
            if let Some(dir) = out {
                write_json(&dir.join("verify_report.json"), &report)?;
            }
            Ok(if report.passed { 0 } else { 3 })
        }
        Command::Bench { sizes, dims, dense_cap, out } => {
            let sizes = match sizes {
                Some(s) => parse_sizes(&s)?,
                None => DEFAULT_SIZES.to_vec(),
            };
            let rows = run_bench(&sizes, &BenchOptions { dims, dense_cap, ..BenchOptions::default() })?;
            let csv = to_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                write_bytes(&dir.join("bench.csv"), csv.as_bytes())?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
