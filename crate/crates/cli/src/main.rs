use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hwbp::engine::Algorithm;
use hwbp::harness::{
    analyze, bench, gradcheck, highway_time_nondecreasing, train, GradcheckOptions, TrainConfig, ANALYZE_HEADER,
    BENCH_HEADER, PRESETS,
};

#[derive(Parser)]
#[command(name = "hwbp", version, about = "Highway backpropagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics.csv, norm_profile.csv, manifest.toml and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the engine against backprop, the path oracle and finite differences.
    Gradcheck {
        /// One of gru, lstm, plain, relu, gamma; all presets when omitted.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the residual Jacobians seen by the engine; the suites should fail.
        #[arg(long, hide = true)]
        corrupt_k: bool,
    },
    /// Cosine similarity and norm profile of highway(k) for k = 0..=max-k.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        max_k: usize,
    },
    /// Median step time and call counters for backprop, fpi(k) and highway(k).
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
}

fn run_train(config: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = TrainConfig::load(&config)?;
    let report = train(cfg, out.as_deref())?;
    for row in &report.rows {
        eprintln!(
            "step {:>6}  loss {:.6}  {:.0} ms{}",
            row.step,
            row.train_loss,
            row.wall_ms,
            row.eval_loss.map_or(String::new(), |l| format!("  eval {l:.6}"))
        );
    }
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    match report.final_eval_loss {
        Some(e) => println!("final train loss {last:.6}, eval loss {e:.6}"),
        None => println!("final train loss {last:.6}"),
    }
    Ok(())
}

fn run_gradcheck(model: Option<String>, layers: usize, width: usize, seed: u64, corrupt_k: bool) -> Result<bool> {
    let presets: Vec<String> = match model {
        Some(m) => vec![m],
        None => PRESETS.iter().map(|s| s.to_string()).collect(),
    };
    let mut ok = true;
    println!("preset,suite,worst,tolerance,result");
    for preset in presets {
        let opts = GradcheckOptions {
            preset: preset.clone(),
            layers,
            width,
            seed,
            corrupt_k,
            ..GradcheckOptions::default()
        };
        for s in gradcheck(&opts).with_context(|| format!("gradcheck {preset}"))? {
            let verdict = if s.passed() { "PASS" } else { "FAIL" };
            ok &= s.passed();
            println!("{preset},{},{:e},{:e},{verdict}", s.name, s.worst, s.tolerance);
        }
    }
    Ok(ok)
}

fn run_bench(config: PathBuf, ks: Vec<usize>, trials: usize) -> Result<bool> {
    let cfg = TrainConfig::load(&config)?;
    let l = cfg.model.layers;
    let rows = bench(&cfg, &ks, trials)?;
    println!("{BENCH_HEADER}");
    let mut ok = true;
    for r in &rows {
        println!("{}", r.to_csv());
        let expect = match r.algorithm {
            Algorithm::Backprop => l,
            Algorithm::Highway(k) | Algorithm::Fpi(k) => k * l,
        };
        if r.vjp_block_calls != expect {
            eprintln!("{:?}: {} vjp_block calls, expected {expect}", r.algorithm, r.vjp_block_calls);
            ok = false;
        }
    }
    if !highway_time_nondecreasing(&rows) {
        eprintln!("note: highway step time is not monotone in k on this machine");
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out } => run_train(config, out).map(|_| true),
        Command::Gradcheck {
            model,
            layers,
            width,
            seed,
            corrupt_k,
        } => run_gradcheck(model, layers, width, seed, corrupt_k),
        Command::Analyze { checkpoint, max_k } => {
            let rows = analyze(&checkpoint, max_k)?;
            println!("{ANALYZE_HEADER}");
            for r in rows {
                println!("{}", r.to_csv());
            }
            Ok(true)
        }
        Command::Bench { config, k, trials } => {
            if k.is_empty() {
                bail!("--k needs at least one value");
            }
            run_bench(config, k, trials)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("hwbp: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("hwbp: {e:#}");
            ExitCode::FAILURE
        }
    }
}
