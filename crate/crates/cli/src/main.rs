use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use piip::explorer::{emit, join_quality, load_table, parse_sweep, write_csv, Format};
use piip::harness::dataset::{make_dataset, SyntheticTask};
use piip::harness::train::{train_toy, TrainOptions};
use piip::harness::verify_all;
use piip::{cost_delta, cost_report, pareto_front, parse_config, preset, sweep, PyramidConfig, PRESETS};

#[derive(Parser)]
#[command(name = "piip", version, about = "Parameter-inverted image pyramid cost model, explorer and toy trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter and FLOPs breakdown of a config file or preset.
    Cost {
        /// Config file path or preset name.
        config: String,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also print the delta from CONFIG to this config or preset.
        #[arg(long)]
        vs: Option<String>,
    },
    /// Sweep branch resolutions and write the cost table.
    Sweep {
        /// Sweep spec (TOML).
        spec: PathBuf,
        /// Output table; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        /// FLOPs budget in GFLOPs; overrides the spec's `budget_gflops`.
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Keep the rows of a table that no other row dominates.
    Pareto {
        /// CSV or JSON table.
        table: PathBuf,
        #[arg(long, default_value = "flops")]
        cost: String,
        #[arg(long, default_value = "acc")]
        quality: String,
        /// Metrics CSV from `train-toy` to join onto the table by config_id.
        #[arg(long)]
        join: Option<PathBuf>,
        /// Write the front here instead of printing CSV to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a config on the synthetic glyph task and write its metrics CSV.
    TrainToy {
        /// Config file path or preset name; must have a classifier.
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = TrainOptions::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = TrainOptions::default().batch_size)]
        batch: usize,
        #[arg(long, default_value_t = TrainOptions::default().lr)]
        lr: f64,
        /// Save the trained weights here.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Run the oracle, gradient and consistency checks.
    Verify,
}

fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var("PIIP_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().map_err(|_| piip::Error::Validation(format!("PIIP_SEED `{s}` is not an unsigned integer")))?)),
        Err(_) => Ok(None),
    }
}

fn load_config(arg: &str) -> anyhow::Result<PyramidConfig> {
    let path = Path::new(arg);
    let looks_like_name = !arg.contains(['/', '\\', '.']);
    let mut cfg = if !path.exists() && (PRESETS.contains(&arg) || looks_like_name) {
        preset(arg)?
    } else {
        let text = std::fs::read_to_string(path).map_err(piip::Error::from).with_context(|| format!("reading {arg}"))?;
        parse_config(&text).with_context(|| format!("in {arg}"))?
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Cost { config, json, vs } => {
            let cfg = load_config(&config)?;
            let report = cost_report(&cfg);
            if json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&report.to_json())?)?;
            } else {
                write!(stdout, "{}", report.render_table())?;
            }
            if let Some(other) = vs {
                let delta = cost_delta(&cfg, &load_config(&other)?);
                writeln!(stdout)?;
                let pct = |p: Option<f64>| p.map_or("n/a".to_string(), |p| format!("{p:+.2}%"));
                writeln!(stdout, "{:<14} {:>15} {:>9} {:>18} {:>9}", "delta", "params", "", "flops", "")?;
                for e in delta.entries.iter().chain(std::iter::once(&delta.total)) {
                    writeln!(
                        stdout,
                        "{:<14} {:>+15} {:>9} {:>+18} {:>9}",
                        e.name,
                        e.params,
                        pct(e.params_pct),
                        e.flops,
                        pct(e.flops_pct)
                    )?;
                }
            }
        }
        Command::Sweep { spec, out, budget } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(piip::Error::from)
                .with_context(|| format!("reading {}", spec.display()))?;
            let dir = spec.parent().unwrap_or(Path::new("."));
            let mut spec = parse_sweep(&text, dir)?;
            if budget.is_some() {
                spec.budget_gflops = budget;
            }
            let table = sweep(&spec)?;
            emit(&table, &out, Format::from_path(&out)).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} configurations written to {}", table.rows.len(), out.display());
        }
        Command::Pareto { table, cost, quality, join, out } => {
            let mut t = load_table(&table).with_context(|| format!("reading {}", table.display()))?;
            if let Some(metrics) = join {
                let m = load_table(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
                t = join_quality(&t, &m, &quality)?;
            }
            let front = pareto_front(&t, &cost, &quality)?;
            match out {
                Some(path) => emit(&front, &path, Format::from_path(&path))?,
                None => write_csv(&front, &mut stdout)?,
            }
        }
        Command::TrainToy { config, out, samples, steps, batch, lr, weights } => {
            let cfg = load_config(&config)?;
            let data = make_dataset(&SyntheticTask::new(cfg.largest_resolution()), samples, cfg.seed)?;
            let opts = TrainOptions { steps, batch_size: batch, lr, seed: cfg.seed, ..TrainOptions::default() };
            let (model, metrics) = train_toy(&cfg, &data, &opts)?;
            metrics.write_csv(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = weights {
                model.save(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            writeln!(
                stdout,
                "{}: final train acc {:.4}, last window loss {:.4}, {:.1}s",
                metrics.config_id,
                metrics.final_train_acc,
                metrics.rows.last().map_or(f64::NAN, |r| r.loss),
                metrics.seconds
            )?;
        }
        Command::Verify => {
            let results = verify_all(seed_override()?.unwrap_or(0));
            for r in &results {
                writeln!(stdout, "{r}")?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!(piip::Error::Validation(format!("{failed} of {} checks failed", results.len())));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<piip::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
