use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lutmoe_cli::commands;
use lutmoe_cli::error::{exit, CliError, Result};
use lutmoe_cli::multipliers::mulinfo;
use lutmoe_cli::report::{count_csv, count_table, parse_sweep_csv, plot_data, sibling, sweep_csv, to_json, write_file};
use lutmoe_cli::ExperimentConfig;

/// Options accepted before and after the subcommand. Scalars given after it
/// win; repeated options accumulate, earlier ones first.
#[derive(Debug, Clone, Default, Args)]
struct Shared {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (file or directory, depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multiplier name or table file; repeat to list several. Replaces the
    /// configured list.
    #[arg(long = "multiplier")]
    multipliers: Vec<String>,
    /// Single-threaded execution and zeroed timing fields.
    #[arg(long)]
    deterministic: bool,
    /// Config override, `key=value`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Shared {
    fn then(mut self, later: &Shared) -> Shared {
        self.config = later.config.clone().or(self.config);
        self.seed = later.seed.or(self.seed);
        self.out = later.out.clone().or(self.out);
        self.multipliers.extend(later.multipliers.iter().cloned());
        self.deterministic |= later.deterministic;
        self.overrides.extend(later.overrides.iter().cloned());
        self
    }
}

#[derive(Debug, Parser)]
#[command(name = "lutmoe", version, about = "Approximate-multiplier sweeps over dense and mixture-of-experts models")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Static and effective MACs per variant (no weights or data needed).
    Count(Shared),
    /// Accuracy of a checkpoint under each multiplier without retraining.
    Eval(Shared),
    /// Every variant x multiplier pair: optional retrain, eval and cost.
    Sweep(Shared),
    /// Approximate-aware retraining; `--out` receives the checkpoints.
    Retrain(Shared),
    /// Float training; `--out` receives one checkpoint per variant.
    Train(Shared),
    /// Pareto frontier of a sweep CSV.
    Pareto {
        /// Sweep CSV to read.
        csv: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Error statistics and per-operation power savings of multipliers.
    Mulinfo(Shared),
}

impl Cmd {
    fn shared(&self) -> &Shared {
        match self {
            Cmd::Count(s) | Cmd::Eval(s) | Cmd::Sweep(s) | Cmd::Retrain(s) | Cmd::Train(s) | Cmd::Mulinfo(s) => s,
            Cmd::Pareto { shared, .. } => shared,
        }
    }
}

fn load_config(opts: &Shared) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&opts.overrides)?;
    if let Some(s) = opts.seed {
        cfg.set("seed", &s.to_string()).map_err(CliError::Config)?;
    }
    if !opts.multipliers.is_empty() {
        cfg.multipliers = opts.multipliers.clone();
    }
    if opts.out.is_some() {
        cfg.out = opts.out.clone();
    }
    Ok(cfg)
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn print_rows(rows: &[lutmoe::SweepPoint]) -> Result<()> {
    print!("{}", String::from_utf8_lossy(&sweep_csv(rows)?));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let opts = cli.shared.clone().then(cli.cmd.shared());
    if opts.deterministic {
        lutmoe::par::set_sequential(true);
    }
    if let Cmd::Pareto { csv, .. } = &cli.cmd {
        let bytes = std::fs::read(csv).map_err(|e| CliError::io(csv, e))?;
        let rows = parse_sweep_csv(&bytes, &csv.display().to_string())?;
        let front = commands::pareto(&rows)?;
        match &opts.out {
            Some(out) => {
                write_file(out, &sweep_csv(&front)?)?;
                let plot = sibling(out, "plot.csv");
                write_file(&plot, &plot_data(&front))?;
                eprintln!("{} of {} rows on the frontier; wrote {} and {}", front.len(), rows.len(), out.display(), plot.display());
            }
            None => print_rows(&front)?,
        }
        return Ok(());
    }
    if let Cmd::Mulinfo(_) = &cli.cmd {
        let rows = mulinfo(&opts.multipliers)?;
        println!("{:<12} {:>9} {:>9} {:>11} {:>10} {:>10} {:>9}", "multiplier", "power nW", "saving %", "published %", "error %", "mean |e|", "max |e|");
        for r in &rows {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            println!(
                "{:<12} {:>9.3} {:>9.2} {:>11} {:>10.2} {:>10} {:>9}",
                r.name,
                r.power_nw,
                r.saving_pct,
                opt(r.published_saving_pct),
                r.error_probability_pct,
                opt(r.mean_abs_error),
                r.max_abs_error.map_or("-".to_string(), |v| v.to_string()),
            );
        }
        if let Some(out) = &opts.out {
            write_file(out, &to_json(&rows)?)?;
        }
        return Ok(());
    }
    let cfg = load_config(&opts)?;
    match &cli.cmd {
        Cmd::Count(_) => {
            let reports = commands::count(&cfg)?;
            print!("{}", count_table(&reports));
            if let Some(out) = &cfg.out {
                let bytes = if is_json(out) { to_json(&reports)? } else { count_csv(&reports)? };
                write_file(out, &bytes)?;
            }
        }
        Cmd::Eval(_) => {
            let r = commands::eval(&cfg)?;
            for (v, acc) in &r.float_accuracy {
                eprintln!("{v}: float top-1 {acc:.4}");
            }
            match &cfg.out {
                Some(out) if is_json(out) => write_file(out, &to_json(&r.rows)?)?,
                Some(out) => write_file(out, &sweep_csv(&r.rows)?)?,
                None => print_rows(&r.rows)?,
            }
        }
        Cmd::Sweep(_) => {
            let rec = commands::sweep(&cfg, opts.deterministic)?;
            match &cfg.out {
                Some(out) => {
                    write_file(out, &sweep_csv(&rec.rows)?)?;
                    let json = sibling(out, "json");
                    write_file(&json, &to_json(&rec)?)?;
                    eprintln!("{} rows; wrote {} and {}", rec.rows.len(), out.display(), json.display());
                }
                None => print_rows(&rec.rows)?,
            }
        }
        Cmd::Retrain(_) => {
            let outs = commands::retrain_cmd(&cfg, cfg.out.as_deref())?;
            for o in &outs {
                let r = &o.report;
                println!(
                    "{} {}: {:.4} -> {:.4} (routing drift {:.4}, frozen delta {})",
                    o.variant,
                    r.multiplier,
                    r.baseline_accuracy,
                    r.final_accuracy(),
                    r.drift.rate(),
                    r.frozen_max_delta
                );
            }
            if let Some(out) = &cfg.out {
                let reports: Vec<_> = outs.iter().map(|o| (o.variant, &o.report)).collect();
                write_file(&out.join("retrain.json"), &to_json(&reports)?)?;
            }
        }
        Cmd::Train(_) => {
            let out = cfg.out.clone().ok_or_else(|| CliError::Config("train needs --out DIR".into()))?;
            for (v, acc) in commands::pretrain(&cfg, &out)? {
                println!("{v}: float top-1 {acc:.4} -> {}", out.join(v.as_str()).display());
            }
        }
        Cmd::Pareto { .. } | Cmd::Mulinfo(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
