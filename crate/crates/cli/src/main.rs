//! `cuebias` command-line interface.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cuebias::backends::BackendsConfig;
use cuebias::dataset::load_dataset;
use cuebias::runner::report::{self, load_run, ResponsePattern};
use cuebias::runner::{self, RunConfig, RunOptions, RunSummary, SearchRunConfig, SweepConfig};

#[derive(Parser)]
#[command(name = "cuebias", version, about = "Texture/shape bias harness for vision-language models")]
struct Cli {
    /// Backends document (overrides `backends_file` in the config).
    #[arg(long, global = true)]
    backends: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a cue-conflict directory and print its manifest summary.
    Load {
        dataset_dir: PathBuf,
        /// Also write the manifest as JSON lines.
        #[arg(long)]
        manifest_out: Option<PathBuf>,
    },
    /// Execute a run config (resumes if the output directory has records).
    Run {
        config: PathBuf,
        /// Stop after this many records in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Execute every point of a sweep grid.
    Sweep { config: PathBuf },
    /// LLM-driven prompt search.
    Search { config: PathBuf },
    /// Aggregate run directories into CSV tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// External `item_id,correct_shape` pattern files.
        #[arg(long = "pattern")]
        patterns: Vec<PathBuf>,
    },
    /// Pairwise error-consistency (kappa) matrix as CSV on stdout.
    Consistency {
        runs: Vec<PathBuf>,
        #[arg(long = "pattern")]
        patterns: Vec<PathBuf>,
    },
}

fn registry(flag: &Option<PathBuf>, from_config: &Option<PathBuf>) -> Result<BackendsConfig> {
    let path = flag
        .as_ref()
        .or(from_config.as_ref())
        .context("no backends file: pass --backends or set `backends_file`")?;
    BackendsConfig::load(path).with_context(|| format!("loading backends from {}", path.display()))
}

fn print_summary(s: &RunSummary) {
    let fmt = |v: Option<f64>, f: fn(f64) -> String| v.map(f).unwrap_or_else(|| "n/a".into());
    println!(
        "{} [{}]: {}/{} trials ({} new){}",
        s.name,
        s.run_id,
        s.recorded_trials,
        s.expected_trials,
        s.new_trials,
        if s.complete { "" } else { ", incomplete" }
    );
    for seed in s.per_seed.iter().chain(std::iter::once(&s.pooled)) {
        let label = seed.seed.map_or_else(|| "pooled".to_string(), |v| format!("seed {v}"));
        let r = seed.report.as_ref();
        println!(
            "  {label}: shape bias {}%, accuracy {}% of attempted, {}% of total, {} errors",
            fmt(r.and_then(|r| r.shape_bias), report::pct1),
            fmt(seed.accuracy_of_attempted, report::pct2),
            report::pct2(seed.accuracy_of_total),
            seed.n_errors
        );
    }
}

fn patterns(runs: &[PathBuf], files: &[PathBuf]) -> Result<Vec<ResponsePattern>> {
    let mut out = Vec::new();
    let mut datasets = Vec::new();
    for r in runs {
        let run = load_run(r).with_context(|| format!("reading run {}", r.display()))?;
        datasets.push(run.clone());
        out.push(ResponsePattern::from_run(&run));
    }
    report::check_same_dataset(&datasets)?;
    for f in files {
        out.push(ResponsePattern::load_csv(f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(out)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Load {
            dataset_dir,
            manifest_out,
        } => {
            let m = load_dataset(dataset_dir).map_err(|e| match e {
                cuebias::dataset::DatasetError::Files(fs) => {
                    for f in &fs {
                        eprintln!("{}: {}", f.path.display(), f.message);
                    }
                    anyhow::anyhow!("{} files failed to load", fs.len())
                }
                other => other.into(),
            })?;
            println!(
                "{}: {} items retained, {} same-class items excluded, hash {}",
                dataset_dir.display(),
                m.len(),
                m.excluded_count,
                m.content_hash()
            );
            if let Some(p) = manifest_out {
                std::fs::write(p, m.to_jsonl())?;
            }
        }
        Command::Run { config, stop_after } => {
            let cfg = RunConfig::load(config)?;
            cfg.validate()?;
            let reg = registry(&cli.backends, &cfg.backends_file)?;
            let backends = runner::RunBackends::resolve(&cfg, &reg)?;
            let manifest = load_dataset(&cfg.dataset_dir)?;
            let s = runner::run_with(&cfg, &manifest, &backends, RunOptions { stop_after: *stop_after })?;
            print_summary(&s);
        }
        Command::Sweep { config } => {
            let cfg = SweepConfig::load(config)?;
            let reg = registry(&cli.backends, &cfg.base.backends_file)?;
            for s in runner::run_sweep(&cfg, &reg)? {
                print_summary(&s);
            }
        }
        Command::Search { config } => {
            let cfg = SearchRunConfig::load(config)?;
            let reg = registry(&cli.backends, &cfg.backends_file)?;
            let state = runner::run_search(&cfg, &reg)?;
            println!(
                "{} candidates over {} optimizer turns ({:?}); transcript in {}",
                state.candidates.len(),
                state.turns_used,
                state.stop_reason,
                cfg.output_dir.display()
            );
            match state.best_candidate() {
                Some(b) => println!(
                    "best: \"{}\" (shape bias {}%, accuracy {}%)",
                    b.prompt,
                    b.shape_bias().map_or("n/a".into(), report::pct1),
                    b.cue_accuracy().map_or("n/a".into(), report::pct2)
                ),
                None => println!("no candidate met the accuracy floor"),
            }
        }
        Command::Report {
            runs,
            out,
            patterns: files,
        } => {
            let data = runs
                .iter()
                .map(|r| load_run(r).with_context(|| format!("reading run {}", r.display())))
                .collect::<Result<Vec<_>>>()?;
            let external = files
                .iter()
                .map(|f| ResponsePattern::load_csv(f).map_err(anyhow::Error::from))
                .collect::<Result<Vec<_>>>()?;
            report::write_report(&data, &external, out)?;
            print!("{}", std::fs::read_to_string(out.join("bias.csv"))?);
            log::info!("tables written to {}", out.display());
        }
        Command::Consistency { runs, patterns: files } => {
            if runs.len() + files.len() < 2 {
                bail!("need at least two systems to compare");
            }
            let ps = patterns(runs, files)?;
            print!("{}", report::kappa_csv(&ps));
        }
    }
    Ok(())
}

