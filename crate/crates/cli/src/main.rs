use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ddgda_core::experiment::{parse_value, run, sweep, ExperimentConfig, RunManifest};

#[derive(Parser)]
#[command(name = "ddgda", version, about = "Drift adaptation experiments driven by a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the scenario's synthetic stream and its oracle weights as CSV.
    Generate(Common),
    /// Run every (method, seed) cell and write metrics.csv and manifest.json.
    Run(Common),
    /// Rerun the config once per value of a scalar parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted path into the config, e.g. `tasks.interval` or `methods.0.temperature`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run with weight dumps on and summarize each task's resampling distribution.
    InspectWeights(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads for (method, seed) cells; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::from_path(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed_override {
            cfg.seeds = vec![seed];
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        cfg.output_dir = out.clone();
        if let Some(n) = self.threads {
            if n == 0 {
                bail!("--threads must be at least 1");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring thread pool")?;
        }
        Ok((cfg, out))
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("{failed} cell(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns the number of failed cells.
fn dispatch(cli: Cli) -> Result<usize> {
    match cli.command {
        Command::Generate(common) => generate(&common).map(|_| 0),
        Command::Run(common) => {
            let (cfg, out) = common.load()?;
            let mut manifest = run(&cfg)?;
            manifest.write_outputs(&out)?;
            print_summary(&manifest);
            println!("wrote {}", out.display());
            Ok(manifest.failed_cells())
        }
        Command::Sweep { common, param, values } => {
            let (cfg, out) = common.load()?;
            let values: Vec<toml::Value> = values.iter().map(|v| parse_value(v.trim())).collect();
            let mut result = sweep(&cfg, &param, &values)?;
            std::fs::create_dir_all(&out)?;
            for (value, manifest) in result.values.iter().zip(result.manifests.iter_mut()) {
                let label = match value {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                manifest.write_outputs(&out.join(format!("{param}={label}")))?;
                println!("{param} = {label}");
                print_summary(manifest);
            }
            let path = out.join("sweep.csv");
            std::fs::write(&path, result.csv())?;
            println!("wrote {}", path.display());
            Ok(result.manifests.iter().map(RunManifest::failed_cells).sum())
        }
        Command::InspectWeights(common) => {
            let (mut cfg, out) = common.load()?;
            cfg.dump_weights = true;
            let mut manifest = run(&cfg)?;
            manifest.write_outputs(&out)?;
            for cell in manifest.cells.iter().filter(|c| !c.weights.is_empty()) {
                let path = out.join(format!("weights_summary_{}_seed{}.csv", cell.method, cell.seed));
                write_weight_summary(&path, cell)?;
                println!("wrote {}", path.display());
            }
            Ok(manifest.failed_cells())
        }
    }
}

fn generate(common: &Common) -> Result<()> {
    let (cfg, out) = common.load()?;
    std::fs::create_dir_all(&out)?;
    for &seed in &cfg.seeds {
        let (stream, generated) = cfg.scenario.materialize(seed)?;
        let Some(generated) = generated else {
            bail!("scenario kind `{}` is not synthetic", cfg.scenario.tag());
        };
        let stream_path = out.join(format!("stream_seed{seed}.csv"));
        stream.write_csv(BufWriter::new(File::create(&stream_path)?))?;
        let oracle_path = out.join(format!("oracle_seed{seed}.csv"));
        generated.oracle.write_csv(BufWriter::new(File::create(&oracle_path)?))?;
        println!("wrote {} ({} samples)", stream_path.display(), stream.len());
    }
    Ok(())
}

fn print_summary(manifest: &RunManifest) {
    let metrics = &manifest.config.metrics;
    print!("{:<20}", "method");
    for m in metrics {
        print!(" {:>12}", m.name());
    }
    println!();
    let mut by_method: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for c in &manifest.cells {
        by_method.entry(c.method.as_str()).or_default().push(c);
    }
    for (method, cells) in by_method {
        print!("{method:<20}");
        for m in metrics {
            let vals: Vec<f64> = cells.iter().filter_map(|c| c.metric(*m)).collect();
            if vals.is_empty() {
                print!(" {:>12}", "-");
            } else {
                print!(" {:>12.6}", vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        println!();
        for c in cells.iter().filter(|c| c.error.is_some()) {
            println!("  seed {} failed: {}", c.seed, c.error.as_deref().unwrap_or_default());
        }
    }
}

/// Per task: effective sample size `1/Σq²`, largest probability and the
/// probability-weighted age of the train window in ticks.
fn write_weight_summary(path: &Path, cell: &ddgda_core::experiment::CellReport) -> Result<()> {
    let mut tasks: BTreeMap<i64, Vec<(i64, f64)>> = BTreeMap::new();
    for r in &cell.weights {
        tasks.entry(r.task_time).or_default().push((r.sample_timestamp, r.q));
    }
    let mut out = String::from("task_time,samples,effective_samples,max_q,mean_age\n");
    for (t, rows) in tasks {
        let total: f64 = rows.iter().map(|r| r.1).sum();
        let sq: f64 = rows.iter().map(|r| (r.1 / total).powi(2)).sum();
        let max_q = rows.iter().map(|r| r.1 / total).fold(0.0, f64::max);
        let age: f64 = rows.iter().map(|r| (t - r.0) as f64 * r.1 / total).sum();
        out.push_str(&format!("{t},{},{},{max_q},{age}\n", rows.len(), 1.0 / sq));
    }
    std::fs::write(path, out)?;
    Ok(())
}
