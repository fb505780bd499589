//! Command-line front end for running split fine-tuning experiments.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gtune_core::experiment::{
    emit_comparison, generate_toy_task, rerun_attack, run_experiment, ArchitectureChoice, ExperimentConfig, RunReport,
    REPORT_FILE,
};

#[derive(Parser)]
#[command(name = "gtune", version, about = "Split fine-tuning simulator with privacy attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its run directory.
    Run(ConfigArgs),
    /// Re-run the attacks on an existing run directory.
    Attack {
        run_dir: PathBuf,
        /// Replace the stored attack settings with the `[attack]` table of
        /// this config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tabulate reports (files or run directories) as text and CSV.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Directory for comparison.txt and comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the train and eval sets of the configured task as JSON.
    GenData(ConfigArgs),
    /// Run every architecture over a range of seeds.
    Suite {
        #[command(flatten)]
        base: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["sl", "online", "gradfree", "offline"])]
    arch: Option<String>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    percentile: Option<u8>,
    #[arg(long)]
    no_quant: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for cached pre-trained models.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_toml(&text).with_context(|| format!("loading {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.arch {
            cfg.architecture = a.parse()?;
        }
        if let Some(l) = self.lambda {
            cfg.defense.lambda = l;
        }
        if let Some(b) = self.bits {
            cfg.defense.bits = b;
        }
        if let Some(p) = self.percentile {
            cfg.defense.percentile = p;
        }
        if self.no_quant {
            cfg.defense.quantize = false;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(c) = &self.cache {
            cfg.cache_dir = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn outcome(v: &gtune_core::attack::Outcome<f64>) -> String {
    v.as_option().map_or("N/A".to_string(), |x| format!("{x:.2}"))
}

fn summary(r: &RunReport) -> String {
    format!(
        "{:<9} seed {:<3} acc {:.3} -> {:.3}  finetune-F1 {:>6}  inference-F1 {:>6}  fine-tune bytes {}  shared layers {}  ({:.1}s)",
        r.architecture.name(),
        r.seed,
        r.accuracy.zero_shot,
        r.accuracy.fine_tuned,
        outcome(&r.finetune_privacy),
        outcome(&r.inference_privacy),
        r.comm.fine_tune_bytes,
        r.shared_layer_count,
        r.wall_time_secs
    )
}

fn read_report(path: &Path) -> Result<RunReport> {
    let file = if path.is_dir() {
        path.join(REPORT_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let report = run_experiment(&cfg)?;
            println!("{}", summary(&report));
            if let Some(dir) = &cfg.out_dir {
                println!("wrote {}", dir.display());
            }
        }
        Command::Attack { run_dir, config } => {
            let attack = match config {
                Some(p) => Some(ExperimentConfig::from_toml(&fs::read_to_string(&p)?)?.attack),
                None => None,
            };
            let report = rerun_attack(&run_dir, attack)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare { reports, out } => {
            let reports = reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
            let table = emit_comparison(&reports)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("comparison.txt"), table.to_text())?;
                fs::write(dir.join("comparison.csv"), table.to_csv())?;
            }
        }
        Command::GenData(args) => {
            let cfg = args.load()?;
            let Some(dir) = &cfg.out_dir else {
                bail!("gen-data needs --out");
            };
            let data = generate_toy_task(&cfg.task, cfg.seed)?;
            fs::create_dir_all(dir)?;
            let path = dir.join("dataset.json");
            fs::write(&path, serde_json::to_string(&data)?)?;
            println!(
                "wrote {} ({} train, {} eval)",
                path.display(),
                data.train.len(),
                data.eval.len()
            );
        }
        Command::Suite { base, seeds } => {
            let root = base.out.clone().context("suite needs --out")?;
            let mut reports = Vec::new();
            for arch in ArchitectureChoice::ALL {
                for seed in 0..seeds {
                    let mut cfg = base.load()?;
                    cfg.architecture = arch;
                    cfg.seed = seed;
                    cfg.out_dir = Some(root.join(format!("{}-{seed}", arch.name())));
                    if cfg.cache_dir.is_none() {
                        cfg.cache_dir = Some(root.join("cache"));
                    }
                    let r = run_experiment(&cfg).with_context(|| format!("{} seed {seed}", arch.name()))?;
                    println!("{}", summary(&r));
                    reports.push(r);
                }
            }
            let table = emit_comparison(&reports)?;
            print!("{}", table.to_text());
            fs::write(root.join("comparison.txt"), table.to_text())?;
            fs::write(root.join("comparison.csv"), table.to_csv())?;
        }
    }
    Ok(())
}
