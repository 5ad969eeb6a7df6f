//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rdcm_core::contrastive::ContrastiveMode;
use rdcm_core::mmd::MmdVariant;
use rdcm_core::model::Mode;
use rdcm_core::synth::generate;

use crate::checkpoint;
use crate::config::{Overrides, RunConfig};
use crate::dataset::{read_manifest, summarize, write_dataset};
use crate::error::{Result, RunError};
use crate::experiment::{self, Experiment};

#[derive(Debug, Parser)]
#[command(name = "rdcm", version, about = "Multi-modal domain alignment experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// One or more seeds, comma separated.
    #[arg(long = "seed", global = true, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_core::<Mode>)]
    pub mode: Option<Mode>,
    /// Inter-domain alignment target: joint, fusion, text or vision.
    #[arg(long, global = true, value_parser = parse_core::<MmdVariant>)]
    pub variant: Option<MmdVariant>,
    /// Contrastive loss: ours, regular, textcon or threscon.
    #[arg(long, global = true, value_parser = parse_core::<ContrastiveMode>)]
    pub contrastive: Option<ContrastiveMode>,
}

fn parse_core<T: std::str::FromStr<Err = rdcm_core::Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: rdcm_core::Error| e.to_string())
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Domain to hold out as the target.
    #[arg(long)]
    pub target: Option<String>,
    /// Manifest of a separate target dataset.
    #[arg(long)]
    pub target_data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset into --out.
    Synth,
    /// Train on every non-target domain and evaluate on the target.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Also report the proxy A-distance.
        #[arg(long)]
        adist: bool,
    },
    /// Leave-one-domain-out over every domain, seed and method.
    Loo {
        #[command(flatten)]
        data: DataArgs,
        /// Methods to compare: vanilla, dg, da.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        methods: Option<Vec<String>>,
        /// Run the full model and its w/o-inter, w/o-cross, w/o-both variants.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        adist: bool,
    },
    /// MMD between two domains.
    Mmd {
        #[command(flatten)]
        data: DataArgs,
        /// The two domain ids.
        #[arg(long, value_delimiter = ',', required = true)]
        pair: Vec<String>,
        /// Run directory with params.bin; features are encoded by that model.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Proxy A-distance between two domains, or two halves of one.
    Adist {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        domains: Vec<String>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Accuracy as a function of the contrastive threshold.
    SweepBeta {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        betas: Option<Vec<f64>>,
    },
}

impl Cli {
    fn config(&self, data: Option<&DataArgs>) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.global.config.as_deref())?;
        let d = data.map(|d| (d.data.clone(), d.target.clone(), d.target_data.clone()));
        let (data, target, target_data) = d.unwrap_or_default();
        cfg.apply(&Overrides {
            seeds: self.global.seeds.clone(),
            out: self.global.out.clone(),
            mode: self.global.mode,
            variant: self.global.variant,
            contrastive: self.global.contrastive,
            data,
            target,
            target_data,
        });
        Ok(cfg)
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(RunError::io(&cfg.out))?;
    cfg.write(&cfg.out.join("config.json"))
}

fn load_model(dir: Option<&Path>) -> Result<Option<rdcm_core::model::RdcmModel>> {
    dir.map(checkpoint::load).transpose()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth => {
            let mut cfg = cli.config(None)?;
            if let Some(seeds) = &cli.global.seeds {
                cfg.synth.seed = seeds[0];
            }
            let bundle = generate(&cfg.synth_config())?;
            let domains: Vec<_> = bundle.sources.iter().collect();
            let manifest = write_dataset(&cfg.out, &bundle.name, &bundle.layout, &domains)?;
            cfg.write(&cfg.out.join("config.json"))?;
            print!("{}", summarize(&read_manifest(&manifest)?));
            println!("wrote {}", manifest.display());
        }
        Command::Train { data, adist } => {
            let mut cfg = cli.config(Some(data))?;
            cfg.adist |= adist;
            cfg.validate()?;
            let bundle = experiment::prepare_bundle(&cfg)?;
            prepare_out(&cfg)?;
            for r in experiment::run_train(&cfg, &bundle)? {
                println!(
                    "{} target={} seed={} accuracy={:.4}",
                    r.experiment_id, r.target, r.seed, r.accuracy
                );
            }
        }
        Command::Loo {
            data,
            methods,
            ablation,
            adist,
        } => {
            let mut cfg = cli.config(Some(data))?;
            cfg.adist |= adist;
            if let Some(m) = methods {
                cfg.methods = m.clone();
            }
            if cfg.target.is_some() || cfg.target_data.is_some() {
                return Err(RunError::Config(
                    "loo holds out every domain in turn; drop --target".into(),
                ));
            }
            cfg.validate()?;
            let experiments = if *ablation {
                Experiment::ablation(cfg.mode()?)
            } else {
                cfg.methods
                    .iter()
                    .map(|m| Experiment::method(m))
                    .collect::<Result<Vec<_>>>()?
            };
            let bundle = experiment::prepare_bundle(&cfg)?;
            prepare_out(&cfg)?;
            let (_, table) = experiment::run_loo(&cfg, &bundle, &experiments)?;
            println!("method,{},Avg", table.targets.join(","));
            for r in &table.rows {
                let cells: Vec<String> = r.cells.iter().copied().map(experiment::format_cell).collect();
                println!("{},{},{}", r.method, cells.join(","), experiment::format_cell(r.avg));
            }
        }
        Command::Mmd { data, pair, params } => {
            if pair.len() != 2 {
                return Err(RunError::Config(format!(
                    "--pair takes two domain ids, got {}",
                    pair.len()
                )));
            }
            let cfg = cli.config(Some(data))?;
            cfg.validate()?;
            let variant: MmdVariant = cfg.variant.parse()?;
            let kernels = cfg.hyper(cfg.seeds[0])?.kernels;
            let cfg = RunConfig { target: None, ..cfg };
            let bundle = experiment::prepare_bundle(&cfg)?;
            let model = load_model(params.as_deref())?;
            let value = experiment::mmd_between(&bundle, &pair[0], &pair[1], variant, &kernels, model.as_ref())?;
            println!("{value}");
            if cli.global.out.is_some() {
                let path = cfg.out.join("mmd.csv");
                std::fs::create_dir_all(&cfg.out).map_err(RunError::io(&cfg.out))?;
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["variant", "a", "b", "encoded", "mmd"])?;
                w.write_record([
                    variant.as_str(),
                    &pair[0],
                    &pair[1],
                    if model.is_some() { "true" } else { "false" },
                    &value.to_string(),
                ])?;
                w.flush().map_err(RunError::io(&path))?;
            }
        }
        Command::Adist {
            data,
            domains,
            params,
            folds,
        } => {
            let mut cfg = cli.config(Some(data))?;
            if let Some(f) = folds {
                cfg.adist_folds = *f;
            }
            cfg.validate()?;
            let cfg = RunConfig { target: None, ..cfg };
            let bundle = experiment::prepare_bundle(&cfg)?;
            let model = load_model(params.as_deref())?;
            let seed = cfg.seeds[0];
            let value = experiment::adist_between(&bundle, domains, model.as_ref(), cfg.adist_folds, seed)?;
            println!("{value}");
            if cli.global.out.is_some() {
                let path = cfg.out.join("adist.csv");
                std::fs::create_dir_all(&cfg.out).map_err(RunError::io(&cfg.out))?;
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["domains", "seed", "encoded", "a_distance"])?;
                w.write_record([
                    domains.join("+"),
                    seed.to_string(),
                    model.is_some().to_string(),
                    value.to_string(),
                ])?;
                w.flush().map_err(RunError::io(&path))?;
            }
        }
        Command::SweepBeta { data, betas } => {
            let mut cfg = cli.config(Some(data))?;
            if let Some(b) = betas {
                cfg.betas = b.clone();
            }
            cfg.validate()?;
            let bundle = experiment::prepare_bundle(&cfg)?;
            prepare_out(&cfg)?;
            for r in experiment::run_sweep(&cfg, &bundle)? {
                println!(
                    "beta={} seed={} accuracy={:.4} mean_intra={:.6}",
                    r.beta, r.seed, r.accuracy, r.mean_intra
                );
            }
        }
    }
    Ok(())
}

/// Parses the process arguments, runs, and returns the exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
