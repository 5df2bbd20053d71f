//! Command-line driver: data generation, staged training, retrieval,
//! refinement, prediction, full runs, sweeps and ablations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;

use yieldcast::backbone::{load_gru, save_gru, save_lyra, Variant};
use yieldcast::data::{generate_synthetic, write_adjacency, write_dataset, write_truth, SyntheticConfig};
use yieldcast::error::{Error, Result, StageContext};
use yieldcast::pipeline::{
    ablate, checkpoint_paths, fit_global, fit_lyra, global_substitutes, load_data, obtain_models, prepare,
    refine_all, retrieval_stage, run_with_artifacts, sweep, DataSource, EvalReport, ExperimentConfig, Integration,
    Prepared, RetrievalMode, SweepAxis,
};
use yieldcast::refinement::{write_bias_csv, write_refined_csv};
use yieldcast::retrieval::write_retrieval_csv;

#[derive(Parser, Debug)]
#[command(name = "yieldcast", version, about = "County-level yield forecasting with retrieval-augmented yearly models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with adjacency and hidden truth.
    Synth(SynthArgs),
    /// Train the global regressor for each seed and save checkpoints.
    TrainGlobal(ExpArgs),
    /// Train the yearly model for each seed, reusing saved global checkpoints.
    TrainLyra(ExpArgs),
    /// Retrieve similar counties with saved checkpoints.
    Retrieve(ExpArgs),
    /// Build bias matrices and refined labels with saved checkpoints.
    Refine(ExpArgs),
    /// Predict and score the test year with saved checkpoints.
    Predict(ExpArgs),
    /// Train, retrieve, refine, integrate, predict and score.
    Run(ExpArgs),
    /// Repeat the experiment over values of one parameter.
    Sweep(SweepArgs),
    /// Run the ablation variants on shared data and seeds.
    Ablate(ExpArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::TrainGlobal(_) => "train-global",
            Command::TrainLyra(_) => "train-lyra",
            Command::Retrieve(_) => "retrieve",
            Command::Refine(_) => "refine",
            Command::Predict(_) => "predict",
            Command::Run(_) => "run",
            Command::Sweep(_) => "sweep",
            Command::Ablate(_) => "ablate",
        }
    }
}

/// Parses a kebab-case name into any serde enum of the library.
fn kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}


/// Experiment flags. Each one overrides the matching field of `--config`.
#[derive(Args, Debug, Clone, Default)]
struct ExpArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV (`county,year,day,f1..fd,yield`); replaces the synthetic source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Adjacency CSV (`county,neighbor`) for the dataset.
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long)]
    test_year: Option<i32>,
    #[arg(long)]
    lookback: Option<usize>,
    /// lyra | gru-att
    #[arg(long, value_parser = kebab::<Variant>)]
    variant: Option<Variant>,
    /// residual | neighboring | embedding
    #[arg(long, value_parser = kebab::<RetrievalMode>)]
    retrieval: Option<RetrievalMode>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// finetune | context | none
    #[arg(long, value_parser = kebab::<Integration>)]
    integration: Option<Integration>,
    #[arg(long)]
    refine: Option<bool>,
    /// Label perturbation in physical units.
    #[arg(long)]
    sigma: Option<f64>,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory; defaults to `<out>/ckpt` for staged commands.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p).stage("config")?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.data {
            cfg.data = DataSource::Csv {
                path: p.clone(),
                adjacency: self.adjacency.clone(),
            };
        } else if let (Some(a), DataSource::Csv { adjacency, .. }) = (&self.adjacency, &mut cfg.data) {
            *adjacency = Some(a.clone());
        }
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field)+ = v;
                }
            };
        }
        if self.test_year.is_some() {
            cfg.test_year = self.test_year;
        }
        set!(lookback => lookback);
        set!(variant => variant);
        set!(retrieval => retrieval);
        set!(threshold => retrieval_cfg.threshold);
        if self.top_k.is_some() {
            cfg.retrieval_cfg.top_k = self.top_k;
        }
        set!(integration => integration);
        set!(refine => refine);
        if self.sigma.is_some() {
            cfg.refine_cfg.sigma = self.sigma;
        }
        set!(seed => seeds);
        set!(epochs => train.epochs);
        set!(lr => train.lr);
        set!(batch_size => train.batch_size);
        set!(finetune_epochs => train.finetune_epochs);
        set!(finetune_lr => train.finetune_lr);
        if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
        if self.ckpt.is_some() {
            cfg.checkpoint_dir = self.ckpt.clone();
        }
        cfg.validate().stage("config")?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for `dataset.csv`, `adjacency.csv`, `truth.csv` and `synth.json`.
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic configuration, or an experiment configuration with a synthetic source.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    counties: Option<usize>,
    #[arg(long)]
    years: Option<usize>,
    /// Days per season.
    #[arg(long)]
    t: Option<usize>,
    /// Daily driver count.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Additive yield trend per year.
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    shock: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    first_year: Option<i32>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// lookback | threshold | topk
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values, e.g. `0.8,0.9,0.95`.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
}

fn synth_config(a: &SynthArgs) -> Result<SyntheticConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            match value.get("data") {
                Some(data) => match serde_json::from_value::<DataSource>(data.clone())? {
                    DataSource::Synthetic(s) => s,
                    DataSource::Csv { .. } => return Err(Error::contract("configuration has a CSV data source")),
                },
                None => serde_json::from_value(value)?,
            }
        }
        None => SyntheticConfig::default(),
    };
    let opts = [
        (a.counties, &mut cfg.n_counties),
        (a.years, &mut cfg.n_years),
        (a.t, &mut cfg.t),
        (a.d, &mut cfg.d),
        (a.clusters, &mut cfg.n_hidden_clusters),
    ];
    for (v, field) in opts {
        if let Some(v) = v {
            *field = v;
        }
    }
    let reals = [
        (a.slope, &mut cfg.year_bias_slope),
        (a.shock, &mut cfg.year_shock_std),
        (a.noise, &mut cfg.obs_noise_std),
    ];
    for (v, field) in reals {
        if let Some(v) = v {
            *field = v;
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(y) = a.first_year {
        cfg.first_year = y;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = synth_config(a)?;
    let data = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    write_dataset(&data.dataset, a.out.join("dataset.csv"))?;
    write_adjacency(&data.adjacency, a.out.join("adjacency.csv"))?;
    write_truth(&data.truth, a.out.join("truth.csv"))?;
    std::fs::write(a.out.join("synth.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "wrote {} records ({} counties, {} years) to {}",
        data.dataset.len(),
        data.dataset.counties().len(),
        data.dataset.years().len(),
        a.out.display()
    );
    Ok(())
}

fn require_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| Error::contract("this command needs --out"))
}

/// Checkpoint directory of a staged command.
fn staged_ckpt(cfg: &ExperimentConfig) -> Result<PathBuf> {
    match (&cfg.checkpoint_dir, &cfg.output_dir) {
        (Some(d), _) => Ok(d.clone()),
        (None, Some(o)) => Ok(o.join("ckpt")),
        (None, None) => Err(Error::contract("this command needs --ckpt or --out")),
    }
}

fn load_prepared(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = load_data(cfg).stage("load")?;
    prepare(&data, cfg.test_year).stage("split")
}

fn cmd_train_global(cfg: &ExperimentConfig) -> Result<()> {
    let out = require_out(cfg)?;
    let ckpt = staged_ckpt(cfg)?;
    std::fs::create_dir_all(&ckpt)?;
    let prep = load_prepared(cfg)?;
    for &seed in &cfg.seeds {
        let (global, mut report) = fit_global(&prep, cfg, seed)?;
        let (path, _) = checkpoint_paths(&ckpt, seed, cfg.variant);
        save_gru(&global, &path).stage("train-global")?;
        report.checkpoint = Some(path);
        report.write_csv(out.join(format!("global_seed{seed}_loss.csv")))?;
        report.write_summary(out.join(format!("global_seed{seed}.json")))?;
        println!("seed {seed}: global loss {:.5} in {:.1}s", report.final_loss().unwrap_or(f64::NAN), report.seconds);
    }
    Ok(())
}

fn cmd_train_lyra(cfg: &ExperimentConfig) -> Result<()> {
    let out = require_out(cfg)?;
    let ckpt = staged_ckpt(cfg)?;
    std::fs::create_dir_all(&ckpt)?;
    let prep = load_prepared(cfg)?;
    for &seed in &cfg.seeds {
        let (gpath, lpath) = checkpoint_paths(&ckpt, seed, cfg.variant);
        let global = if gpath.exists() {
            load_gru(&gpath).stage("load-checkpoint")?
        } else {
            info!("no global checkpoint for seed {seed}, training one");
            let (g, _) = fit_global(&prep, cfg, seed)?;
            save_gru(&g, &gpath).stage("train-global")?;
            g
        };
        let subs = global_substitutes(&prep, &global)?;
        let (lyra, mut report) = fit_lyra(&prep, cfg, seed, cfg.variant, &subs)?;
        save_lyra(&lyra, &lpath).stage("train-lyra")?;
        report.checkpoint = Some(lpath);
        report.write_csv(out.join(format!("lyra_seed{seed}_loss.csv")))?;
        report.write_summary(out.join(format!("lyra_seed{seed}.json")))?;
        println!("seed {seed}: yearly loss {:.5} in {:.1}s", report.final_loss().unwrap_or(f64::NAN), report.seconds);
    }
    Ok(())
}

/// Configuration of a staged command that reads saved checkpoints.
fn from_checkpoints(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        checkpoint_dir: Some(staged_ckpt(cfg)?),
        ..cfg.clone()
    })
}

fn cmd_retrieve(cfg: &ExperimentConfig, refine: bool) -> Result<()> {
    let out = require_out(cfg)?;
    let cfg = ExperimentConfig {
        refine,
        ..from_checkpoints(cfg)?
    };
    std::fs::create_dir_all(&out)?;
    let prep = load_prepared(&cfg)?;
    for &seed in &cfg.seeds {
        let models = obtain_models(&prep, &cfg, seed, cfg.variant)?;
        let stage = retrieval_stage(&prep, &models, &cfg)?;
        let results: Vec<_> = stage.results.values().cloned().collect();
        write_retrieval_csv(&results, out.join(format!("retrieval_seed{seed}.csv"))).stage("export")?;
        let matched: usize = results.iter().map(|r| r.matched.len()).sum();
        let empty = results.iter().filter(|r| r.is_empty()).count();
        if refine {
            let sets = refine_all(&prep, &models, &stage, &cfg, true)?;
            let sets: Vec<_> = sets.into_values().collect();
            write_bias_csv(&stage.biases, out.join(format!("bias_seed{seed}.csv"))).stage("export")?;
            write_refined_csv(&sets, out.join(format!("refined_seed{seed}.csv"))).stage("export")?;
            let n: usize = sets.iter().map(|s| s.entries.len()).sum();
            println!("seed {seed}: {matched} matches, {empty} counties without matches, {n} refined samples");
        } else {
            println!("seed {seed}: {matched} matches, {empty} counties without matches");
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let per_seed: Vec<String> = r.seeds.iter().map(|s| format!("{}:{:.3}", s.seed, s.rmse)).collect();
    let fallbacks: usize = r.seeds.iter().map(|s| s.fallback_counties().len()).sum();
    println!(
        "{:<20} rmse {:>9.4} ± {:<8.4} [{}] fallbacks {} ({:.1}s)",
        r.variant,
        r.rmse_mean,
        r.rmse_std,
        per_seed.join(" "),
        fallbacks,
        r.runtime_seconds
    );
}

fn cmd_run(cfg: &ExperimentConfig) -> Result<()> {
    let art = run_with_artifacts(cfg)?;
    for r in &art.reports {
        print_report(r);
    }
    if let Some(dir) = &cfg.output_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.exp.resolve()?;
    let points = sweep(&cfg, a.axis, &a.values)?;
    for p in &points {
        print!("{:?}={:<8} retrieved {:>6}  ", a.axis, p.value, p.retrieved);
        print_report(&p.report);
    }
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    for r in ablate(cfg)? {
        print_report(&r);
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainGlobal(a) => cmd_train_global(&a.resolve()?),
        Command::TrainLyra(a) => cmd_train_lyra(&a.resolve()?),
        Command::Retrieve(a) => cmd_retrieve(&a.resolve()?, false),
        Command::Refine(a) => cmd_retrieve(&a.resolve()?, true),
        Command::Predict(a) => cmd_run(&from_checkpoints(&a.resolve()?)?),
        Command::Run(a) => cmd_run(&a.resolve()?),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(&a.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                Error::Stage { .. } => e.to_string(),
                _ => format!("[{}] {e}", cli.command.name()),
            };
            eprintln!("yieldcast {}: {msg}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
