//! `maw` command-line interface.

mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maw::eval::{gen_synthetic, load_csv, make_splits, reports_to_csv, run_experiment, sweep, DataFamily, MetricReport, SweepParam};
use maw::model::{score_points, train, MawModel, Variant};
use maw::theory::verification_report;
use serde_json::json;

use config::{Overrides, RunConfig, SweepConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "maw", version, about = "Robust novelty detection with mixture autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides MAW_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Latent dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Inlier weight of the latent mixture.
    #[arg(long)]
    eta: Option<f64>,
    /// CSV data instead of the synthetic family.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let env = std::env::var("MAW_SEED").ok();
        let o = Overrides {
            seed: self.seed,
            epochs: self.epochs,
            variant: self.variant,
            d: self.d,
            eta: self.eta,
            data: self.data.clone(),
            output_dir: self.output_dir.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), env.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic contaminated dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        rank: usize,
        /// Inliers.
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Outlier ratio.
        #[arg(long, default_value_t = 0.2)]
        c: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes checkpoint.json and losses.csv.
    Train(Common),
    /// Score the rows of a CSV with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the scoring draws; defaults to the model seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Draws per point; defaults to the model's.
        #[arg(long)]
        t: Option<usize>,
    },
    /// Train and evaluate every variant, contamination ratio and seed.
    Eval(Common),
    /// Repeat the evaluation over a grid of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: Option<SweepParam>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Check the barycenter closed forms against numerical oracles.
    Theory {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("MAW_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| CliError::config("MAW_SEED", format!("`{s}` is not a seed"))),
        Err(_) => Ok(None),
    }
}

fn header(config: &str, seed: u64) -> String {
    format!("# maw config={config} seed={seed}\n")
}

/// Writes all files at once, after every computation has succeeded.
fn write_outputs(files: &[(PathBuf, String)]) -> Result<(), CliError> {
    for (path, content) in files {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, content)?;
    }
    Ok(())
}

fn report_files(cfg: &RunConfig, reports: &[MetricReport]) -> Result<Vec<(PathBuf, String)>, CliError> {
    let config = serde_json::to_value(cfg).expect("config serializes");
    let report = json!({ "config": config, "seed": cfg.seed(), "reports": reports });
    Ok(vec![
        (cfg.output_dir.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes")),
        (cfg.output_dir.join("report.csv"), header(&cfg.to_json(), cfg.seed()) + &reports_to_csv(reports)?),
    ])
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { dim, rank, n, c, noise, seed, out } => {
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let ds = gen_synthetic(dim, rank, n, c, noise, seed).map_err(|e| match e {
                maw::Error::Domain(m) => CliError::config("", m),
                other => other.into(),
            })?;
            let config = json!({ "dim": dim, "rank": rank, "n": n, "c": c, "noise": noise });
            let mut text = header(&config.to_string(), seed);
            let cols: Vec<String> = (1..=dim).map(|j| format!("f{j}")).collect();
            text += &format!("{},label\n", cols.join(","));
            for r in 0..ds.len() {
                let row: Vec<String> = ds.features.row(r).iter().map(|v| v.to_string()).collect();
                text += &format!("{},{}\n", row.join(","), ds.labels[r]);
            }
            write_outputs(&[(out, text)])
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let seed = cfg.seed();
            let train_set = match cfg.family()? {
                DataFamily::Pool(ds) => ds,
                family => make_splits(&family, cfg.split.n_train, cfg.split.c[0], cfg.split.n_test, &cfg.split.c_test, seed)?.train,
            }
            .canonical();
            let (model, trace) = train(&train_set.features, &cfg.model, seed)?;
            let meta = json!({ "config": serde_json::to_value(&cfg).expect("config serializes"), "seed": seed });
            let mut losses = header(&cfg.to_json(), seed) + "epoch,vae,critic,gen\n";
            for e in &trace.epochs {
                losses += &format!("{},{},{},{}\n", e.epoch, e.vae, e.critic, e.gen);
            }
            write_outputs(&[
                (cfg.output_dir.join("checkpoint.json"), model.to_json_with_meta(meta)?),
                (cfg.output_dir.join("losses.csv"), losses),
            ])
        }
        Command::Score { model, data, out, seed, t } => {
            let m = MawModel::load(&model).map_err(|e| CliError::data_at(&model, e))?;
            let ds = load_csv(&data).map_err(|e| CliError::data_at(&data, e))?;
            let seed = seed.or(env_seed()?).unwrap_or(m.seed);
            let t = t.unwrap_or(m.hp.t);
            let scores = score_points(&m, &ds.features, t, seed).map_err(|e| match e {
                maw::Error::Domain(msg) => CliError::config("t", msg),
                other => CliError::data(other),
            })?;
            let config = json!({ "model": model, "data": data, "t": t });
            let mut text = header(&config.to_string(), seed) + "index,score,label\n";
            for (i, (s, l)) in scores.iter().zip(&ds.labels).enumerate() {
                text += &format!("{i},{s},{l}\n");
            }
            write_outputs(&[(out, text)])
        }
        Command::Eval(common) => {
            let cfg = common.resolve()?;
            let reports = run_experiment(&cfg.spec()?)?;
            write_outputs(&report_files(&cfg, &reports)?)
        }
        Command::Sweep { common, param, values } => {
            let mut cfg = common.resolve()?;
            let file = cfg.sweep.clone();
            let param = param.or(file.as_ref().map(|s| s.param)).ok_or_else(|| CliError::config("sweep.param", "no sweep parameter given"))?;
            let values = values.or(file.map(|s| s.values)).unwrap_or_default();
            if values.is_empty() {
                return Err(CliError::config("sweep.values", "no sweep values given"));
            }
            cfg.sweep = Some(SweepConfig { param, values: values.clone() });
            let reports = sweep(&cfg.spec()?, param, &values).map_err(|e| match e {
                maw::Error::Config { msg, .. } | maw::Error::Domain(msg) => CliError::config("sweep.values", msg),
                other => other.into(),
            })?;
            write_outputs(&report_files(&cfg, &reports)?)
        }
        Command::Theory { seed, out } => {
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let report = verification_report(seed)?;
            write_outputs(&[(out, serde_json::to_string_pretty(&report).expect("report serializes"))])?;
            if report.pass {
                Ok(())
            } else {
                let failed: Vec<&str> = report.propositions.iter().filter(|p| !p.pass).map(|p| p.name.as_str()).collect();
                Err(CliError { kind: error::Kind::Numerical, path: None, message: format!("checks failed: {}", failed.join(", ")) })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.code() as u8)
        }
    }
}

