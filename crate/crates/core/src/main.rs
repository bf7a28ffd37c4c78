use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcppd::harness::commands::{self, ModelSelector};
use dcppd::harness::pipeline::CueSetting;
use dcppd::harness::ExperimentConfig;
use dcppd::Result;

#[derive(Parser)]
#[command(name = "dcppd", version, about = "Cue-prompted report generation on synthetic phantoms")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Stage-2 prompt-dropout rate (default: config `dropout`).
    #[arg(long)]
    dropout: Option<f64>,
    /// Training cue source: gt | probe | noisy[:rate] (default: config `train_cue_source`).
    #[arg(long)]
    train_cue_source: Option<String>,
    /// Cue-only generator: no image tokens in any stage.
    #[arg(long)]
    no_image: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets, pretrain the backbone and extract features.
    GenData,
    /// Train and evaluate linear probes for QS1, QS2 and QS3.
    TrainProbe,
    /// Pretrain the decoder on the report corpus.
    PretrainDecoder,
    /// Run stage 1 and stage 2 for one model variant.
    TrainVlm(ModelArgs),
    /// Generate reports for the eval set and score them.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        /// none | gt | probe | noisy[:rate] (default: config `test_cue_source`).
        #[arg(long)]
        cue_source: Option<String>,
    },
    /// Summarize attention reliance of a finished evaluation.
    Reliance {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        cue_source: Option<String>,
    },
    /// Train one model per dropout rate and evaluate each under every test cue setting.
    Ablate {
        /// Comma-separated rates (default: config `ablate_dropouts`).
        #[arg(long, value_delimiter = ',')]
        dropout: Option<Vec<f64>>,
        /// Comma-separated test cue settings (default: config `ablate_settings`).
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<String>>,
        /// Comma-separated training cue sources (default: config `train_cue_source`).
        #[arg(long, value_delimiter = ',')]
        train_cue_sources: Option<Vec<String>>,
        #[arg(long)]
        no_image: bool,
    },
    /// Join finished records into CSV tables.
    ReportTables,
    /// Print the default config as TOML.
    DefaultConfig,
}

fn selector(cfg: &ExperimentConfig, m: &ModelArgs) -> Result<ModelSelector> {
    let mut sel = ModelSelector::from_config(cfg)?;
    if let Some(p) = m.dropout {
        if !(0.0..=1.0).contains(&p) {
            return Err(dcppd::Error::Config(format!("dropout {p} outside [0, 1]")));
        }
        sel.dropout = p;
    }
    if let Some(s) = &m.train_cue_source {
        sel.train_cue = ExperimentConfig { train_cue_source: s.clone(), ..cfg.clone() }.train_cue_setting()?;
    }
    sel.no_image |= m.no_image;
    Ok(sel)
}

fn test_setting(cfg: &ExperimentConfig, s: &Option<String>) -> Result<CueSetting> {
    match s {
        Some(s) => CueSetting::parse(s, cfg.noisy_flip_rate),
        None => cfg.test_cue_setting(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = cli.runs_dir {
        cfg.output_dir = d;
    }
    let record = match &cli.command {
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
            return Ok(());
        }
        Command::GenData => commands::gen_data(&cfg)?,
        Command::TrainProbe => commands::train_probe(&cfg)?,
        Command::PretrainDecoder => commands::pretrain_decoder_cmd(&cfg)?,
        Command::TrainVlm(m) => commands::train_vlm(&cfg, &selector(&cfg, m)?)?,
        Command::Evaluate { model, cue_source } => commands::evaluate(&cfg, &selector(&cfg, model)?, test_setting(&cfg, cue_source)?)?,
        Command::Reliance { model, cue_source } => commands::reliance(&cfg, &selector(&cfg, model)?, test_setting(&cfg, cue_source)?)?,
        Command::Ablate { dropout, settings, train_cue_sources, no_image } => {
            let rates = dropout.clone().unwrap_or_else(|| cfg.ablate_dropouts.clone());
            let settings = match settings {
                Some(s) => s.iter().map(|x| CueSetting::parse(x, cfg.noisy_flip_rate)).collect::<Result<Vec<_>>>()?,
                None => cfg.ablate_cue_settings()?,
            };
            let train_cues = match train_cue_sources {
                Some(s) => s
                    .iter()
                    .map(|x| ExperimentConfig { train_cue_source: x.clone(), ..cfg.clone() }.train_cue_setting())
                    .collect::<Result<Vec<_>>>()?,
                None => vec![cfg.train_cue_setting()?],
            };
            commands::ablate(&cfg, &rates, &settings, &train_cues, *no_image || cfg.no_image)?
        }
        Command::ReportTables => commands::report_tables(&cfg)?,
    };
    let dir = cfg.run_dir().join(&record.command);
    let dir = match &record.variant {
        Some(v) => dir.join(v),
        None => dir,
    };
    println!("{}", dir.display());
    println!("{}", serde_json::to_string_pretty(&record.summary).unwrap_or_default());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
