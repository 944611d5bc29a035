//! Command-line front end. Errors print `error: <category>: <message>` on
//! stderr; exit codes are 2 for a missing prerequisite, 3 for a config
//! error, 4 for numeric divergence and 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genrep::dataio::RunConfig;
use genrep::experiments::{self, plot, EvalSplit, ExperimentPlan, Pipeline};
use genrep::{Error, Result};

#[derive(Parser)]
#[command(name = "genrep", version, about = "Generator-feature experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// key=value run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// procedural or neural.
    #[arg(long, global = true)]
    generator: Option<String>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Extra configuration overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Export the training pool and test splits (--out DIR).
    GenData,
    /// Distill the neural generator (--out FILE.grt).
    TrainGenerator,
    /// Train a projection decoder (--out DIR).
    TrainProj {
        #[arg(long)]
        n_annotated: Option<usize>,
    },
    /// Projection quality against annotated-set size (--out DIR).
    ProjCurve,
    /// Train a segmentation model on projected labels (--out FILE.grt).
    Distill {
        /// Decoder weights; trained from scratch when omitted.
        #[arg(long)]
        projection: Option<PathBuf>,
    },
    /// LayerMatch pretraining (--out FILE.grt).
    Pretrain,
    /// Fine-tune from a pretrained backbone (--out FILE.grt).
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, default_value = "1/64")]
        fraction: String,
    },
    /// Pseudo-labeling baseline (--out FILE.grt).
    PseudoLabel {
        #[arg(long, default_value = "1/64")]
        fraction: String,
    },
    /// Score a saved model, appending to a metrics CSV (--out FILE.csv).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "1")]
        fraction: String,
        #[arg(long)]
        method: Option<String>,
    },
    /// Label-fraction sweep over methods and seeds (--out DIR).
    Sweep,
    /// Feature cluster purity before and after pretraining (--out DIR).
    Purity,
    /// Render a CSV as SVG (--out FILE.svg).
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// curve or bars.
        #[arg(long)]
        kind: String,
    },
    /// Run a named pipeline: fig3a-curve, table1-distill, fig5-sweep, fig4-purity (--out DIR).
    Run { pipeline: String },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(g) = &c.generator {
        cfg.set("generator", g)?;
    }
    if let Some(s) = c.steps {
        cfg.steps = Some(s);
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_or(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| Path::new("genrep-out").join(default))
}

fn pipeline(name: &str, cfg: RunConfig, out: PathBuf) -> Result<()> {
    let files = experiments::run(&ExperimentPlan {
        pipeline: name.parse::<Pipeline>()?,
        config: cfg,
        out,
    })?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = config(c)?;
    match cli.command {
        Command::GenData => {
            let m = experiments::gen_data(&cfg, &out_or(c, "data"))?;
            println!("{} samples", m.entries.len());
        }
        Command::TrainGenerator => {
            let mse = experiments::train_generator(&cfg, &out_or(c, "generator.grt"))?;
            println!("held-out image mse {mse:.6}");
        }
        Command::TrainProj { n_annotated } => {
            if let Some(n) = n_annotated {
                cfg.n_annotated = n;
            }
            let row = experiments::train_proj(&cfg, &out_or(c, "projection"))?;
            println!("synthetic-test miou {:.4} pixel_acc {:.4}", row.metrics.mean_iou, row.metrics.pixel_accuracy);
        }
        Command::ProjCurve => pipeline("fig3a-curve", cfg, out_or(c, "proj-curve"))?,
        Command::Distill { projection } => {
            experiments::distill(&cfg, projection.as_deref(), &out_or(c, "distilled.grt"))?;
        }
        Command::Pretrain => {
            experiments::pretrain(&cfg, &out_or(c, "backbone.grt"))?;
        }
        Command::Finetune { backbone, fraction } => {
            experiments::finetune(&cfg, &backbone, &fraction, &out_or(c, "finetuned.grt"))?;
        }
        Command::PseudoLabel { fraction } => {
            let (_, retained) = experiments::pseudo_label(&cfg, &fraction, &out_or(c, "pseudo.grt"))?;
            println!("retained per round {retained:?}");
        }
        Command::Eval { model, split, fraction, method } => {
            if let Some(m) = method {
                cfg.method = m;
            }
            let split: EvalSplit = split.parse()?;
            let row = experiments::eval(&cfg, &model, split, &fraction, &out_or(c, "metrics.csv"))?;
            println!("miou {:.4} pixel_acc {:.4}", row.metrics.mean_iou, row.metrics.pixel_accuracy);
        }
        Command::Sweep => pipeline("fig5-sweep", cfg, out_or(c, "sweep"))?,
        Command::Purity => pipeline("fig4-purity", cfg, out_or(c, "purity"))?,
        Command::Plot { csv, kind } => plot::plot_csv(&csv, kind.parse()?, &out_or(c, "plot.svg"))?,
        Command::Run { pipeline: name } => {
            let out = out_or(c, &name);
            pipeline(&name, cfg, out)?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: config: {}", msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: "));
            return ExitCode::from(3);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = match &e {
                Error::Config(m) | Error::MissingPrerequisite(m) | Error::InvalidArgument(m) | Error::Format(m) => m.clone(),
                other => other.to_string(),
            };
            eprintln!("error: {}: {detail}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
