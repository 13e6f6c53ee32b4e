use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmrec_cli::artifacts::Layout;
use mmrec_cli::study::{self, Arm, CtrRequest, MakeSource};
use mmrec_cli::{report, CliError, ExperimentConfig, Result};
use mmrec_core::ctr::Variant;

#[derive(Parser)]
#[command(name = "mmrec", version, about = "Multimodal item representations for CTR prediction on synthetic data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set ctr.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Study directory.
    #[arg(long, default_value = "study", global = true)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the catalog, impression log, triplets and pipeline events.
    GenData,
    /// Pretrain item encoders, one per arm.
    Pretrain {
        #[arg(long, value_delimiter = ',', default_value = "untrained,inbatch,moco,full")]
        arms: Vec<String>,
    },
    /// Acc@N of encoder checkpoints on held-out triplets (all by default).
    EvalRetrieval {
        #[arg(long = "ckpt")]
        checkpoints: Vec<PathBuf>,
    },
    /// Pretrain the knowledge extractor on the training log.
    MakePretrain {
        /// Encoder checkpoint providing item representations.
        #[arg(long)]
        reps: Option<PathBuf>,
    },
    /// Train CTR variants for the configured number of epochs.
    TrainCtr {
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        reps: Option<PathBuf>,
        /// Frozen extractor checkpoint.
        #[arg(long, conflicts_with = "make_epochs")]
        make: Option<PathBuf>,
        /// Use the extractor snapshot after this many pretraining epochs;
        /// 0 trains it jointly instead.
        #[arg(long)]
        make_epochs: Option<usize>,
        #[arg(long, default_value = "")]
        tag: String,
        /// Record held-out metrics after every epoch.
        #[arg(long)]
        eval_each_epoch: bool,
    },
    /// Held-out metrics after each of several continued epochs.
    EpochSweep {
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        reps: Option<PathBuf>,
    },
    /// Aggregate run documents into tables and figure data.
    Report {
        /// Directory of run documents (default: `<out>/runs`).
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Where to write the report (default: `<out>/report`).
        #[arg(long)]
        dest: Option<PathBuf>,
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Serve the near-line pipeline over newline-delimited JSON on TCP.
    ServePipeline {
        #[arg(long)]
        reps: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
    },
    /// Replay an event log through the pipeline on virtual time.
    SimulatePipeline {
        #[arg(long)]
        reps: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Every step in order, then the report.
    Study,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}

fn full_encoder(layout: &Layout, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| layout.checkpoint(&Arm::Full.stem()))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let cfg = ExperimentConfig::load(c.config.as_deref(), &c.sets, c.seed)?;
    let layout = Layout::new(&c.out);
    match cli.cmd {
        Cmd::GenData => {
            layout.write_config(&cfg)?;
            let m = study::gen_data(&cfg, &layout)?;
            println!("{}", serde_json::to_string(&m).expect("manifest serializes"));
        }
        Cmd::Pretrain { arms } => {
            let arms: Vec<Arm> = arms.iter().map(|a| a.parse()).collect::<Result<_>>()?;
            let triplets = study::load_triplets(&layout, study::TRIPLETS_TRAIN)?;
            for arm in arms {
                study::pretrain_arm(&cfg, &layout, arm, &triplets)?;
            }
        }
        Cmd::EvalRetrieval { checkpoints } => {
            let triplets = study::load_triplets(&layout, study::TRIPLETS_EVAL)?;
            let ckpts = if checkpoints.is_empty() { study::encoder_checkpoints(&layout)? } else { checkpoints };
            for p in ckpts {
                let r = study::eval_retrieval(&cfg, &layout, &p, &triplets)?;
                println!("{}\tacc@1 {:.4}\tacc@5 {:.4}", r.checkpoint, r.acc1, r.acc5);
            }
        }
        Cmd::MakePretrain { reps } => {
            let data = study::load_data(&layout)?;
            let reps = full_encoder(&layout, reps);
            require(&reps)?;
            let doc = study::make_pretrain_step(&cfg, &layout, &data, &reps)?;
            for h in &doc.history {
                println!("epoch {}\tgauc {:?}\tloss {:.5}", h.epoch, h.gauc, h.train_loss);
            }
        }
        Cmd::TrainCtr {
            variants,
            reps,
            make,
            make_epochs,
            tag,
            eval_each_epoch,
        } => {
            let data = study::load_data(&layout)?;
            let variants = if variants.is_empty() { cfg.eval.variants.clone() } else { variants };
            let reps = full_encoder(&layout, reps);
            let needs_make = variants.iter().any(|v| v.uses_make());
            let make = match (make, make_epochs) {
                (Some(p), _) => Some(MakeSource::Frozen(p, None)),
                (None, Some(k)) => Some(study::make_source_for_epochs(&layout, k)),
                (None, None) if needs_make => {
                    Some(MakeSource::Frozen(layout.checkpoint("make"), Some(cfg.make.epochs)))
                }
                _ => None,
            };
            if let Some(MakeSource::Frozen(p, _)) = &make {
                require(p)?;
            }
            let docs = study::train_ctr_step(
                &cfg,
                &layout,
                &data,
                &CtrRequest {
                    variants: &variants,
                    reps: Some(&reps),
                    make,
                    tag: &tag,
                    eval_each_epoch,
                },
            )?;
            for d in docs {
                println!("{}\tgauc {:.5}\tauc {:.5}\tlogloss {:.5}", d.report.variant, d.report.gauc, d.report.auc, d.report.logloss);
            }
        }
        Cmd::EpochSweep { variants, epochs, reps } => {
            let data = study::load_data(&layout)?;
            let variants = if variants.is_empty() { cfg.eval.curve_variants.clone() } else { variants };
            let reps = full_encoder(&layout, reps);
            let epochs = epochs.unwrap_or(cfg.eval.curve_epochs);
            for c in study::epoch_sweep_step(&cfg, &layout, &data, &variants, Some(&reps), epochs)? {
                for p in c.points {
                    println!("{}\tepoch {}\tgauc {:.5}", c.variant, p.epoch, p.gauc);
                }
            }
        }
        Cmd::Report { runs, dest, allow_mixed } => {
            let runs = runs.unwrap_or_else(|| layout.runs_dir());
            let dest = dest.unwrap_or_else(|| layout.report_dir());
            let r = report::build(&runs, allow_mixed)?;
            report::write(&r, &dest)?;
            print!("{}", r.summary);
        }
        Cmd::ServePipeline { reps, addr } => {
            let reps = full_encoder(&layout, reps);
            let addr = addr.unwrap_or_else(|| cfg.pipeline.addr.clone());
            mmrec_cli::pipeline_cmd::serve_step(&cfg, &reps, &addr)?;
        }
        Cmd::SimulatePipeline { reps, events } => {
            let reps = full_encoder(&layout, reps);
            let events = events.unwrap_or_else(|| layout.data(study::EVENTS));
            let r = mmrec_cli::pipeline_cmd::simulate_step(&cfg, &layout, &reps, &events)?;
            println!("{}", serde_json::to_string(&r).expect("report serializes"));
        }
        Cmd::Study => {
            study::run_study(&cfg, &layout)?;
            let r = report::build(&layout.runs_dir(), false)?;
            report::write(&r, &layout.report_dir())?;
            print!("{}", r.summary);
        }
    }
    Ok(())
}
