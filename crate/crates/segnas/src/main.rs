use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segnas::artifacts::{load_or_build, ModelCheckpoint};
use segnas::config::RunConfig;
use segnas::describe::{describe, enumeration_text, parse_genome_lines};
use segnas::driver::run_search;
use segnas::log::RunLog;
use segnas::report;
use segnas_core::genome::Genome;
use segnas_core::graph::{AuxHead, GraphIR};
use segnas_core::search::full_train;
use segnas_core::tasks::{EncoderStub, TaskArtifacts};
use segnas_core::train::evaluate_images;

#[derive(Parser)]
#[command(name = "segnas", version, about = "Decoder architecture search for dense prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) an architecture search, logging to a JSONL file.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        /// rl or random
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        archs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Continue the run recorded in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one genome end to end and save the stripped model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Genome text or a file whose first genome line is used.
        #[arg(long)]
        genome: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model on a data split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// holdout, meta_val or meta_train
        #[arg(long, default_value = "holdout")]
        split: String,
    },
    /// Validate genomes and list them with named operations.
    Decode {
        /// Genome text or a genome file.
        genome: String,
    },
    /// Write the decoder graph of a genome in Graphviz DOT format.
    ExportDot {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        genome: String,
        /// none, classifier or cell
        #[arg(long, default_value = "none")]
        aux: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every distinct connectivity structure and their count.
    Enumerate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise completed search logs as CSV, markdown and SVG plots.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string())),
        None => Ok(RunConfig::default()),
    }
}

fn read_genomes(arg: &str) -> Result<Vec<Genome>, Failure> {
    let text = if arg.trim_start().starts_with('[') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| Failure::Usage(format!("{arg}: {e}")))?
    };
    let genomes = parse_genome_lines(&text).map_err(|(line, e)| Failure::Usage(format!("{arg}:{line}: {e}")))?;
    if genomes.is_empty() {
        return Err(Failure::Usage(format!("{arg}: no genome found")));
    }
    Ok(genomes)
}

fn artifacts(cfg: &RunConfig) -> Result<TaskArtifacts, Failure> {
    eprintln!("preparing task artifacts in {}", cfg.run.artifacts_dir.display());
    load_or_build(&cfg.run.artifacts_dir, cfg).map_err(runtime)
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Search {
            config,
            mode,
            archs,
            seed,
            workers,
            resume,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.search.mode = m;
            }
            if let Some(n) = archs {
                cfg.search.total_architectures = n;
            }
            if let Some(s) = seed {
                cfg.search.seed = s;
            }
            if let Some(w) = workers {
                cfg.run.workers = w;
            }
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let art = artifacts(&cfg)?;
            let outcome = run_search(&cfg, &art, &out, resume, &mut |b| {
                let mean = b.records.iter().map(|r| r.final_reward).sum::<f64>() / b.records.len().max(1) as f64;
                eprintln!("{}/{} architectures, batch mean reward {mean:.4}", b.done, b.total);
            })
            .map_err(runtime)?;
            println!("{} architectures logged to {}", outcome.records.len(), out.display());
            for (g, r) in outcome.top_k {
                println!("{r:.4} {g}");
            }
        }
        Command::Train {
            config,
            genome,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.full_train.seed = s;
            }
            let ft = cfg.full_train_config().map_err(|e| Failure::Config(e.to_string()))?;
            ft.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let genome = read_genomes(&genome)?.remove(0);
            let art = artifacts(&cfg)?;
            let rep = full_train(&genome, &art, &ft).map_err(runtime)?;
            for s in &rep.stages {
                let last = s.losses.last().copied().unwrap_or(f64::NAN);
                println!(
                    "stage {} epochs {} decoder lr {:.2e} encoder lr {:.2e} aux {:.2} final loss {last:.4}",
                    s.stage, s.epochs, s.decoder_lr, s.encoder_lr, s.aux_coeff
                );
            }
            println!(
                "holdout mIoU {:.4} fwIoU {:.4} mPA {:.4} reward {:.4} (without aux heads {:.4})",
                rep.holdout.miou, rep.holdout.fwiou, rep.holdout.mpa, rep.holdout_reward, rep.stripped_reward
            );
            if let Some(dir) = out {
                ModelCheckpoint {
                    genome,
                    adapt_channels: ft.adapt_channels,
                    num_classes: art.num_classes(),
                    image_size: cfg.task.image_size,
                    decoder: rep.network,
                    encoder: rep.encoder,
                }
                .save(&dir)
                .map_err(runtime)?;
                println!("saved {}", dir.display());
            }
        }
        Command::Eval {
            config,
            checkpoint,
            split,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut model = ModelCheckpoint::load(&checkpoint).map_err(runtime)?;
            if model.image_size != cfg.task.image_size || model.num_classes != cfg.task.num_classes {
                return Err(Failure::Config(format!(
                    "checkpoint was trained on {}px images with {} classes, the config describes {}px and {}",
                    model.image_size, model.num_classes, cfg.task.image_size, cfg.task.num_classes
                )));
            }
            let art = artifacts(&cfg)?;
            let set = match split.as_str() {
                "holdout" => &art.splits.holdout,
                "meta_val" => &art.splits.meta_val,
                "meta_train" => &art.splits.meta_train,
                other => return Err(Failure::Usage(format!("unknown split `{other}`"))),
            };
            let cm = evaluate_images(&mut model.decoder, &mut model.encoder, set, cfg.search.eval_batch).map_err(runtime)?;
            let sc = cm.scores().map_err(runtime)?;
            println!(
                "{split}: mIoU {:.4} fwIoU {:.4} mPA {:.4} reward {:.4}",
                sc.miou,
                sc.fwiou,
                sc.mpa,
                cm.reward().map_err(runtime)?
            );
        }
        Command::Decode { genome } => {
            for g in read_genomes(&genome)? {
                let canon = g.canonicalize();
                print!("{}", describe(&g));
                if canon != g {
                    println!("canonical {canon}");
                }
                println!();
            }
        }
        Command::ExportDot {
            config,
            genome,
            aux,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let arm = AuxHead::parse(&aux).ok_or_else(|| Failure::Usage(format!("unknown aux head `{aux}`")))?;
            let genome = read_genomes(&genome)?.remove(0);
            let sources = EncoderStub::new(cfg.stub.seed).descs(cfg.task.image_size);
            let ir = GraphIR::build(&genome, sources, cfg.search.adapt_channels, cfg.task.num_classes, arm);
            let cost = ir.estimate();
            eprintln!("{} parameters, {} multiply-adds", cost.params, cost.madds);
            write_out(out.as_deref(), &ir.to_dot())?;
        }
        Command::Enumerate { out } => write_out(out.as_deref(), &enumeration_text())?,
        Command::Report { logs, out } => {
            let logs = logs
                .iter()
                .map(|p| RunLog::read(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(runtime)?;
            let rep = report::build(&logs).map_err(runtime)?;
            let files = rep.write(&out).map_err(runtime)?;
            print!("{}", rep.summary_markdown());
            for f in files {
                eprintln!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
