//! Command line driver: every pipeline stage is a subcommand reading one
//! experiment config, with flags shadowing config values. Errors print a
//! single machine-parsable line and map to stable exit codes (2 bad config,
//! 3 missing prerequisite, 4 divergence, 1 otherwise).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cocomix_core::persist::{LabelMode, LabelSource, SignRule};
use cocomix_core::pipeline::{
    rerun_from_manifest, ExperimentConfig, Pipeline, StageReport, SteerArgs,
};
use cocomix_core::train::Method;
use cocomix_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cocomix",
    version,
    about = "Concept-conditioned language model pretraining pipeline",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunSelector {
    /// Training method of the run.
    #[arg(long)]
    method: String,
    /// Run seed; defaults to the method's derived seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic planted-topic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train the teacher on the training split.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Dump the teacher's concept-stream hidden states.
    DumpActs {
        #[command(flatten)]
        common: Common,
    },
    /// Train the sparse autoencoder on dumped activations.
    TrainSae {
        #[command(flatten)]
        common: Common,
    },
    /// Precompute per-position concept labels.
    MakeLabels {
        #[command(flatten)]
        common: Common,
        /// Label source: attribution or activation.
        #[arg(long, default_value = "attribution")]
        source: String,
        /// Score sign handling: signed or absolute.
        #[arg(long, default_value = "signed")]
        rule: String,
    },
    /// Pretrain one arm from scratch or resume a stopped run.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunSelector,
        /// Stop after this many optimizer steps (checkpoint and exit).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Continue a stopped run from its checkpoint.
        #[arg(long)]
        resume: bool,
        /// Concept loss weight override.
        #[arg(long)]
        lambda: Option<f64>,
        /// Distillation weight override.
        #[arg(long)]
        lambda_kd: Option<f64>,
        /// Peak learning rate override.
        #[arg(long)]
        lr_max: Option<f64>,
        /// Total optimizer steps override.
        #[arg(long)]
        steps: Option<usize>,
        /// Tokens per batch override.
        #[arg(long)]
        batch_tokens: Option<usize>,
    },
    /// Score a trained run on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunSelector,
    },
    /// Sweep steering multipliers; report topic frequency and perplexity.
    Steer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunSelector,
        /// Planted topic whose token block gets counted.
        #[arg(long, default_value_t = 0)]
        topic: usize,
        /// Concept to amplify; topic association picks one when omitted.
        #[arg(long)]
        concept: Option<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 5.0, 10.0])]
        multipliers: Vec<f64>,
        /// Tokens to sample per generation.
        #[arg(long, default_value_t = 256)]
        n_tokens: usize,
        /// Generation seeds; the report takes medians across them.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
        gen_seeds: Vec<u64>,
        /// Scale after the TopK mask instead of before it.
        #[arg(long)]
        after_topk: bool,
        /// Where to steer: student or teacher.
        #[arg(long, default_value = "student")]
        target: String,
    },
    /// Column norms of a run's concept compression matrix.
    AnalyzeCompression {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunSelector,
        /// Collapse threshold on column l2 norms.
        #[arg(long, default_value_t = 1e-2)]
        tau: f64,
    },
    /// Compare two runs' tokens-to-target sample efficiency.
    Compare {
        #[command(flatten)]
        common: Common,
        /// First run directory name, e.g. cocomix-s7.
        #[arg(long)]
        run_a: String,
        /// Second run directory name, e.g. ntp-s7.
        #[arg(long)]
        run_b: String,
        /// Held-out perplexity both runs race toward.
        #[arg(long)]
        target_ppl: f64,
    },
    /// Re-run a stage from its manifest.
    Rerun {
        /// Stage manifest written by a previous run.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },
}

fn pipeline(common: &Common) -> Result<Pipeline> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(dir) = &common.out_dir {
        config.out_dir = dir.clone();
    }
    Pipeline::new(config)
}

fn parse_method(name: &str) -> Result<Method> {
    name.parse()
}

fn parse_label_mode(source: &str, rule: &str) -> Result<LabelMode> {
    let source = match source {
        "attribution" => LabelSource::Attribution,
        "activation" => LabelSource::Activation,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown label source {other}; use attribution or activation"
            )))
        }
    };
    let rule = match rule {
        "signed" => SignRule::Signed,
        "absolute" => SignRule::Absolute,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown sign rule {other}; use signed or absolute"
            )))
        }
    };
    Ok(LabelMode { source, rule })
}

fn print_report(report: &StageReport) {
    for note in &report.notes {
        println!("{}: {note}", report.stage);
    }
    for path in &report.outputs {
        println!("wrote {}", path.display());
    }
    println!("manifest {}", report.manifest.display());
}

fn run(cli: Cli) -> Result<()> {
    let report = match cli.command {
        Command::GenCorpus { common } => pipeline(&common)?.gen_corpus()?,
        Command::TrainTeacher { common } => pipeline(&common)?.train_teacher()?,
        Command::DumpActs { common } => pipeline(&common)?.dump_acts()?,
        Command::TrainSae { common } => pipeline(&common)?.train_sae()?,
        Command::MakeLabels { common, source, rule } => {
            pipeline(&common)?.make_labels(parse_label_mode(&source, &rule)?)?
        }
        Command::Pretrain {
            common,
            run,
            stop_after,
            resume,
            lambda,
            lambda_kd,
            lr_max,
            steps,
            batch_tokens,
        } => {
            let mut config = ExperimentConfig::load(&common.config)?;
            if let Some(dir) = &common.out_dir {
                config.out_dir = dir.clone();
            }
            if let Some(v) = lambda {
                config.train.lambda = v;
            }
            if let Some(v) = lambda_kd {
                config.train.lambda_kd = v;
            }
            if let Some(v) = lr_max {
                config.train.lr_max = v;
            }
            if let Some(v) = steps {
                config.train.steps = v;
            }
            if let Some(v) = batch_tokens {
                config.train.batch_tokens = v;
            }
            let method = parse_method(&run.method)?;
            Pipeline::new(config)?.pretrain(method, run.seed, stop_after, resume)?
        }
        Command::Eval { common, run } => {
            let method = parse_method(&run.method)?;
            let (eval, report) = pipeline(&common)?.eval_run(method, run.seed)?;
            println!(
                "{} seed {}: holdout perplexity {:.4} over {} tokens",
                eval.method, eval.seed, eval.report.val_ppl, eval.report.tokens_scored
            );
            report
        }
        Command::Steer {
            common,
            run,
            topic,
            concept,
            multipliers,
            n_tokens,
            gen_seeds,
            after_topk,
            target,
        } => {
            let teacher_side = match target.as_str() {
                "student" => false,
                "teacher" => true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown steering target {other}; use student or teacher"
                    )))
                }
            };
            let method = parse_method(&run.method)?;
            let args = SteerArgs {
                topic,
                concept,
                multipliers,
                n_tokens,
                gen_seeds,
                after_topk,
                teacher_side,
            };
            pipeline(&common)?.steer_run(method, run.seed, &args)?
        }
        Command::AnalyzeCompression { common, run, tau } => {
            let method = parse_method(&run.method)?;
            let (norms, report) = pipeline(&common)?.analyze_compression(method, run.seed, tau)?;
            println!(
                "{} of {} compression columns below {tau} ({:.2}%)",
                norms.norms.iter().filter(|&&n| n < tau).count(),
                norms.norms.len(),
                norms.fraction_below * 100.0
            );
            report
        }
        Command::Compare { common, run_a, run_b, target_ppl } => {
            let (cmp, report) = pipeline(&common)?.compare(&run_a, &run_b, target_ppl)?;
            match (cmp.tokens_a, cmp.tokens_b, cmp.ratio) {
                (Some(a), Some(b), Some(r)) => println!(
                    "{run_a} reached perplexity {target_ppl} in {a:.0} tokens, {run_b} in {b:.0}; ratio {r:.4}"
                ),
                (a, b, _) => println!(
                    "{run_a}: {}, {run_b}: {}",
                    a.map_or("target not reached".into(), |t| format!("{t:.0} tokens")),
                    b.map_or("target not reached".into(), |t| format!("{t:.0} tokens")),
                ),
            }
            report
        }
        Command::Rerun { manifest } => rerun_from_manifest(&manifest)?,
    };
    print_report(&report);
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(e.exit_code());
    }
}
