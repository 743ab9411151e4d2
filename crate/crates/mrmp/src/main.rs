use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrmp::checkpoint::load_checkpoint;
use mrmp::config::{parse_threshold_grid, RunConfig};
use mrmp::error::{CliError, Result};
use mrmp::formats::graph::{read_graph, write_graph};
use mrmp::formats::sequence::{read_vocabulary, serialize_sequence};
use mrmp::formats::sparse::write_sparse;
use mrmp::pipeline::{self, write_file};
use mrmp::synthetic;
use mrmp_core::data::{split, InputType};

#[derive(Parser)]
#[command(name = "mrmp", version, about = "Multi-label classification with pulling and pushing label relations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Significance level of the label dependence test.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long = "lambda-rel", global = true)]
    lambda_rel: Option<f64>,
    /// Train without the relation module and relational loss.
    #[arg(long = "no-mrmp", global = true)]
    no_mrmp: bool,
    /// Comma-separated decision thresholds, or `default`.
    #[arg(long = "threshold-grid", global = true)]
    threshold_grid: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "mrmp-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Extract pulling and pushing label graphs from a training split.
    BuildGraph {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Train a model; writes the log, graph and best checkpoint.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Edge-list graph; built from the training split when absent.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test metrics with thresholds tuned on the validation split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Write label probabilities for every instance.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-label AUC differences between a full and an ablated model,
    /// grouped by node degree.
    AblationReport {
        #[arg(long = "with")]
        with: PathBuf,
        #[arg(long = "without")]
        without: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Graph defining the degree groups; the full model's graph by default.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        groups: usize,
    },
    /// Seeded random split into train/valid/test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        proportions: String,
    },
    /// Instance, label and feature counts and label cardinality.
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Forward-pass timing over a grid of sequence lengths and label counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "50,200")]
        l: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write a synthetic corpus (`planted` or `copy`) as sparse splits.
    Generate {
        #[arg(long, default_value = "planted")]
        kind: String,
        #[arg(long, value_delimiter = ',', default_value = "500,100,200")]
        sizes: Vec<usize>,
    },
}

fn effective_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &g.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(a) = g.alpha {
        cfg.alpha = a;
    }
    if let Some(l) = g.lambda_rel {
        cfg.lambda_rel = l;
    }
    if g.no_mrmp {
        cfg.mrmp = false;
    }
    if let Some(t) = &g.threshold_grid {
        cfg.threshold_grid = parse_threshold_grid(t)?;
    }
    Ok(cfg)
}

fn pick(flag: Option<PathBuf>, cfg_value: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg_value.clone()).ok_or_else(|| CliError::Config(format!("missing --{key} (or `{key}` in the config)")))
}

fn print_and_write(out: &Path, name: &str, text: &str) -> Result<()> {
    print!("{text}");
    write_file(&out.join(name), text)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = effective_config(&cli.global)?;
    let out = cli.global.out.clone();
    match cli.command {
        Command::BuildGraph { train } => {
            let path = pick(train, &cfg.train, "train")?;
            let ds = pipeline::load_dataset(&cfg, &path)?;
            let g = pipeline::build_graph(&ds, &cfg.graph_options()?)?;
            pipeline::echo_config(&cfg, &out)?;
            write_graph(&g, &out.join("graph.txt"))?;
            print_and_write(&out, "graph_summary.csv", &pipeline::graph_summary(&g))?;
        }
        Command::Train { train, valid, graph, epochs } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.train = Some(pick(train, &cfg.train, "train")?);
            cfg.valid = valid.or(cfg.valid.clone());
            cfg.graph = graph.or(cfg.graph.clone());
            let tr = pipeline::load_dataset(&cfg, cfg.train.as_deref().expect("set above"))?;
            let va = cfg.valid.as_deref().map(|p| pipeline::load_dataset(&cfg, p)).transpose()?;
            let g = cfg.graph.as_deref().map(read_graph).transpose()?;
            let outcome = pipeline::train(&cfg, &tr, va.as_ref(), g, Some(&out))?;
            println!(
                "best_epoch={} {}={} epochs_run={} checkpoint={}",
                outcome.best_epoch,
                cfg.selection_metric.name(),
                outcome.best_value,
                outcome.epochs_run,
                out.join(pipeline::CHECKPOINT_DIR).display()
            );
        }
        Command::Evaluate { checkpoint, test, valid } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            cfg.input_type = ckpt.input_type;
            let test = pipeline::load_dataset(&cfg, &pick(test, &cfg.test, "test")?)?;
            let valid = valid.or(cfg.valid.clone()).map(|p| pipeline::load_dataset(&cfg, &p)).transpose()?;
            let report = pipeline::evaluate((&ckpt).into(), valid.as_ref(), &test, &cfg.threshold_grid)?;
            pipeline::echo_config(&cfg, &out)?;
            print_and_write(&out, "metrics.csv", &pipeline::metrics_csv(&report))?;
        }
        Command::Predict { checkpoint, input } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            cfg.input_type = ckpt.input_type;
            let ds = pipeline::load_dataset(&cfg, &input)?;
            let scores = pipeline::scores(&ckpt.params, &ckpt.graph, &ds)?;
            pipeline::echo_config(&cfg, &out)?;
            write_file(&out.join("predictions.csv"), &pipeline::predictions_csv(&scores))?;
            println!("predictions={}", out.join("predictions.csv").display());
        }
        Command::AblationReport { with, without, test, graph, groups } => {
            let full = load_checkpoint(&with)?;
            let ablated = load_checkpoint(&without)?;
            if full.input_type != ablated.input_type {
                return Err(CliError::Config("checkpoints were trained on different input types".into()));
            }
            cfg.input_type = full.input_type;
            let test = pipeline::load_dataset(&cfg, &pick(test, &cfg.test, "test")?)?;
            let g = match graph {
                Some(p) => read_graph(&p)?,
                None => full.graph.clone(),
            };
            let report = pipeline::ablation_report((&full).into(), (&ablated).into(), &test, &g, groups)?;
            pipeline::echo_config(&cfg, &out)?;
            write_file(&out.join("ablation_labels.csv"), &report.labels_csv())?;
            print_and_write(&out, "ablation_groups.csv", &report.groups_csv())?;
        }
        Command::Split { input, proportions } => {
            let props: Vec<f64> = proportions
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CliError::Config(format!("bad proportions {proportions:?}")))?;
            let ds = pipeline::load_dataset(&cfg, &input)?;
            let parts = split(&ds, &props, cfg.seed)?;
            let names = ["train", "valid", "test"];
            let vocab = match cfg.input_type {
                InputType::Sequential => Some(read_vocabulary(cfg.require(&cfg.vocab, "vocab")?)?),
                InputType::BinaryVector => None,
            };
            for (k, part) in parts.iter().enumerate() {
                let name = names.get(k).map_or_else(|| format!("part{k}.txt"), |n| format!("{n}.txt"));
                let path = out.join(&name);
                match &vocab {
                    Some(v) => write_file(&path, &serialize_sequence(part, v))?,
                    None => {
                        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
                        write_sparse(part, &path)?
                    }
                }
                println!("{name}={}", part.len());
            }
            pipeline::echo_config(&cfg, &out)?;
        }
        Command::Stats { input } => {
            let ds = pipeline::load_dataset(&cfg, &input)?;
            print!("{}", pipeline::stats_csv(&ds));
        }
        Command::Bench { n, l, d, reps } => {
            let rows = pipeline::bench(&n, &l, d, reps, cfg.seed)?;
            print_and_write(&out, "bench.csv", &pipeline::bench_csv(&rows))?;
        }
        Command::Generate { kind, sizes } => {
            let total: usize = sizes.iter().sum();
            let ds = match kind.as_str() {
                "planted" => synthetic::planted(total, cfg.seed),
                "copy" => synthetic::token_copy(total, 10, 30, 6, cfg.seed),
                other => return Err(CliError::Config(format!("unknown corpus {other:?}"))),
            };
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            let mut start = 0;
            for (k, &n) in sizes.iter().enumerate() {
                let idx: Vec<usize> = (start..start + n).collect();
                start += n;
                let name = ["train", "valid", "test"].get(k).map_or_else(|| format!("part{k}.txt"), |s| format!("{s}.txt"));
                write_sparse(&ds.subset(&idx), &out.join(&name))?;
                println!("{name}={n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).machine_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
