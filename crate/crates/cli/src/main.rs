use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use smar_core::annotate::{plan_anchors, plan_band, plan_top_p, AnnotationPlan};
use smar_core::datagen::{generate_dataset, ingest_jsonl, LabelOracle, SynthConfig};
use smar_core::dataset::validate_dataset;
use smar_core::harness::{bar_chart_svg, run_experiment, ExperimentConfig, ExperimentKind};
use smar_core::kv::KvConfig;
use smar_core::metrics::{evaluate, JudgedRun, MetricKind, MetricsReport};
use smar_core::model::{train, ModelConfig};
use smar_core::{Error, LossConfig, Reranker, Result};

#[derive(Parser)]
#[command(name = "smar", version, about = "Whole-page reranking under an annotation budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    TopP,
    Band,
    Anchors,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Plot,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a dataset against the schema.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Build an annotation plan using the dataset's labels as the oracle.
    Annotate {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        /// Anchor rounds; omit for unbounded.
        #[arg(long)]
        t_rounds: Option<usize>,
    },
    /// Train a reranker on a dataset and annotation plan.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset with a trained model and write metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "mrr,map,ndcg")]
        metrics: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Score threshold for F1's returned set.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run one experiment and write its report directory.
    Experiment {
        kind: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-emit an experiment report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
        /// Output file; defaults to stdout for csv and `<in>/plot.svg` for plot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure kinds that map to distinct exit codes.
enum Failure {
    Invalid(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse { .. } | Error::Schema { .. } | Error::Argument(_) => {
                Failure::Invalid(e.to_string())
            }
            Error::Stage { ref source, .. } if matches!(**source, Error::Config { .. }) => {
                Failure::Invalid(e.to_string())
            }
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_kv(path: &Path) -> std::result::Result<KvConfig, Failure> {
    Ok(KvConfig::load(path)?)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Generate { config, out } => {
            let kv = load_kv(&config)?;
            let synth = SynthConfig::from_kv(&kv)?;
            kv.finish()?;
            let (data, _) = generate_dataset(&synth)?;
            let mut w = create(&out)?;
            data.write_jsonl(&mut w)?;
            w.flush()?;
        }
        Command::Validate { data } => {
            let dataset = ingest_jsonl(&data)?;
            let violations = validate_dataset(&dataset);
            if !violations.is_empty() {
                let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                return Err(Failure::Invalid(lines.join("\n")));
            }
            println!(
                "ok: {} queries, {} candidates",
                dataset.queries.len(),
                dataset.n_candidates()
            );
        }
        Command::Annotate { strategy, data, out, p, lo, hi, t_rounds } => {
            let dataset = ingest_jsonl(&data)?;
            let oracle = LabelOracle::from_dataset(&dataset);
            let missing = |flag: &str| Failure::Invalid(format!("--{flag} is required for this strategy"));
            let plan: AnnotationPlan = match strategy {
                Strategy::TopP => plan_top_p(&dataset, p.ok_or_else(|| missing("p"))?, &oracle)?,
                Strategy::Band => plan_band(
                    &dataset,
                    lo.ok_or_else(|| missing("lo"))?,
                    hi.ok_or_else(|| missing("hi"))?,
                    &oracle,
                )?,
                Strategy::Anchors => plan_anchors(&dataset, t_rounds, &oracle)?.0,
            };
            let mut w = create(&out)?;
            plan.write_jsonl(&mut w)?;
            w.flush()?;
        }
        Command::Train { data, plan, config, out } => {
            let dataset = ingest_jsonl(&data)?;
            let plan = AnnotationPlan::read_jsonl(BufReader::new(File::open(&plan)?))?;
            let kv = load_kv(&config)?;
            let model_cfg = ModelConfig::for_dataset(&dataset, 8).apply_kv(&kv, &dataset)?;
            let loss_cfg = LossConfig::from_kv(&kv)?;
            kv.finish()?;
            let (model, log) = train::<f64>(&dataset, &plan, &model_cfg, &loss_cfg)?;
            model.save_path(&out)?;
            eprintln!("loss {:.6} -> {:.6}", log.initial_loss, log.final_loss);
        }
        Command::Eval { data, model, metrics, k, out, threshold } => {
            let dataset = ingest_jsonl(&data)?;
            let model = Reranker::load_path(&model)?;
            let kinds = metrics
                .split(',')
                .map(|m| m.parse::<MetricKind>())
                .collect::<Result<Vec<_>>>()?;
            let lists = dataset
                .queries
                .iter()
                .map(|q| model.score_page(q))
                .collect::<Result<Vec<_>>>()?;
            let mut run = JudgedRun::from_dataset(&dataset, lists)?;
            run.decision_threshold = threshold;
            let mut report = MetricsReport::default();
            for kind in kinds {
                let cutoff = kind.uses_k().then_some(k);
                report.push("eval", kind, cutoff, evaluate(&run, kind, cutoff)?);
            }
            let mut w = create(&out)?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Experiment { kind, config, out_dir } => {
            let kind: ExperimentKind = kind.parse()?;
            let kv = match config {
                Some(path) => load_kv(&path)?,
                None => KvConfig::default(),
            };
            let cfg = ExperimentConfig::from_kv(kind, &kv)?;
            let report = run_experiment(&cfg)?;
            report.write(&out_dir)?;
        }
        Command::Report { input, format, out } => {
            let report = MetricsReport::read_csv(BufReader::new(File::open(input.join("report.csv"))?))?;
            let means = MetricsReport {
                rows: report.rows.iter().filter(|r| r.run_id.ends_with("/mean")).cloned().collect(),
            };
            match format {
                ReportFormat::Csv => match out {
                    Some(path) => {
                        let mut w = create(&path)?;
                        means.write_csv(&mut w)?;
                        w.flush()?;
                    }
                    None => means.write_csv(std::io::stdout().lock())?,
                },
                ReportFormat::Plot => {
                    let title = input.file_name().and_then(|n| n.to_str()).unwrap_or("report");
                    let path = out.unwrap_or_else(|| input.join("plot.svg"));
                    std::fs::write(path, bar_chart_svg(&report, title))?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors are invalid input, not runtime failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
