// SPDX-License-Identifier: Apache-2.0

//! `melody` command-line tool.

mod config;
mod serve;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use melody::entity::{read_dataset_file, write_dataset_file, Dataset};
use melody::hybrid::CombineMode;
use melody::metrics::Metrics;
use melody::pipeline::{extract_raw_features, write_features_csv, FeatureNormalizer};
use melody::stream::replay_entity;
use melody::synth::{generate, latency_bench, prepare, run_experiment, run_experiment_on, train_model, LatencyConfig};
use melody::{Confusion, FeatureSchema, HybridModel, LabelingScheme, Registry, Scalar, SessionRegistry, SynthConfig};
use serde::{Deserialize, Serialize};

use config::{read_toml, resolve_registry, EvalFile, TrainFile};

#[derive(Parser)]
#[command(name = "melody", version, about = "Entity-level online anomaly detection")]
struct Cli {
    /// Log filter, e.g. `info` or `melody=debug`.
    #[arg(long, global = true, env = "MELODY_LOG", default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scheme {
    Hard,
    Soft,
    Naive,
}

impl From<Scheme> for LabelingScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Hard => LabelingScheme::Hard,
            Scheme::Soft => LabelingScheme::Soft,
            Scheme::Naive => LabelingScheme::Naive,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Mean,
    Sequential,
}

impl From<Mode> for CombineMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Mean => CombineMode::Mean,
            Mode::Sequential => CombineMode::Sequential,
        }
    }
}

#[derive(Args)]
struct ModelArg {
    /// Model artifact.
    #[arg(long, env = "MELODY_MODEL")]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        labeled: Option<usize>,
        #[arg(long)]
        unlabeled: Option<usize>,
        /// Length of the per-series history.
        #[arg(long)]
        t_history: Option<usize>,
        /// Also write generator truth (injection kinds, label flips) as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train a hybrid model on a JSONL dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Featurizer registry TOML.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, value_enum)]
        scheme: Option<Scheme>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Compare all variants over repeated 60/20/20 splits.
    Eval {
        /// Dataset to evaluate on; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// TOML experiment settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum)]
        scheme: Option<Scheme>,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score every entity of a JSONL dataset.
    Score {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        data: PathBuf,
        /// Output JSONL; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit one report per stream step instead of one line per entity.
        #[arg(long)]
        replay: bool,
        #[arg(long, value_enum, default_value = "hard")]
        scheme: Scheme,
    },
    /// Serve sessions over NDJSON on stdio, or over HTTP with `--http`.
    Serve {
        #[command(flatten)]
        model: ModelArg,
        /// Listen address for the HTTP API.
        #[arg(long)]
        http: Option<SocketAddr>,
    },
    /// Measure per-step session latency at several stream offsets.
    Bench {
        #[arg(long, default_value_t = 2880)]
        t_history: usize,
        #[arg(long, default_value_t = 100)]
        window: usize,
        #[arg(long, default_value_t = 128)]
        embed: usize,
        #[arg(long, value_delimiter = ',', default_value = "100,10000")]
        offsets: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export normalized feature rows as CSV.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use this model's registry and normalizer instead of fitting one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "hard")]
        scheme: Scheme,
    },
    /// Print a model summary.
    Info {
        #[command(flatten)]
        model: ModelArg,
    },
    /// Print the built-in featurizer registry, or validate a registry file.
    Registry {
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed downstream pipe (`| head`) is a normal way to stop reading
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = c
            .downcast_ref::<std::io::Error>()
            .map(std::io::Error::kind)
            .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind))
            .or_else(|| match c.downcast_ref::<melody::MelodyError>() {
                Some(melody::MelodyError::Io(io)) => Some(io.kind()),
                Some(melody::MelodyError::Json(j)) => j.io_error_kind(),
                _ => None,
            });
        kind == Some(std::io::ErrorKind::BrokenPipe)
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            config,
            seed,
            labeled,
            unlabeled,
            t_history,
            truth,
        } => {
            let mut cfg: SynthConfig = read_toml(config.as_deref())?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.n_labeled = labeled.unwrap_or(cfg.n_labeled);
            cfg.n_unlabeled = unlabeled.unwrap_or(cfg.n_unlabeled);
            cfg.t_history = t_history.unwrap_or(cfg.t_history);
            let output = generate(&cfg)?;
            write_dataset_file(&output.dataset, &out)?;
            if let Some(p) = truth {
                serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), &output.truth)?;
            }
            let anomalies = output.truth.iter().filter(|t| t.injection.is_some()).count();
            eprintln!(
                "wrote {} entities ({anomalies} injected) to {}",
                output.dataset.entities.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            config,
            registry,
            scheme,
            mode,
            seed,
            precision,
        } => {
            let mut cfg: TrainFile = read_toml(config.as_deref())?;
            let reg = resolve_registry(registry.as_deref(), cfg.registry.as_deref(), config.as_deref())?;
            if let Some(s) = scheme {
                cfg.scheme = s.into();
            }
            if let Some(m) = mode {
                cfg.hybrid.mode = m.into();
            }
            cfg.seed = seed.unwrap_or(cfg.seed);
            match precision {
                Precision::F64 => train::<f64>(&data, &out, &cfg, &reg)?,
                Precision::F32 => train::<f32>(&data, &out, &cfg, &reg)?,
            }
        }
        Command::Eval {
            data,
            config,
            registry,
            runs,
            scheme,
            json,
        } => {
            let mut cfg: EvalFile = read_toml(config.as_deref())?;
            let reg = resolve_registry(registry.as_deref(), cfg.registry.as_deref(), config.as_deref())?;
            let exp = &mut cfg.experiment;
            exp.runs = runs.unwrap_or(exp.runs);
            if let Some(s) = scheme {
                exp.scheme = s.into();
            }
            let report = match data {
                Some(path) => {
                    let labeled = read_dataset_file(&path)?.partition(exp.scheme)?;
                    run_experiment_on(&prepare::<f64>(&labeled, &reg)?, exp)?
                }
                None => run_experiment::<f64>(exp, &reg)?,
            };
            print!("{}", report.table());
            if let Some(p) = json {
                serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), &report)?;
            }
        }
        Command::Score {
            model,
            data,
            out,
            replay,
            scheme,
        } => {
            let dataset = read_dataset_file(&data)?;
            let sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(BufWriter::new(std::io::stdout().lock())),
            };
            match peek_precision(&model.model)? {
                Precision::F64 => score::<f64>(&model.model, &dataset, sink, replay, scheme.into())?,
                Precision::F32 => score::<f32>(&model.model, &dataset, sink, replay, scheme.into())?,
            }
        }
        Command::Serve { model, http } => match peek_precision(&model.model)? {
            Precision::F64 => serve_with::<f64>(&model.model, http)?,
            Precision::F32 => serve_with::<f32>(&model.model, http)?,
        },
        Command::Bench {
            t_history,
            window,
            embed,
            offsets,
            samples,
            precision,
            json,
        } => {
            let cfg = LatencyConfig {
                t_history,
                window,
                embed,
                offsets,
                samples,
                ..LatencyConfig::default()
            };
            let report = match precision {
                Precision::F64 => latency_bench::<f64>(&cfg)?,
                Precision::F32 => latency_bench::<f32>(&cfg)?,
            };
            println!("T = {}, {} featurizer lanes, {} samples per offset", report.t_history, report.lanes, samples);
            println!("{:>10} {:>12} {:>12}", "offset", "median_us", "p90_us");
            for p in &report.points {
                println!("{:>10} {:>12.1} {:>12.1}", p.offset, p.median_us, p.p90_us);
            }
            if let Some(p) = json {
                serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), &report)?;
            }
        }
        Command::Featurize {
            data,
            out,
            model,
            registry,
            scheme,
        } => {
            let dataset = read_dataset_file(&data)?;
            featurize(&dataset, &out, model.as_deref(), registry.as_deref(), scheme.into())?;
        }
        Command::Info { model } => match peek_precision(&model.model)? {
            Precision::F64 => print!("{}", HybridModel::<f64>::load(&model.model)?.summary()),
            Precision::F32 => print!("{}", HybridModel::<f32>::load(&model.model)?.summary()),
        },
        Command::Registry { check } => match check {
            Some(p) => {
                let reg = Registry::from_file(&p)?;
                let schema = FeatureSchema::from_registry(&reg);
                println!("{} instances, d = {}, schema {}", reg.len(), schema.dim(), schema.hash_hex());
            }
            None => print!("{}", Registry::default().to_toml_string()?),
        },
    }
    Ok(())
}

#[derive(Deserialize)]
struct Peek {
    scalar: String,
}

fn peek_precision(path: &Path) -> Result<Precision> {
    let file = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    let peek: Peek = serde_json::from_reader(BufReader::new(file)).with_context(|| format!("reading model {}", path.display()))?;
    match peek.scalar.as_str() {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => bail!("model stores unsupported scalar type {other:?}"),
    }
}

fn load<F: Scalar>(path: &Path) -> Result<Arc<HybridModel<F>>> {
    let model = HybridModel::<F>::load(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(Arc::new(model))
}

fn train<F: Scalar>(data: &Path, out: &Path, cfg: &TrainFile, reg: &Registry) -> Result<()> {
    let labeled = read_dataset_file(data)?.partition(cfg.scheme)?;
    let prepared = prepare::<F>(&labeled, reg)?;
    let model = train_model(&prepared, &cfg.hybrid, cfg.seed)?;
    model.save(out)?;
    eprint!("{}", model.summary());
    eprintln!("saved {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EntityScore<'a> {
    id: &'a str,
    score: f64,
    anomalous: bool,
    stage: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<bool>,
}

fn score<F: Scalar>(path: &Path, dataset: &Dataset, mut sink: Box<dyn Write>, replay: bool, scheme: LabelingScheme) -> Result<()> {
    let model = load::<F>(path)?;
    let mut confusion = Confusion::default();
    let mut labeled = 0usize;
    for e in &dataset.entities {
        if replay {
            for report in replay_entity(model.clone(), e)? {
                serde_json::to_writer(&mut sink, &report)?;
                sink.write_all(b"\n")?;
            }
            continue;
        }
        let d = model.decide(&model.featurize(e)?)?;
        let label = e.binary_label(scheme)?;
        if let Some(y) = label {
            confusion.record(d.anomalous, y);
            labeled += 1;
        }
        let row = EntityScore {
            id: &e.id,
            score: d.score.as_f64(),
            anomalous: d.anomalous,
            stage: d.stage,
            label,
        };
        serde_json::to_writer(&mut sink, &row)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    if labeled > 0 {
        let m = Metrics::from(confusion);
        eprintln!(
            "{labeled} labeled: precision {:.4} recall {:.4} f1 {:.4} fpr {:.4}",
            m.precision, m.recall, m.f1, m.fpr
        );
    }
    Ok(())
}

fn serve_with<F: Scalar>(path: &Path, http: Option<SocketAddr>) -> Result<()> {
    let registry = SessionRegistry::new(load::<F>(path)?);
    match http {
        Some(addr) => serve::http(registry, addr),
        None => serve::stdio(&registry),
    }
}

fn featurize(dataset: &Dataset, out: &Path, model: Option<&Path>, registry: Option<&Path>, scheme: LabelingScheme) -> Result<()> {
    let (reg, norm) = match model {
        Some(p) => {
            let m = load::<f64>(p)?;
            (m.registry.clone(), Some(m.normalizer.clone()))
        }
        None => (resolve_registry(registry, None, None)?, None),
    };
    reg.check_catalog(&dataset.catalog)?;
    let schema = FeatureSchema::from_registry(&reg);
    let raws = dataset
        .entities
        .iter()
        .map(|e| extract_raw_features::<f64>(e, &reg, &dataset.catalog))
        .collect::<melody::Result<Vec<_>>>()?;
    let norm = match norm {
        Some(n) => n,
        None => FeatureNormalizer::fit(&raws, &schema)?,
    };
    let rows = raws
        .iter()
        .map(|r| melody::pipeline::assemble(r, &norm, &schema))
        .collect::<melody::Result<Vec<_>>>()?;
    let labels = dataset
        .entities
        .iter()
        .map(|e| e.binary_label(scheme))
        .collect::<melody::Result<Vec<_>>>()?;
    let mut w = BufWriter::new(File::create(out)?);
    write_features_csv(
        &mut w,
        &schema,
        dataset
            .entities
            .iter()
            .zip(&labels)
            .zip(&rows)
            .map(|((e, y), z)| (e.id.as_str(), *y, z)),
    )?;
    w.flush()?;
    eprintln!("wrote {} rows x {} features to {}", rows.len(), schema.dim(), out.display());
    Ok(())
}
