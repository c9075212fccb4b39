use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use aqi_core::cohort::{self, AcademicLevel, CohortMeta, ResearchType, SyntheticSpec};
use aqi_core::features::{FeatureRanking, NormalizationCaps};
use aqi_core::model::{TrainedKind, TrainedModel};
use aqi_core::qp::OptimizerConfig;
use aqi_core::screening::{aggregate_rankings, apply_filter, FilterSpec};
use aqi_core::siamese::TrainConfig;
use aqi_service::pipeline::{artifact_bytes, score_records, train, TrainRequest};
use aqi_service::{AppState, Store};

#[derive(Parser)]
#[command(name = "aqi", version, about = "Academic Quality Index tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegressionArg {
    M1,
    M2,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Contrastive,
    Triplet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic two-class cohort.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        /// TOML or JSON file with synthetic cohort parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_pos: Option<usize>,
        #[arg(long)]
        n_neg: Option<usize>,
        #[arg(long)]
        dispersion: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        level: Option<AcademicLevel>,
    },
    /// Build a cohort document from a CSV of raw records with a `class` column.
    ImportCohort {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Normalization caps (TOML or JSON).
        #[arg(long)]
        caps: Option<PathBuf>,
        #[arg(long, default_value = "assist_prof")]
        level: AcademicLevel,
        #[arg(long, default_value = "")]
        field: String,
        #[arg(long, default_value = "applied")]
        research_type: ResearchTypeArg,
    },
    /// Fit regression weights by constrained quadratic optimization.
    TrainOpt {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_enum)]
        model: RegressionArg,
        #[arg(long)]
        gamma: Option<f64>,
        /// Common weight bounds as `lower,upper`.
        #[arg(long, value_parser = parse_bounds)]
        bounds: Option<[f64; 2]>,
        /// Feature ranks (JSON array or comma/space separated) for the M1 ordering.
        #[arg(long)]
        ranking_file: Option<PathBuf>,
        #[arg(long)]
        no_ordering: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optimizer settings (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the objective trace and residuals.
        #[arg(long)]
        run_log: Option<PathBuf>,
    },
    /// Train a monotone Siamese scorer.
    TrainSiamese {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training settings (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Triplet anchor as a JSON array of 21 normalized values.
        #[arg(long)]
        anchor_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_log: Option<PathBuf>,
    },
    /// Score candidate records and print the ranked report.
    Score {
        #[arg(long)]
        model: PathBuf,
        /// CSV of raw candidate records.
        #[arg(long)]
        candidates: PathBuf,
        /// Screen with the minimum requirements of this level.
        #[arg(long)]
        level: Option<AcademicLevel>,
        /// Screen with a custom filter spec (TOML or JSON).
        #[arg(long)]
        filter_spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check candidate records against minimum requirements.
    Filter {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        level: Option<AcademicLevel>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average several committee feature rankings.
    AggregateRanks {
        /// Ranking files (JSON array or comma/space separated ranks).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "aqi-store")]
        store: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ResearchTypeArg {
    Theoretical,
    Applied,
}

fn parse_bounds(s: &str) -> Result<[f64; 2], String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lower,upper`")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("lower bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("upper bound: {e}"))?;
    Ok([lo, hi])
}

/// Deserialize a TOML document, or JSON when the extension says so.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn read_ranks(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).with_context(|| format!("parsing {}", path.display()));
    }
    trimmed
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().with_context(|| format!("bad rank `{t}` in {}", path.display())))
        .collect()
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn write_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_output(out, &bytes)
}

fn load_cohort(path: &Path) -> Result<cohort::Cohort> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(cohort::Cohort::from_json(&text)?)
}

fn read_candidates(path: &Path) -> Result<Vec<aqi_core::features::RawAcademicRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(cohort::read_records_csv(file)?.into_iter().map(|(_, r)| r).collect())
}

fn run_train(cohort_path: &Path, request: TrainRequest, out: &Path, run_log: Option<&Path>) -> Result<()> {
    let cohort = load_cohort(cohort_path)?;
    let trained = train(&cohort, &request).map_err(|e| anyhow!("{e}"))?;
    fs::write(out, artifact_bytes(&trained.model)).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = run_log {
        write_json(Some(p), &trained.run)?;
    }
    let last = trained.run.trace.last().map(|t| t.value);
    log::info!("trained {:?}; final value {last:?}", request.kind);
    Ok(())
}

fn filter_spec(level: Option<AcademicLevel>, spec: Option<&Path>) -> Result<Option<FilterSpec>> {
    match (spec, level) {
        (Some(p), _) => {
            let spec: FilterSpec = read_config(p)?;
            spec.validate()?;
            Ok(Some(spec))
        }
        (None, Some(level)) => Ok(Some(FilterSpec::for_level(level))),
        (None, None) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            out,
            spec,
            n_pos,
            n_neg,
            dispersion,
            seed,
            level,
        } => {
            let mut s: SyntheticSpec = match spec {
                Some(p) => read_config(&p)?,
                None => SyntheticSpec::default(),
            };
            s.n_pos = n_pos.unwrap_or(s.n_pos);
            s.n_neg = n_neg.unwrap_or(s.n_neg);
            s.dispersion = dispersion.unwrap_or(s.dispersion);
            s.seed = seed.unwrap_or(s.seed);
            s.level = level.unwrap_or(s.level);
            let c = cohort::generate(&s)?;
            c.write_json(&out)?;
        }
        Command::ImportCohort {
            input,
            out,
            caps,
            level,
            field,
            research_type,
        } => {
            let caps = match caps {
                Some(p) => NormalizationCaps::from_path(&p)?,
                None => NormalizationCaps::default(),
            };
            let meta = CohortMeta {
                level,
                field_tag: field,
                research_type: match research_type {
                    ResearchTypeArg::Theoretical => ResearchType::Theoretical,
                    ResearchTypeArg::Applied => ResearchType::Applied,
                },
            };
            let c = cohort::import(&input, &caps, &meta)?;
            c.write_json(&out)?;
        }
        Command::TrainOpt {
            cohort,
            model,
            gamma,
            bounds,
            ranking_file,
            no_ordering,
            seed,
            config,
            out,
            run_log,
        } => {
            let kind = match model {
                RegressionArg::M1 => TrainedKind::M1,
                RegressionArg::M2 => TrainedKind::M2,
            };
            let mut request = TrainRequest::new(cohort.display().to_string(), kind);
            request.seed = seed;
            request.gamma = gamma;
            request.bounds = bounds;
            request.no_ordering = no_ordering;
            request.ranking = ranking_file.as_deref().map(read_ranks).transpose()?;
            request.optimizer = config.as_deref().map(read_config::<OptimizerConfig>).transpose()?;
            run_train(&cohort, request, &out, run_log.as_deref())?;
        }
        Command::TrainSiamese {
            cohort,
            loss,
            margin,
            epochs,
            seed,
            config,
            anchor_file,
            out,
            run_log,
        } => {
            let kind = match loss {
                LossArg::Contrastive => TrainedKind::SiameseContrastive,
                LossArg::Triplet => TrainedKind::SiameseTriplet,
            };
            let mut cfg: TrainConfig = match config {
                Some(p) => read_config(&p)?,
                None => TrainConfig::default(),
            };
            cfg.margin = margin.unwrap_or(cfg.margin);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            let mut request = TrainRequest::new(cohort.display().to_string(), kind);
            request.seed = seed;
            request.siamese = Some(cfg);
            request.anchor = anchor_file
                .as_deref()
                .map(|p| -> Result<Vec<f64>> { read_config_json(p) })
                .transpose()?;
            run_train(&cohort, request, &out, run_log.as_deref())?;
        }
        Command::Score {
            model,
            candidates,
            level,
            filter_spec: spec_path,
            format,
            out,
        } => {
            let text = fs::read_to_string(&model).with_context(|| format!("reading {}", model.display()))?;
            let m: TrainedModel = serde_json::from_str(&text).with_context(|| format!("parsing {}", model.display()))?;
            let records = read_candidates(&candidates)?;
            let spec = filter_spec(level, spec_path.as_deref())?;
            let report = score_records(&m, &records, spec.as_ref()).map_err(|e| match e {
                aqi_service::ServiceError::InvalidRecords(d) => anyhow!(
                    "invalid candidates: {}",
                    d.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; ")
                ),
                other => anyhow!("{other}"),
            })?;
            match format {
                Format::Json => write_json(out.as_deref(), &report)?,
                Format::Csv => {
                    let mut buf = Vec::new();
                    report.write_csv(&mut buf)?;
                    write_output(out.as_deref(), &buf)?;
                }
            }
        }
        Command::Filter {
            candidates,
            level,
            spec,
            out,
        } => {
            let Some(spec) = filter_spec(level, spec.as_deref())? else {
                bail!("either --level or --spec is required");
            };
            let records = read_candidates(&candidates)?;
            let outcomes: Vec<_> = records.iter().map(|r| apply_filter(r, &spec)).collect();
            write_json(out.as_deref(), &outcomes)?;
        }
        Command::AggregateRanks { inputs, out } => {
            let rankings = inputs
                .iter()
                .map(|p| {
                    let ranks = read_ranks(p)?;
                    FeatureRanking::new(ranks).with_context(|| format!("in {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let agg = aggregate_rankings(&rankings)?;
            write_json(out.as_deref(), &agg)?;
        }
        Command::Serve { port, host, store } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
            let store = Store::open(&store).map_err(|e| anyhow!("{e}"))?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(aqi_service::serve(addr, AppState::new(store)))?;
        }
    }
    Ok(())
}

fn read_config_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
