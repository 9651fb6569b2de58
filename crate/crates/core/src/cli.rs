//! Command-line front end: `fit`, `estimate`, `evaluate`, `synth` and
//! `acceptance`.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on I/O errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{self, SplitBundle};
use crate::combined::{EstimateReport, Method};
use crate::error::{Error, Result};
use crate::eval::{self, ErrorRecord, FamilyReport, ReportFormat};
use crate::fsutil;
use crate::ot::{CotConfig, DEFAULT_BATCH_SIZE, DEFAULT_MAX_SAMPLES};
use crate::pipeline::{EstimateConfig, Estimator};
use crate::synth::{self, SyntheticScenario};

pub const THREADS_ENV: &str = "COVSHIFT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "covshift",
    version,
    about = "Label-free accuracy estimation under covariate shift"
)]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the K-NN checker and ATC on a bundle and write them to disk.
    Fit {
        #[arg(long)]
        bundle: PathBuf,
        /// Output directory for the fitted state (defaults to the bundle).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: EstimateArgs,
    },
    /// Run one or more estimators on a bundle, one JSON report per line.
    Estimate {
        #[arg(long)]
        bundle: PathBuf,
        /// Sibling bundle for the GDE methods.
        #[arg(long)]
        bundle_b: Option<PathBuf>,
        #[arg(long = "method", required = true)]
        methods: Vec<Method>,
        /// Reuse state written by `fit` instead of refitting.
        #[arg(long)]
        fitted: Option<PathBuf>,
        /// Write the reports here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: EstimateArgs,
    },
    /// Sweep bundles and methods and write the evaluation CSVs.
    Evaluate {
        #[arg(long = "bundle", required = true)]
        bundles: Vec<PathBuf>,
        /// Sibling bundles for GDE methods, paired with `--bundle` by position.
        #[arg(long = "bundle-b")]
        bundles_b: Vec<PathBuf>,
        #[arg(long = "method", required = true)]
        methods: Vec<Method>,
        #[arg(long, default_value = "default")]
        family: String,
        /// Manifest key whose value groups records into curves.
        #[arg(long)]
        group_by: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[command(flatten)]
        opts: EstimateArgs,
    },
    /// Generate a synthetic bundle with known test labels.
    Synth {
        #[arg(
            long,
            conflicts_with = "scenario",
            required_unless_present = "scenario"
        )]
        preset: Option<String>,
        /// Scenario JSON file.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a second model's bundle on the same splits.
        #[arg(long)]
        sibling_out: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Acceptance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Csv,
    Markdown,
}

#[derive(Debug, Clone, Args)]
struct EstimateArgs {
    #[arg(long, default_value_t = crate::distance::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = crate::distance::DEFAULT_QUANTILE)]
    quantile: f64,
    /// Class-wise temperature scaling and ATC thresholds.
    #[arg(long)]
    classwise: bool,
    /// Scale embeddings to unit norm before the K-NN search.
    #[arg(long)]
    normalize: bool,
    /// Training rows kept for the K-NN reference.
    #[arg(long, default_value_t = crate::distance::DEFAULT_MAX_REF)]
    max_ref: usize,
    #[arg(long, default_value_t = crate::distance::DEFAULT_MIN_SAMPLES)]
    min_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the validation set as the K-NN reference, skipping each point itself.
    #[arg(long)]
    self_exclude: bool,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    cot_batch: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_SAMPLES)]
    cot_max: usize,
    #[arg(long, default_value_t = 0)]
    cot_seed: u64,
}

impl EstimateArgs {
    fn config(&self) -> EstimateConfig {
        EstimateConfig {
            k: self.k,
            quantile: self.quantile,
            classwise: self.classwise,
            normalize: self.normalize,
            max_ref: self.max_ref,
            min_samples: self.min_samples,
            seed: self.seed,
            self_exclude: self.self_exclude,
            cot: CotConfig {
                batch_size: self.cot_batch,
                max_samples: self.cot_max,
                seed: self.cot_seed,
            },
        }
    }
}

/// Resolved invocation, embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub subcommand: &'static str,
    pub bundles: Vec<String>,
    pub bundles_b: Vec<String>,
    pub methods: Vec<Method>,
    pub fitted: Option<String>,
    pub out: Option<String>,
    pub format: Option<&'static str>,
    pub threads: Option<usize>,
    pub estimate: EstimateConfig,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    #[serde(flatten)]
    report: &'a EstimateReport,
    run_config: &'a RunConfig,
    /// Seconds since the Unix epoch.
    generated_at: u64,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        2
    } else {
        1
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::invalid("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Fit { bundle, out, opts } => {
            let b = bundle::load_bundle(bundle)?;
            let est = Estimator::new(&b, opts.config());
            let dir = out.as_deref().unwrap_or(bundle);
            est.save(dir)?;
            eprintln!("fitted state written to {}", dir.display());
            Ok(0)
        }
        Command::Estimate {
            bundle,
            bundle_b,
            methods,
            fitted,
            out,
            opts,
        } => {
            if bundle_b.is_none() {
                if let Some(m) = methods.iter().find(|m| m.needs_sibling()) {
                    return Err(Error::invalid(format!("--method {m} requires --bundle-b")));
                }
            }
            let a = bundle::load_bundle(bundle)?;
            let b = bundle_b.as_ref().map(bundle::load_bundle).transpose()?;
            let est = match fitted {
                Some(dir) => Estimator::load(&a, dir)?,
                None => Estimator::new(&a, opts.config()),
            };
            let run_config = RunConfig {
                subcommand: "estimate",
                bundles: vec![path_str(bundle)],
                bundles_b: bundle_b.iter().map(|p| path_str(p)).collect(),
                methods: methods.clone(),
                fitted: fitted.as_deref().map(path_str),
                out: out.as_deref().map(path_str),
                format: None,
                threads: cli.threads,
                estimate: *est.config(),
            };
            let generated_at = now();
            let mut text = String::new();
            for &m in methods {
                let report = est.run(m, b.as_ref())?;
                let line = ReportLine {
                    report: &report,
                    run_config: &run_config,
                    generated_at,
                };
                text.push_str(&serde_json::to_string(&line).expect("report serializes"));
                text.push('\n');
            }
            match out {
                Some(path) => fsutil::write_atomic(path, text.as_bytes())?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        Command::Evaluate {
            bundles,
            bundles_b,
            methods,
            family,
            group_by,
            out,
            format,
            opts,
        } => evaluate(
            cli,
            bundles,
            bundles_b,
            methods,
            family,
            group_by.as_deref(),
            out,
            *format,
            opts,
        ),
        Command::Synth {
            preset,
            scenario,
            seed,
            out,
            sibling_out,
        } => {
            let mut s = match (preset, scenario) {
                (Some(name), _) => synth::preset(name, seed.unwrap_or(0)).ok_or_else(|| {
                    Error::invalid(format!(
                        "unknown preset {name:?}; expected one of {}",
                        synth::PRESETS.join(", ")
                    ))
                })?,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    serde_json::from_str::<SyntheticScenario>(&text).map_err(|e| {
                        Error::Manifest {
                            file: path_str(path),
                            reason: e.to_string(),
                        }
                    })?
                }
                (None, None) => unreachable!("clap requires one of --preset and --scenario"),
            };
            if let Some(seed) = seed {
                s.seed = *seed;
            }
            let b = synth::generate(&s)?;
            bundle::save_bundle(&b, out)?;
            let scenario_json = serde_json::to_string_pretty(&s).expect("scenario serializes");
            fsutil::write_atomic(&out.join("scenario.json"), scenario_json.as_bytes())?;
            if let Some(dir) = sibling_out {
                bundle::save_bundle(&synth::generate_sibling(&s, &b)?, dir)?;
            }
            eprintln!(
                "{} (seed {}): test accuracy {:.4}",
                s.name,
                s.seed,
                b.test_accuracy().expect("synthetic bundles carry labels")
            );
            Ok(0)
        }
        Command::Acceptance => {
            let results = crate::acceptance::run_all();
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!(
                "{} of {} criteria passed",
                results.len() - failed,
                results.len()
            );
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

fn group_label(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cli: &Cli,
    bundles: &[PathBuf],
    bundles_b: &[PathBuf],
    methods: &[Method],
    family: &str,
    group_by: Option<&str>,
    out: &Path,
    format: Format,
    opts: &EstimateArgs,
) -> Result<i32> {
    let needs_b = methods.iter().any(|m| m.needs_sibling());
    if needs_b && bundles_b.len() != bundles.len() {
        return Err(Error::invalid(format!(
            "GDE methods need one --bundle-b per --bundle ({} given for {})",
            bundles_b.len(),
            bundles.len()
        )));
    }
    let cfg = opts.config();
    let per_bundle: Vec<Result<(Vec<ErrorRecord>, Option<String>)>> = bundles
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let a = bundle::load_bundle(dir)?;
            let b = bundles_b.get(i).map(bundle::load_bundle).transpose()?;
            let truth = a
                .test_accuracy()
                .ok_or_else(|| Error::invalid(format!("{} has no test labels", dir.display())))?;
            let group = group_by
                .map(|key| -> Result<String> {
                    let manifest = bundle::load_manifest_value(dir)?;
                    manifest.get(key).map(group_label).ok_or_else(|| {
                        Error::invalid(format!("manifest of {} has no key {key:?}", dir.display()))
                    })
                })
                .transpose()?;
            let est = Estimator::new(&a, cfg);
            let records = methods
                .iter()
                .map(|&m| {
                    let r = est.run(m, b.as_ref())?;
                    Ok(record(&a, m, r.accuracy_estimate, truth))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((records, group))
        })
        .collect();

    let mut records = Vec::new();
    let mut groups: BTreeMap<(String, String), String> = BTreeMap::new();
    for item in per_bundle {
        let (recs, group) = item?;
        if let (Some(g), Some(r)) = (group, recs.first()) {
            groups.insert((r.model_id.clone(), r.dataset_id.clone()), g);
        }
        records.extend(recs);
    }
    let comparison = eval::single_method_comparison(&records)?;
    let key = |r: &ErrorRecord| {
        groups
            .get(&(r.model_id.clone(), r.dataset_id.clone()))
            .cloned()
    };
    let report_format = match format {
        Format::Csv => ReportFormat::Csv,
        Format::Markdown => ReportFormat::Markdown,
    };
    let files = eval::emit_report(
        &[FamilyReport {
            family,
            records: &records,
            comparison: &comparison,
        }],
        out,
        report_format,
        group_by.is_some().then_some(&key as eval::GroupKey<'_>),
    )?;
    let run_config = RunConfig {
        subcommand: "evaluate",
        bundles: bundles.iter().map(|p| path_str(p)).collect(),
        bundles_b: bundles_b.iter().map(|p| path_str(p)).collect(),
        methods: methods.to_vec(),
        fitted: None,
        out: Some(path_str(out)),
        format: Some(match format {
            Format::Csv => "csv",
            Format::Markdown => "markdown",
        }),
        threads: cli.threads,
        estimate: cfg,
    };
    let text = serde_json::to_string_pretty(&run_config).expect("config serializes");
    fsutil::write_atomic(&out.join("run_config.json"), text.as_bytes())?;
    for s in &comparison.summary {
        println!(
            "{:<12} MAE {:>6.2}%{}{}",
            s.method,
            s.mae * 100.0,
            if s.is_best { "  best" } else { "" },
            if s.best_equivalent && !s.is_best {
                "  (not significantly worse)"
            } else {
                ""
            }
        );
    }
    eprintln!(
        "reports written to {}",
        files.summary.parent().unwrap_or(out).display()
    );
    Ok(0)
}

fn record(b: &SplitBundle, m: Method, predicted: f64, truth: f64) -> ErrorRecord {
    let dataset = format!("{}@{}", b.manifest.name, b.manifest.seed);
    ErrorRecord::new(&b.manifest.model_id, &dataset, m.as_str(), predicted, truth)
}
