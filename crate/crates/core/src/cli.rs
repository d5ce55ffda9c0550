//! The `cmrm` command: train, sweep, verify and inject-noise.
//!
//! Exit codes: 0 success, 1 failed check or runtime failure, 2 input or I/O
//! error, 64 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{NoisyDataset, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{self, MarginHistogram, MetricReport};
use crate::model::ModelParams;
use crate::noise::{self, NoiseKind, NoiseSpec};
use crate::trainer::{self, EpochRecord};
use crate::verify::{self, Distribution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const EPOCHS_FILE: &str = "epochs.csv";
pub const MODEL_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.json";
pub const MARGINS_FILE: &str = "margins.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Config { .. }
        | Error::Parse { .. }
        | Error::Format(_) => EXIT_INPUT,
        _ => EXIT_FAILED,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cmrm",
    version,
    about = "Conformal margin risk minimization under label noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write the epoch log, model and metric report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Grid search over lambda, alpha and seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run one verifier; exits 1 when its acceptance threshold is missed.
    Verify {
        which: Verifier,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corrupt the label column of a CSV and write a mask sidecar.
    InjectNoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        kind: NoiseArg,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "label")]
        label_column: String,
        /// Integer group column used by group-conditional noise.
        #[arg(long)]
        group_column: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verifier {
    Quantile,
    Dkw,
    Gradcheck,
    Bruteforce,
    Density,
    Tempgap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Symmetric,
    Circular,
    GroupConditional,
    BinaryFlip,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Train { config, out, seed } => {
            cmd_train(&config, out.as_deref(), seed).map(|_| true)
        }
        Command::Sweep {
            config,
            out,
            seed,
            workers,
        } => cmd_sweep(&config, out.as_deref(), seed, workers).map(|_| true),
        Command::Verify { which, out, seed } => cmd_verify(which, seed, out.as_deref()).map(|o| {
            println!("{}", o.json);
            o.passed
        }),
        Command::InjectNoise {
            input,
            output,
            kind,
            rate,
            seed,
            label_column,
            group_column,
        } => cmd_inject_noise(
            &input,
            &output,
            kind,
            rate,
            seed,
            &label_column,
            group_column.as_deref(),
        )
        .map(|n| {
            println!("{n} labels flipped");
            true
        }),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Everything produced by one training run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dataset: NoisyDataset,
    pub params: ModelParams,
    pub records: Vec<EpochRecord>,
    pub val: MetricReport,
    pub test: MetricReport,
    pub histogram: Option<MarginHistogram>,
}

/// The report written as `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport<'a> {
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    pub num_classes: usize,
    pub train_size: usize,
    pub val: &'a MetricReport,
    pub test: &'a MetricReport,
}

/// Builds the data, trains and evaluates one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let dataset = cfg.build_dataset()?;
    let train_cfg = cfg.train_config(&dataset)?;
    let init = cfg.init_model(&dataset)?;
    let (params, records) = trainer::train(init, &dataset, &train_cfg)?;
    let val = trainer::evaluate(
        &params,
        &dataset,
        SplitTag::Val,
        false,
        cfg.eval.coverage_target,
    )?;
    let test = trainer::evaluate(
        &params,
        &dataset,
        SplitTag::Test,
        cfg.eval.with_conformal,
        cfg.eval.coverage_target,
    )?;
    let histogram = if cfg.output.margins {
        let (margins, mask) = trainer::train_margins(&params, &dataset)?;
        Some(metrics::margin_histogram(
            &margins,
            &mask,
            cfg.eval.histogram_bins,
        )?)
    } else {
        None
    };
    Ok(RunArtifacts {
        dataset,
        params,
        records,
        val,
        test,
        histogram,
    })
}

pub fn report_json(cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<String> {
    let report = RunReport {
        seed: cfg.seed,
        config: cfg,
        num_classes: run.dataset.num_classes,
        train_size: run.dataset.indices(SplitTag::Train).len(),
        val: &run.val,
        test: &run.test,
    };
    Ok(serde_json::to_string_pretty(&report)? + "\n")
}

/// Writes the artifacts of one run into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, run: &RunArtifacts) -> Result<()> {
    create_dir(dir)?;
    let mut epochs = Vec::new();
    trainer::write_epoch_csv(&run.records, &mut epochs)?;
    write_atomic(&dir.join(EPOCHS_FILE), &epochs)?;
    write_atomic(
        &dir.join(MODEL_FILE),
        (serde_json::to_string(&run.params)? + "\n").as_bytes(),
    )?;
    write_atomic(&dir.join(REPORT_FILE), report_json(cfg, run)?.as_bytes())?;
    if let Some(h) = &run.histogram {
        let mut buf = Vec::new();
        h.write_csv(&mut buf)?;
        write_atomic(&dir.join(MARGINS_FILE), &buf)?;
    }
    Ok(())
}

fn load_with_seed(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(config)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// `cmrm train`: writes `epochs.csv`, `model.json`, `report.json` and
/// optionally `margins.csv` into the output directory.
pub fn cmd_train(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunArtifacts> {
    let cfg = load_with_seed(config, seed)?;
    let run = run_experiment(&cfg)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.directory.clone());
    write_run(&dir, &cfg, &run)?;
    Ok(run)
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub val_acc: f64,
    pub val_auroc: Option<f64>,
    pub test_acc: f64,
    pub test_auroc: Option<f64>,
    pub filter_noise_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepBest {
    pub lambda: f64,
    pub alpha: f64,
    pub mean_val_acc: f64,
    pub mean_val_auroc: Option<f64>,
    pub mean_test_acc: f64,
    pub mean_test_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub best: SweepBest,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every grid point and selects the point with the best mean
/// validation accuracy (first in grid order on ties).
///
/// Rows come out lambda-major, then alpha, then seed, whatever the worker
/// count. When `out` is given each run writes its own subdirectory.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    workers: usize,
    out: Option<&Path>,
) -> Result<SweepSummary> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep", "a [sweep] section is required"))?;
    let seeds = if sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        sweep.seeds.clone()
    };
    let lambdas = sweep.effective_lambdas();
    let mut points = Vec::new();
    for (li, &lambda) in lambdas.iter().enumerate() {
        for (ai, &alpha) in sweep.alphas.iter().enumerate() {
            for &seed in &seeds {
                points.push((li, ai, lambda, alpha, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config("sweep.workers", e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        points
            .par_iter()
            .map(|&(li, ai, lambda, alpha, seed)| {
                let point = cfg.with_cmrm_point(lambda, alpha).with_seed(seed);
                let run = run_experiment(&point)?;
                if let Some(dir) = out {
                    write_run(&dir.join(format!("l{li}_a{ai}_s{seed}")), &point, &run)?;
                }
                Ok(SweepRow {
                    lambda,
                    alpha,
                    seed,
                    val_acc: run.val.accuracy,
                    val_auroc: run.val.auroc,
                    test_acc: run.test.accuracy,
                    test_auroc: run.test.auroc,
                    filter_noise_ratio: run.records.last().and_then(|r| r.filter_noise_ratio),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut best: Option<SweepBest> = None;
    for group in rows.chunks(seeds.len()) {
        let n = group.len() as f64;
        let candidate = SweepBest {
            lambda: group[0].lambda,
            alpha: group[0].alpha,
            mean_val_acc: group.iter().map(|r| r.val_acc).sum::<f64>() / n,
            mean_val_auroc: mean_opt(group.iter().map(|r| r.val_auroc)),
            mean_test_acc: group.iter().map(|r| r.test_acc).sum::<f64>() / n,
            mean_test_auroc: mean_opt(group.iter().map(|r| r.test_auroc)),
        };
        if best
            .as_ref()
            .is_none_or(|b| candidate.mean_val_acc > b.mean_val_acc)
        {
            best = Some(candidate);
        }
    }
    Ok(SweepSummary {
        rows,
        best: best.expect("nonempty grid"),
    })
}

pub const SWEEP_HEADER: [&str; 9] = [
    "row",
    "lambda",
    "alpha",
    "seed",
    "val_acc",
    "val_auroc",
    "test_acc",
    "test_auroc",
    "filter_noise_ratio",
];

/// Writes the summary: one `run` row per grid point and seed, then one
/// `best` row holding seed-averaged metrics.
pub fn write_sweep_csv<W: Write>(summary: &SweepSummary, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &summary.rows {
        w.write_record([
            "run".to_string(),
            r.lambda.to_string(),
            r.alpha.to_string(),
            r.seed.to_string(),
            r.val_acc.to_string(),
            opt(r.val_auroc),
            r.test_acc.to_string(),
            opt(r.test_auroc),
            opt(r.filter_noise_ratio),
        ])?;
    }
    let b = &summary.best;
    w.write_record([
        "best".to_string(),
        b.lambda.to_string(),
        b.alpha.to_string(),
        String::new(),
        b.mean_val_acc.to_string(),
        opt(b.mean_val_auroc),
        b.mean_test_acc.to_string(),
        opt(b.mean_test_auroc),
        String::new(),
    ])?;
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// `cmrm sweep`: writes `sweep.csv` and one subdirectory per run.
pub fn cmd_sweep(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<SweepSummary> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
        if let Some(sw) = cfg.sweep.as_mut() {
            sw.seeds = vec![s];
        }
    }
    let workers = workers
        .or(cfg.sweep.as_ref().map(|s| s.workers))
        .unwrap_or(1);
    if workers == 0 {
        return Err(Error::config("workers", "must be >= 1"));
    }
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.directory.clone());
    create_dir(&dir)?;
    let summary = run_sweep(&cfg, workers, Some(&dir))?;
    let mut buf = Vec::new();
    write_sweep_csv(&summary, &mut buf)?;
    write_atomic(&dir.join(SWEEP_FILE), &buf)?;
    Ok(summary)
}

/// Verifier result: the JSON report and whether it met its threshold.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub passed: bool,
    pub json: String,
}

#[derive(Serialize)]
struct Wrapped<T: Serialize> {
    verifier: Verifier,
    passed: bool,
    report: T,
}

fn wrap<T: Serialize>(which: Verifier, passed: bool, report: T) -> Result<VerifyOutcome> {
    let json = serde_json::to_string_pretty(&Wrapped {
        verifier: which,
        passed,
        report,
    })?;
    Ok(VerifyOutcome { passed, json })
}

/// `cmrm verify`: runs a verifier at its default scale and writes
/// `verify_<name>.json` (plus a CSV curve for `quantile`) when `out` is set.
pub fn cmd_verify(which: Verifier, seed: u64, out: Option<&Path>) -> Result<VerifyOutcome> {
    let mut curve = None;
    let outcome = match which {
        Verifier::Quantile => {
            let r = verify::quantile_concentration(
                Distribution::Uniform01,
                0.15,
                &[64, 256, 1024],
                2000,
                seed,
            )?;
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            curve = Some(buf);
            wrap(which, r.passes(), r)?
        }
        Verifier::Dkw => {
            let r = verify::dkw_check(Distribution::Uniform01, &[200], 2000, 0.05, seed)?;
            wrap(which, r.passes(), r)?
        }
        Verifier::Gradcheck => {
            let cases = verify::gradcheck_suite(seed, 20)?;
            let passed = cases
                .iter()
                .all(|c| c.max_relative_error <= verify::GRAD_CHECK_TOLERANCE);
            wrap(which, passed, cases)?
        }
        Verifier::Bruteforce => {
            let r = verify::bruteforce_suite(seed, 100)?;
            wrap(which, r.passes(), r)?
        }
        Verifier::Density => {
            let r = verify::density_suite(seed, 5000, 0.15)?;
            wrap(which, r.passes(), r)?
        }
        Verifier::Tempgap => {
            let r = verify::tempgap_suite(seed)?;
            wrap(which, r.passes(), r)?
        }
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        let name = format!("{which:?}").to_lowercase();
        write_atomic(
            &dir.join(format!("verify_{name}.json")),
            (outcome.json.clone() + "\n").as_bytes(),
        )?;
        if let Some(c) = curve {
            write_atomic(&dir.join(format!("verify_{name}.csv")), &c)?;
        }
    }
    Ok(outcome)
}

/// Path of the mask sidecar for an output CSV: `x.csv` -> `x.mask.csv`.
pub fn mask_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    let mut name = stem;
    name.push(".mask.csv");
    output.with_file_name(name)
}

/// `cmrm inject-noise`: rewrites only the label cells of corrupted rows.
///
/// K is the largest label plus one (at least 2). Returns the flip count.
pub fn cmd_inject_noise(
    input: &Path,
    output: &Path,
    kind: NoiseArg,
    rate: f64,
    seed: u64,
    label_column: &str,
    group_column: Option<&str>,
) -> Result<usize> {
    let file = std::fs::File::open(input).map_err(|e| Error::io(input, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column {name:?}")))
    };
    let label_at = find(label_column)?;
    let group_at = group_column.map(find).transpose()?;
    let mut records = Vec::new();
    for r in reader.records() {
        records.push(r?);
    }
    // header is row 1
    let parse = |row: usize, name: &str, cell: &str| -> Result<usize> {
        cell.trim().parse::<usize>().map_err(|_| Error::Parse {
            row: row + 2,
            column: name.to_string(),
            reason: format!("expected a non-negative integer, got {cell:?}"),
        })
    };
    let labels = records
        .iter()
        .enumerate()
        .map(|(i, r)| parse(i, label_column, &r[label_at]))
        .collect::<Result<Vec<usize>>>()?;
    let k = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    let kind = match kind {
        NoiseArg::Symmetric => NoiseKind::Symmetric,
        NoiseArg::Circular => NoiseKind::Circular,
        NoiseArg::BinaryFlip => NoiseKind::BinaryFlip,
        NoiseArg::GroupConditional => {
            let (g_at, g_name) = match (group_at, group_column) {
                (Some(a), Some(n)) => (a, n),
                _ => {
                    return Err(Error::config(
                        "group_column",
                        "required for group-conditional noise",
                    ))
                }
            };
            let mut group_of = vec![usize::MAX; k];
            for (i, r) in records.iter().enumerate() {
                let g = parse(i, g_name, &r[g_at])?;
                let slot = &mut group_of[labels[i]];
                if *slot != usize::MAX && *slot != g {
                    return Err(Error::Group(format!(
                        "label {} appears in groups {} and {}",
                        labels[i], slot, g
                    )));
                }
                *slot = g;
            }
            // unseen labels form their own groups
            let first = group_of
                .iter()
                .filter(|&&g| g != usize::MAX)
                .max()
                .map_or(0, |m| m + 1);
            for (next, g) in (first..).zip(group_of.iter_mut().filter(|g| **g == usize::MAX)) {
                *g = next;
            }
            NoiseKind::GroupConditional { group_of }
        }
    };
    let (observed, mask) = noise::inject(&labels, &NoiseSpec { kind, rate, seed }, k)?;

    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    out.write_record(&headers)?;
    let mut sidecar = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    sidecar.write_record(["row_index", "clean_label", "observed_label"])?;
    for (i, r) in records.iter().enumerate() {
        if mask.flipped[i] {
            let new_label = observed[i].to_string();
            let row: Vec<&str> = r
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    if j == label_at {
                        new_label.as_str()
                    } else {
                        cell
                    }
                })
                .collect();
            out.write_record(&row)?;
            sidecar.write_record([
                i.to_string(),
                labels[i].to_string(),
                observed[i].to_string(),
            ])?;
        } else {
            out.write_record(r)?;
        }
    }
    let bytes = out.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let side = sidecar
        .into_inner()
        .map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(output, &bytes)?;
    write_atomic(&mask_path(output), &side)?;
    Ok(mask.count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run(["cmrm", "verify", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["cmrm"]), EXIT_USAGE);
        assert_eq!(run(["cmrm", "--help"]), EXIT_OK);
    }

    #[test]
    fn mask_path_replaces_extension() {
        assert_eq!(
            mask_path(Path::new("/a/b/out.csv")),
            PathBuf::from("/a/b/out.mask.csv")
        );
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::config("k", "r")), EXIT_INPUT);
        assert_eq!(exit_code(&Error::EmptyCalibration), EXIT_FAILED);
    }
}
