use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparsenas::search::{retrain as retrain_genotype, search_with, RetrainConfig, RetrainReport, SearchTrace, StopReason};
use sparsenas::supernet::{NUM_EDGES, NUM_OPS};
use sparsenas::{Algorithm, Dataset, Genotype, OpKind, SearchConfig, Split};

use crate::config::RunConfig;
use crate::manifest::{
    code_version, now_rfc3339, read_trace, write_atomic, DatasetInfo, DatasetSource, Outputs, RunManifest,
    GENOTYPE_FILE, MANIFEST_SCHEMA_VERSION, RETRAIN_FILE, TRACE_FILE,
};
use crate::{CompareArgs, ExportFormat, RetrainArgs, SearchArgs, TraceExportArgs, UsageError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Accuracy over one or more retraining seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainSummary {
    pub schema_version: u32,
    pub code_version: String,
    pub genotype: String,
    pub dataset: DatasetInfo,
    pub config: RetrainConfig,
    pub seeds: Vec<u64>,
    pub test_accuracy_mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub test_accuracy_std: f64,
    /// Test accuracy of always predicting the most frequent training class.
    pub majority_rate: f64,
    pub runs: Vec<RetrainReport>,
}

fn dataset_source(dir: Option<PathBuf>, run: &RunConfig) -> DatasetSource {
    match dir {
        Some(path) => DatasetSource::Directory { path },
        None => DatasetSource::Synthetic(run.synthetic.clone()),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn retrain_seeds(
    genotype: &Genotype,
    ds: &Dataset,
    info: &DatasetInfo,
    config: &RetrainConfig,
    seeds: &[u64],
    quiet: bool,
) -> Result<RetrainSummary> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RetrainConfig { seed, ..config.clone() };
        let report = retrain_genotype(genotype, ds, &cfg).with_context(|| format!("retraining with seed {seed}"))?;
        if !quiet {
            eprintln!(
                "retrain seed {seed}: test accuracy {:.4} (best epoch {})",
                report.test_accuracy, report.best_epoch
            );
        }
        runs.push(report);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(RetrainSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        code_version: code_version(),
        genotype: genotype.to_string(),
        dataset: info.clone(),
        config: config.clone(),
        seeds: seeds.to_vec(),
        test_accuracy_mean: mean,
        test_accuracy_std: std,
        majority_rate: majority_rate(ds),
        runs,
    })
}

/// Test-split rate of the most frequent training label.
fn majority_rate(ds: &Dataset) -> f64 {
    let mut counts = vec![0usize; ds.num_classes()];
    for &i in ds.split(Split::Train) {
        counts[ds.labels()[i] as usize] += 1;
    }
    let top = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
    let test = ds.split(Split::Test);
    test.iter().filter(|&&i| ds.labels()[i] as usize == top).count() as f64 / test.len().max(1) as f64
}

struct Job<'a> {
    config: SearchConfig,
    dataset: &'a Dataset,
    info: DatasetInfo,
    retrain: Option<RetrainConfig>,
    quiet: bool,
}

/// Runs one search into `out`, rewriting the trace after every epoch, and
/// returns the manifest together with the retrain report if one was asked for.
fn run_job(job: Job<'_>, out: &Path) -> Result<(RunManifest, Option<RetrainSummary>)> {
    fs::create_dir_all(out).map_err(|e| UsageError(format!("cannot create {}: {e}", out.display())))?;
    for stale in [TRACE_FILE, GENOTYPE_FILE, RETRAIN_FILE, crate::manifest::MANIFEST_FILE] {
        let p = out.join(stale);
        if p.exists() {
            fs::remove_file(&p).with_context(|| format!("removing stale {}", p.display()))?;
        }
    }
    let started_at = now_rfc3339();
    let trace_path = out.join(TRACE_FILE);
    let mut partial = SearchTrace::new();
    let quiet = job.quiet;
    let outcome = search_with(&job.config, job.dataset, |record| {
        partial.push(record.clone());
        let mut buf = Vec::new();
        partial.write_jsonl(&mut buf)?;
        write_atomic(&trace_path, &buf).map_err(|e| std::io::Error::other(format!("{e:#}")))?;
        if !quiet {
            let support: Vec<usize> = record.probabilities.iter().map(|p| p.support().len()).collect();
            eprintln!(
                "[{}] epoch {:>3}  tau {:.4}  train {:.4}  val {:.4}  acc {:.3}  support {:?}",
                job.config.algorithm, record.epoch, record.temperature, record.train_loss, record.val_loss,
                record.val_accuracy, support
            );
        }
        Ok(())
    })?;
    write_atomic(&out.join(GENOTYPE_FILE), format!("{}\n", outcome.genotype).as_bytes())?;
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        code_version: code_version(),
        seed: job.config.seed,
        config: job.config.clone(),
        dataset: job.info.clone(),
        threads: rayon::current_num_threads(),
        started_at,
        finished_at: now_rfc3339(),
        search_time_s: outcome.elapsed_s,
        stop_reason: outcome.stop_reason,
        stop_epoch: outcome.stop_epoch,
        epochs_recorded: outcome.trace.len(),
        genotype: outcome.genotype.to_string(),
        retrain: None,
        outputs: Outputs {
            trace: TRACE_FILE.into(),
            genotype: GENOTYPE_FILE.into(),
            retrain: None,
        },
    };
    manifest.write(out)?;
    if !quiet {
        let how = match outcome.stop_reason {
            StopReason::EarlyStop => "early stop",
            StopReason::EpochLimit => "epoch limit",
        };
        eprintln!(
            "[{}] {how} at epoch {} after {:.1}s: {}",
            job.config.algorithm, outcome.stop_epoch, outcome.elapsed_s, outcome.genotype
        );
    }
    let summary = match &job.retrain {
        Some(cfg) => {
            let s = retrain_seeds(&outcome.genotype, job.dataset, &job.info, cfg, &[cfg.seed], quiet)?;
            write_atomic(&out.join(RETRAIN_FILE), &serde_json::to_vec_pretty(&s)?)?;
            manifest.retrain = Some(cfg.clone());
            manifest.outputs.retrain = Some(RETRAIN_FILE.into());
            manifest.write(out)?;
            Some(s)
        }
        None => None,
    };
    RunManifest::validate_dir(out).context("checking the run directory")?;
    Ok((manifest, summary))
}

pub fn search(args: SearchArgs) -> Result<()> {
    let (config, source, retrain, expected_hash) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::read(path)?;
            let retrain = m.retrain.clone().or_else(|| args.retrain.then(RetrainConfig::default));
            (m.config, m.dataset.source, retrain, Some(m.dataset.sha256))
        }
        None => {
            let mut run = RunConfig::load(args.config.as_deref(), args.algorithm)?;
            if let Some(seed) = args.seed {
                run.search.seed = seed;
            }
            let retrain = args.retrain.then(|| run.retrain.clone());
            (run.search.clone(), dataset_source(args.dataset.clone(), &run), retrain, None)
        }
    };
    let dataset = source.load()?;
    let info = DatasetInfo::describe(source, &dataset)?;
    if let Some(expected) = expected_hash {
        if expected != info.sha256 {
            bail!(UsageError(format!(
                "dataset hash {} does not match the manifest ({expected})",
                info.sha256
            )));
        }
    }
    let (manifest, summary) = run_job(
        Job {
            config,
            dataset: &dataset,
            info,
            retrain,
            quiet: args.quiet,
        },
        &args.out,
    )?;
    println!("{}", manifest.genotype);
    if let Some(s) = summary {
        println!("test accuracy {:.4}", s.test_accuracy_mean);
    }
    Ok(())
}

fn parse_genotype_arg(arg: &str) -> Result<Genotype> {
    let path = Path::new(arg);
    let text = if path.is_file() {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    } else {
        arg.to_string()
    };
    Ok(text.trim().parse()?)
}

pub fn retrain(args: RetrainArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!(UsageError("--seeds must be at least 1".into()));
    }
    let genotype = parse_genotype_arg(&args.genotype)?;
    let mut run = RunConfig::load(args.config.as_deref(), None)?;
    if let Some(epochs) = args.epochs {
        run.retrain.epochs = epochs;
    }
    let source = dataset_source(args.dataset.clone(), &run);
    let dataset = source.load()?;
    let info = DatasetInfo::describe(source, &dataset)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| run.retrain.seed + i).collect();
    let summary = retrain_seeds(&genotype, &dataset, &info, &run.retrain, &seeds, args.quiet)?;
    let json = serde_json::to_vec_pretty(&summary)?;
    match &args.out {
        Some(path) => write_atomic(path, &json)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&json)?;
            stdout.write_all(b"\n")?;
        }
    }
    if !args.quiet {
        eprintln!(
            "test accuracy {:.4} ± {:.4} over {} seed(s)",
            summary.test_accuracy_mean,
            summary.test_accuracy_std,
            seeds.len()
        );
    }
    Ok(())
}

/// Rank 1 is the most probable operation; ties go to the earlier operation.
fn ranks(p: &[f64]) -> [usize; NUM_OPS] {
    let mut order: Vec<usize> = (0..NUM_OPS).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut rank = [0; NUM_OPS];
    for (r, &op) in order.iter().enumerate() {
        rank[op] = r + 1;
    }
    rank
}

pub fn edge_csv(trace: &SearchTrace, edge: usize) -> Result<String> {
    if edge >= NUM_EDGES {
        bail!(UsageError(format!("edge index {edge} is out of range 0..{NUM_EDGES}")));
    }
    let mut out = String::from("epoch,temperature");
    for op in OpKind::ALL {
        write!(out, ",p_{op}")?;
    }
    for op in OpKind::ALL {
        write!(out, ",rank_{op}")?;
    }
    out.push_str(",schema_version\n");
    for r in trace.records() {
        let p = &r.probabilities[edge][..];
        write!(out, "{},{}", r.epoch, r.temperature)?;
        for v in p {
            write!(out, ",{v}")?;
        }
        for k in ranks(p) {
            write!(out, ",{k}")?;
        }
        writeln!(out, ",{CSV_SCHEMA_VERSION}")?;
    }
    Ok(out)
}

pub fn trace_export(args: TraceExportArgs) -> Result<()> {
    if args.edge >= NUM_EDGES {
        bail!(UsageError(format!("edge index {} is out of range 0..{NUM_EDGES}", args.edge)));
    }
    let trace = read_trace(&args.trace)?;
    let text = match args.format {
        ExportFormat::Csv => edge_csv(&trace, args.edge)?,
    };
    match &args.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRun {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub dir: String,
    pub genotype: String,
    pub stop_reason: StopReason,
    pub stop_epoch: usize,
    pub search_time_s: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub algorithm: Algorithm,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub time_mean_s: f64,
    pub time_std_s: f64,
    pub stop_epoch_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub schema_version: u32,
    pub code_version: String,
    pub dataset: DatasetInfo,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// One row per algorithm with at least one finished run.
    pub rows: Vec<CompareRow>,
    pub runs: Vec<CompareRun>,
}

impl Comparison {
    fn rebuild_rows(&mut self) {
        self.rows = self
            .algorithms
            .iter()
            .filter_map(|&alg| {
                let runs: Vec<&CompareRun> = self.runs.iter().filter(|r| r.algorithm == alg).collect();
                if runs.is_empty() {
                    return None;
                }
                let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
                let times: Vec<f64> = runs.iter().map(|r| r.search_time_s).collect();
                let (acc_mean, acc_std) = mean_std(&accs);
                let (time_mean_s, time_std_s) = mean_std(&times);
                Some(CompareRow {
                    algorithm: alg,
                    runs: runs.len(),
                    acc_mean,
                    acc_std,
                    time_mean_s,
                    time_std_s,
                    stop_epoch_mean: runs.iter().map(|r| r.stop_epoch as f64).sum::<f64>() / runs.len() as f64,
                })
            })
            .collect();
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| Algorithm | Runs | Test accuracy | Search time (s) | Stop epoch |\n");
        s.push_str("|---|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} ± {:.4} | {:.1} ± {:.1} | {:.1} |",
                r.algorithm, r.runs, r.acc_mean, r.acc_std, r.time_mean_s, r.time_std_s, r.stop_epoch_mean
            );
        }
        s
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("comparison.json"), &serde_json::to_vec_pretty(self)?)?;
        write_atomic(&dir.join("comparison.md"), self.markdown().as_bytes())
    }
}

pub fn compare(args: CompareArgs) -> Result<()> {
    if args.algorithms.is_empty() {
        bail!(UsageError("--algorithms needs at least one algorithm".into()));
    }
    if args.seeds.is_empty() {
        bail!(UsageError("--seeds needs at least one seed".into()));
    }
    let mut algorithms = args.algorithms.clone();
    algorithms.dedup();
    let base = RunConfig::load(args.config.as_deref(), None)?;
    let source = dataset_source(args.dataset.clone(), &base);
    let dataset = source.load()?;
    let info = DatasetInfo::describe(source, &dataset)?;
    fs::create_dir_all(&args.out).map_err(|e| UsageError(format!("cannot create {}: {e}", args.out.display())))?;
    let mut table = Comparison {
        schema_version: REPORT_SCHEMA_VERSION,
        code_version: code_version(),
        dataset: info.clone(),
        algorithms: algorithms.clone(),
        seeds: args.seeds.clone(),
        rows: Vec::new(),
        runs: Vec::new(),
    };
    table.write(&args.out)?;
    for &alg in &algorithms {
        let run = RunConfig::load(args.config.as_deref(), Some(alg))?;
        for &seed in &args.seeds {
            let config = SearchConfig {
                seed,
                ..run.search.clone()
            };
            let retrain = RetrainConfig {
                seed,
                ..run.retrain.clone()
            };
            let rel = format!("runs/{}-seed{seed}", alg.name());
            let (manifest, summary) = run_job(
                Job {
                    config,
                    dataset: &dataset,
                    info: info.clone(),
                    retrain: Some(retrain),
                    quiet: args.quiet,
                },
                &args.out.join(&rel),
            )
            .with_context(|| format!("{alg} with seed {seed}"))?;
            let summary = summary.expect("compare always retrains");
            table.runs.push(CompareRun {
                algorithm: alg,
                seed,
                dir: rel,
                genotype: manifest.genotype,
                stop_reason: manifest.stop_reason,
                stop_epoch: manifest.stop_epoch,
                search_time_s: manifest.search_time_s,
                test_accuracy: summary.test_accuracy_mean,
            });
            table.rebuild_rows();
            table.write(&args.out)?;
        }
    }
    print!("{}", table.markdown());
    Ok(())
}
