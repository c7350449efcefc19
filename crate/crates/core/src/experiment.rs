//! End-to-end runs: simulate, train, evaluate, write reports and a manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ResolvedRun, SweepValue};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{evaluate, Method, MetricsReport};
use crate::model::ModelParams;
use crate::sim::{generate_stream, Video};
use crate::train::{train, TrainLog};

pub const MANIFEST: &str = "manifest.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const PARAMS: &str = "params.txt";
pub const SUMMARY: &str = "summary.csv";
pub const ENERGY_HISTOGRAM: &str = "energy_histogram.csv";

/// Everything a single run produces, in memory.
pub struct RunArtifacts {
    pub initial: ModelParams<f64>,
    pub params: ModelParams<f64>,
    pub log: TrainLog<f64>,
    pub reports: Vec<MetricsReport<f64>>,
}

impl RunArtifacts {
    pub fn report(&self, method: Method) -> Option<&MetricsReport<f64>> {
        self.reports.iter().find(|r| r.method == method)
    }
}

/// Training videos and held-out evaluation videos.
pub type StreamPair = (Vec<Video<f64>>, Vec<Video<f64>>);

/// Training and held-out evaluation streams for a resolved run.
pub fn streams(run: &ResolvedRun) -> Result<StreamPair> {
    let train_stream = generate_stream(&run.sim, 0, run.train_videos)?;
    let eval_stream = generate_stream(&run.sim, run.train_videos as u64, run.eval_videos)?;
    Ok((train_stream, eval_stream))
}

/// Initial parameters, drawn from the trainer seed.
pub fn initial_params(run: &ResolvedRun) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    rng.set_stream(2);
    ModelParams::init(run.model_dims, run.activation, run.theta_u_init, &mut rng)
}

/// Simulates, trains and evaluates without touching the filesystem.
pub fn execute(run: &ResolvedRun) -> Result<RunArtifacts> {
    let (train_stream, eval_stream) = streams(run)?;
    let initial = initial_params(run);
    let (params, log) = train(&train_stream, initial.clone(), &run.train)?;
    let threshold = run.train.objectness_threshold;
    let reports = run
        .methods
        .iter()
        .map(|&m| evaluate(&params, &eval_stream, m, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunArtifacts {
        initial,
        params,
        log,
        reports,
    })
}

#[derive(Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    status: &'a str,
    sim_seed: u64,
    train_seed: u64,
    files: Vec<ManifestFile>,
    config: &'a ExperimentConfig,
}

fn write_manifest(dir: &Path, config: &ExperimentConfig, status: &str, files: &[PathBuf]) -> Result<()> {
    let files = files
        .iter()
        .map(|rel| {
            let bytes = fs::read(dir.join(rel)).map_err(|e| Error::io(dir.join(rel), e))?;
            Ok(ManifestFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        status,
        sim_seed: config.sim.seed,
        train_seed: config.train.seed,
        files,
        config,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
    Ok(PathBuf::from(name))
}

/// Runs one configuration (its sweep, if any, is ignored) into `dir`.
///
/// The manifest is written first with `status = "incomplete"` and rewritten
/// with checksums once every output exists.
pub fn run_single(config: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    let config = config.resolved()?;
    let run = config.resolve_run()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(dir, &config, "incomplete", &[])?;

    let artifacts = execute(&run)?;
    let mut files = vec![
        write_file(dir, TRAIN_LOG, |w| io::write_train_log(w, &artifacts.log))?,
        write_file(dir, PARAMS, |w| io::write_params(w, &artifacts.params))?,
    ];
    for report in &artifacts.reports {
        let m = report.method.name();
        files.push(write_file(dir, &format!("metrics_{m}.txt"), |w| {
            io::write_metrics_report(w, report)
        })?);
        files.push(write_file(dir, &format!("scores_{m}.csv"), |w| {
            io::write_scores_csv(w, report)
        })?);
        files.push(write_file(dir, &format!("histogram_{m}.csv"), |w| {
            io::write_histogram_csv(w, &report.score_histogram)
        })?);
    }
    if let Some(report) = artifacts.reports.first() {
        files.push(write_file(dir, ENERGY_HISTOGRAM, |w| {
            io::write_histogram_csv(w, &report.energy_histogram)
        })?);
    }
    write_manifest(dir, &config, "complete", &files)?;
    log::info!("run complete: {}", dir.display());
    Ok(artifacts)
}

/// One row of a sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: SweepValue,
    pub fpr95: f64,
    pub auroc: f64,
}

pub enum RunOutcome {
    Single(Box<RunArtifacts>),
    Sweep(Vec<SweepRow>),
}

/// Name of a sweep run's subdirectory, e.g. `beta_0.05` or `R_inf`.
pub fn sweep_dir_name(config: &ExperimentConfig, value: SweepValue) -> String {
    let axis = config.sweep.as_ref().map_or("value", |s| s.axis.name());
    format!("{axis}_{value}")
}

/// Runs the experiment described by `config`, writing into `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let report = config.check();
    if let Some(first) = report.errors.first() {
        return Err(Error::config("config", first.clone()));
    }
    let out = &config.output_dir;
    let Some(sweep) = &config.sweep else {
        return run_single(config, out).map(|a| RunOutcome::Single(Box::new(a)));
    };

    let values = sweep.parsed_values()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_manifest(out, config, "incomplete", &[])?;

    // primary metric of each run: stud if evaluated, else the first listed method
    let method = if config.eval.methods.contains(&Method::Stud) {
        Method::Stud
    } else {
        config.eval.methods[0]
    };
    let rows = values
        .par_iter()
        .map(|&value| {
            let sub = config.with_sweep_value(value);
            let artifacts = run_single(&sub, &out.join(sweep_dir_name(config, value)))?;
            let report = artifacts.report(method).expect("method evaluated");
            Ok(SweepRow {
                value,
                fpr95: report.fpr95,
                auroc: report.auroc,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files = vec![write_file(out, SUMMARY, |w| {
        writeln!(w, "axis_value,fpr95,auroc")?;
        for r in &rows {
            writeln!(w, "{},{},{}", r.value, io::fmt_real(r.fpr95), io::fmt_real(r.auroc))?;
        }
        Ok(())
    })?];
    for &value in &values {
        let name = sweep_dir_name(config, value);
        let mut entries: Vec<PathBuf> = fs::read_dir(out.join(&name))
            .map_err(|e| Error::io(out.join(&name), e))?
            .filter_map(|e| e.ok().map(|e| PathBuf::from(&name).join(e.file_name())))
            .collect();
        entries.sort();
        files.extend(entries);
    }
    write_manifest(out, config, "complete", &files)?;
    Ok(RunOutcome::Sweep(rows))
}

/// Loads and checks a config file without running it.
pub fn validate(path: &Path) -> crate::config::ValidationReport {
    match ExperimentConfig::load(path) {
        Ok(config) => config.check(),
        Err(e) => crate::config::ValidationReport {
            errors: vec![e.to_string()],
            warnings: Vec::new(),
        },
    }
}
