use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fedharmony_core::datagen::{export_dataset, generate as generate_dataset, label_correlation, load_dataset};
use fedharmony_core::federation::{run_federation_with, Ablation, FederationConfig, FederationRun};
use fedharmony_core::io::write_atomic;
use fedharmony_core::metrics::MetricReport;
use fedharmony_core::FederatedDataset;
use rayon::prelude::*;

use crate::verify::{verify, VerificationReport};
use crate::{CliError, ExperimentConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const MODEL_FILE: &str = "model.bin";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const VERIFICATION_FILE: &str = "verification.json";

pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let ds = generate_dataset(&cfg.data)?;
    Ok(export_dataset(&ds, out)?)
}

fn load(dir: &Path) -> Result<FederatedDataset, CliError> {
    load_dataset(dir).map_err(|e| CliError::Config(format!("dataset {}: {e}", dir.display())))
}

pub fn metrics_header() -> String {
    format!("round,{}\n", MetricReport::CSV_HEADER)
}

/// One row per round: the global model's test metrics after aggregation.
pub fn metrics_csv(run: &FederationRun) -> String {
    let mut out = metrics_header();
    for r in &run.records {
        out += &format!("{},{}\n", r.round, r.metrics.to_csv_row());
    }
    out
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).context("serializing json")?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Runs the federation and writes `rounds.jsonl`, `metrics.csv`,
/// `correlations/round_NNNN/*` and `model.bin` under `out`.
pub fn train(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<FederationRun, CliError> {
    let ds = load(dataset)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let corr_dir = out.join("correlations");
    let mut rounds = String::new();
    let run = run_federation_with(&cfg.federation, &ds, |record, artifacts| {
        let dir = corr_dir.join(format!("round_{:04}", record.round));
        fs::create_dir_all(&dir)?;
        for (k, r) in &artifacts.uploads {
            write_atomic(&dir.join(format!("client_{k:03}.csv")), r.to_csv().as_bytes())?;
        }
        for (k, c) in &artifacts.consensus {
            write_atomic(&dir.join(format!("consensus_{k:03}.csv")), c.matrix.to_csv().as_bytes())?;
        }
        for (k, p) in &artifacts.partitions {
            write_atomic(&dir.join(format!("partition_{k:03}.json")), serde_json::to_string(p)?.as_bytes())?;
        }
        rounds += &serde_json::to_string(record)?;
        rounds.push('\n');
        Ok(())
    })?;
    write_atomic(&out.join(ROUNDS_FILE), rounds.as_bytes())?;
    write_atomic(&out.join(METRICS_FILE), metrics_csv(&run).as_bytes())?;
    write_atomic(&out.join(MODEL_FILE), &run.model.to_bytes())?;
    Ok(run)
}

pub const ABLATION_STEPS: [(&str, Ablation); 4] = [
    ("Base", Ablation::FEDAVG),
    (
        "+A",
        Ablation {
            use_alignment: true,
            use_caa: false,
            use_blocks: false,
        },
    ),
    (
        "+A+B",
        Ablation {
            use_alignment: true,
            use_caa: true,
            use_blocks: false,
        },
    ),
    ("+A+B+C", Ablation::FULL),
];

/// Four runs sharing the seed, adding one factor at a time.
pub fn ablate(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<(PathBuf, Vec<MetricReport>), CliError> {
    let ds = load(dataset)?;
    let reports = ABLATION_STEPS
        .par_iter()
        .map(|(_, flags)| {
            let fc = FederationConfig {
                flags: *flags,
                ..cfg.federation.clone()
            };
            run_federation_with(&fc, &ds, |_, _| Ok(())).map(|run| run.final_metrics().clone())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = format!("config,{}\n", MetricReport::CSV_HEADER);
    for ((name, _), r) in ABLATION_STEPS.iter().zip(&reports) {
        csv += &format!("{name},{}\n", r.to_csv_row());
    }
    fs::create_dir_all(out)?;
    let path = out.join(ABLATION_FILE);
    write_atomic(&path, csv.as_bytes())?;
    Ok((path, reports))
}

pub fn verify_theorems(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<VerificationReport, CliError> {
    let report = verify(cfg.seed, &cfg.verify)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(VERIFICATION_FILE), &report)?;
    }
    Ok(report)
}

/// Ground-truth and per-client label correlations plus each client's
/// distance to the ground truth.
pub fn dump_correlation(dataset: &Path, out: &Path, epsilon: f64) -> Result<Vec<PathBuf>, CliError> {
    let ds = load(dataset)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), CliError> {
        let p = out.join(name);
        write_atomic(&p, text.as_bytes())?;
        written.push(p);
        Ok(())
    };
    put("ground_truth.csv".into(), ds.ground_truth.to_csv())?;
    let mut drift = String::from("client,samples,frobenius_to_ground_truth\n");
    for (k, c) in ds.clients.iter().enumerate() {
        let r = label_correlation(&c.labels, epsilon)?;
        let d = (r.values() - ds.ground_truth.values()).mapv(|v| v * v).sum().sqrt();
        drift += &format!("{k},{},{d}\n", c.n_samples());
        put(format!("client_{k:03}.csv"), r.to_csv())?;
    }
    put("test.csv".into(), label_correlation(&ds.test.labels, epsilon)?.to_csv())?;
    put("drift.csv".into(), drift)?;
    Ok(written)
}
