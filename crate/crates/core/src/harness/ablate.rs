//! Variant sweeps.

use std::path::Path;

use super::config::TrainConfig;
use super::train::{train, TrainOutcome};
use crate::arch::{FusionKind, Variant};
use crate::error::{Error, Result};

pub const ABLATION_CSV: &str = "ablation.csv";

const HEADER: [&str; 14] = [
    "row",
    "variant",
    "raw_stream",
    "guide_stream",
    "guide_space",
    "sadm",
    "lcat",
    "params",
    "psnr_db",
    "y_psnr_db",
    "ssim",
    "delta_e",
    "input_psnr_db",
    "final_loss",
];

pub struct AblationRun {
    pub variant: Variant,
    pub outcome: TrainOutcome,
}

/// Parses a comma-separated list of variant names.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Variant::parse)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    Ok(v)
}

/// Trains and evaluates each variant from `base` with the same seed and data.
/// Each run writes into `out/<variant>/`; the matrix goes to `out/ablation.csv`.
pub fn ablate(base: &TrainConfig, variants: &[Variant], out: Option<&Path>) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut cfg = base.clone();
        cfg.net.variant = v;
        log::info!("ablation: training `{v}`");
        let dir = out.map(|d| d.join(v.name()));
        let outcome = train(&cfg, dir.as_deref())?;
        runs.push(AblationRun { variant: v, outcome });
    }
    if let Some(d) = out {
        write_ablation_csv(&d.join(ABLATION_CSV), &runs)?;
    }
    Ok(runs)
}

fn mark(b: bool) -> String {
    if b { "x" } else { "" }.to_string()
}

/// One row per run. Columns mark which components the variant keeps.
pub fn write_ablation_csv(path: &Path, runs: &[AblationRun]) -> Result<()> {
    let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(HEADER).map_err(err)?;
    let opt = |v: Option<f64>| v.map_or("skipped".to_string(), |v| v.to_string());
    for r in runs {
        let v = r.variant;
        let rep = &r.outcome.report;
        let space = if v.has_guide() { format!("{:?}", v.guide_space()).to_lowercase() } else { String::new() };
        w.write_record([
            v.table_row().map_or(String::new(), |n| format!("#{n}")),
            v.name().to_string(),
            mark(v.has_raw()),
            mark(v.has_guide()),
            space,
            mark(v.fusion() == FusionKind::Sadm),
            mark(v.has_lcat()),
            rep.params.to_string(),
            opt(rep.metrics.map(|m| m.psnr_db)),
            opt(rep.metrics.map(|m| m.y_psnr_db)),
            opt(rep.metrics.map(|m| m.ssim)),
            opt(rep.metrics.map(|m| m.delta_e)),
            opt(rep.input_metrics.map(|m| m.psnr_db)),
            opt(rep.final_loss),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
