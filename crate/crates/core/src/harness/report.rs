use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Summary of one train, eval or bench run. `None` fields are written as
/// `skipped`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub variant: String,
    pub params: usize,
    pub train_steps: usize,
    pub training_skipped: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub metrics: Option<MetricReport>,
    /// The bilinear-demosaiced input scored against the same targets.
    pub input_metrics: Option<MetricReport>,
    /// Forward-pass FLOPs for one image at the evaluated size.
    pub flops_per_image: Option<u64>,
    pub ms_per_image: Option<f64>,
    /// Wall-clock seconds per phase, in execution order.
    pub phases: Vec<(String, Option<f64>)>,
}

impl RunReport {
    pub fn new(variant: &str, params: usize) -> Self {
        Self {
            variant: variant.to_string(),
            params,
            train_steps: 0,
            training_skipped: true,
            initial_loss: None,
            final_loss: None,
            metrics: None,
            input_metrics: None,
            flops_per_image: None,
            ms_per_image: None,
            phases: Vec::new(),
        }
    }

    pub fn phase_seconds(&self, name: &str) -> Option<f64> {
        self.phases.iter().find(|(n, _)| n == name).and_then(|(_, s)| *s)
    }

    /// `(field, value)` rows. Timing rows are last and are the only ones
    /// that vary between identical runs.
    pub fn rows(&self) -> Vec<(String, String)> {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map_or("skipped".to_string(), |v| v.to_string())
        }
        let mut rows = vec![
            ("variant".to_string(), self.variant.clone()),
            ("params".to_string(), self.params.to_string()),
            ("train_steps".to_string(), self.train_steps.to_string()),
            (
                "training".to_string(),
                if self.training_skipped { "skipped" } else { "completed" }.to_string(),
            ),
            ("initial_loss".to_string(), opt(self.initial_loss)),
            ("final_loss".to_string(), opt(self.final_loss)),
        ];
        for (prefix, m) in [("", &self.metrics), ("input_", &self.input_metrics)] {
            rows.push((format!("{prefix}n_images"), opt(m.map(|m| m.n_images))));
            rows.push((format!("{prefix}psnr_db"), opt(m.map(|m| m.psnr_db))));
            rows.push((format!("{prefix}y_psnr_db"), opt(m.map(|m| m.y_psnr_db))));
            rows.push((format!("{prefix}ssim"), opt(m.map(|m| m.ssim))));
            rows.push((format!("{prefix}delta_e"), opt(m.map(|m| m.delta_e))));
        }
        rows.push(("flops_per_image".to_string(), opt(self.flops_per_image)));
        rows.push(("ms_per_image".to_string(), opt(self.ms_per_image)));
        for (name, s) in &self.phases {
            rows.push((format!("seconds_{name}"), opt(*s)));
        }
        rows
    }

    /// Writes a two-column `field,value` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["field", "value"]).map_err(err)?;
        for (k, v) in self.rows() {
            w.write_record([k, v]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl std::fmt::Display for RunReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in self.rows() {
            writeln!(f, "{k:>18}  {v}")?;
        }
        Ok(())
    }
}
