//! Scoring a network on a directory of pairs.
//!
//! Network outputs are clamped to `[0, 1]` before scoring. The input
//! baseline is the bilinear demosaic of the raw capture, the quantity the
//! generator records as `degraded_psnr`.

use std::path::Path;
use std::time::Instant;

use super::data::network_inputs;
use crate::arch::DsdNet;
use crate::color::{demosaic_bilinear, SrgbImage};
use crate::error::{Error, Result};
use crate::io::write_png;
use crate::metrics::{evaluate_pair, ImageMetrics, MetricReport};
use crate::sim::LoadedPair;
use crate::tensor::ParamStore;

pub const EVAL_CSV: &str = "eval.csv";

const HEADER: [&str; 10] = [
    "index",
    "content",
    "psnr_db",
    "y_psnr_db",
    "ssim",
    "delta_e",
    "input_psnr_db",
    "input_y_psnr_db",
    "input_ssim",
    "input_delta_e",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub content: String,
    pub output: ImageMetrics,
    pub input: ImageMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    pub output: MetricReport,
    pub input: MetricReport,
    /// FLOPs of one forward pass, from the first image.
    pub flops_per_image: Option<u64>,
}

/// Scores `pred` and the demosaiced input of `pair` against its target.
pub fn score(pair: &LoadedPair, pred: &SrgbImage) -> Result<EvalRow> {
    let baseline = demosaic_bilinear(&pair.input)?;
    Ok(EvalRow {
        index: pair.meta.index,
        content: pair.meta.content.clone(),
        output: evaluate_pair(&pred.clamped(), &pair.gt)?,
        input: evaluate_pair(&baseline, &pair.gt)?,
    })
}

pub fn summarize(rows: Vec<EvalRow>, flops_per_image: Option<u64>) -> Evaluation {
    let out: Vec<ImageMetrics> = rows.iter().map(|r| r.output).collect();
    let inp: Vec<ImageMetrics> = rows.iter().map(|r| r.input).collect();
    Evaluation {
        output: MetricReport::aggregate(&out),
        input: MetricReport::aggregate(&inp),
        rows,
        flops_per_image,
    }
}

/// Runs the network once per pair. Pairs are split across the available
/// cores; results keep the input order.
pub fn evaluate(net: &DsdNet, store: &ParamStore<f32>, pairs: &[LoadedPair], dump_dir: Option<&Path>) -> Result<Evaluation> {
    if let Some(d) = dump_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let one = |pair: &LoadedPair| -> Result<(EvalRow, u64)> {
        let (raw, guide) = network_inputs(&pair.input, net.variant)?;
        let (srgb, _, flops) = net.infer(store, &raw, &guide)?;
        let pred = SrgbImage::new(srgb)?.clamped();
        if let Some(d) = dump_dir {
            write_png(&d.join(format!("pair_{:05}_output.png", pair.meta.index)), &pred)?;
        }
        Ok((score(pair, &pred)?, flops))
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len().max(1));
    let results: Vec<Result<(EvalRow, u64)>> = if workers <= 1 {
        pairs.iter().map(one).collect()
    } else {
        let chunk = pairs.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(one).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut rows = Vec::with_capacity(pairs.len());
    let mut flops = None;
    for r in results {
        let (row, f) = r?;
        flops.get_or_insert(f);
        rows.push(row);
    }
    Ok(summarize(rows, flops))
}

/// Per-image rows followed by a `mean` row.
pub fn write_eval_csv(path: &Path, ev: &Evaluation) -> Result<()> {
    let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(HEADER).map_err(err)?;
    let rec = |idx: String, content: String, o: [f64; 4], i: [f64; 4]| {
        let mut v = vec![idx, content];
        v.extend(o.iter().chain(&i).map(|x| x.to_string()));
        v
    };
    let m = |x: &ImageMetrics| [x.psnr_db, x.y_psnr_db, x.ssim, x.delta_e];
    for r in &ev.rows {
        w.write_record(rec(r.index.to_string(), r.content.clone(), m(&r.output), m(&r.input)))
            .map_err(err)?;
    }
    let a = |x: &MetricReport| [x.psnr_db, x.y_psnr_db, x.ssim, x.delta_e];
    w.write_record(rec("mean".into(), String::new(), a(&ev.output), a(&ev.input)))
        .map_err(err)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-image rows of an eval CSV, without the trailing mean row.
pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        if &rec[0] == "mean" {
            continue;
        }
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Invalid(format!("{}: bad number `{}`", path.display(), &rec[i])))
        };
        let im = |o: usize| -> Result<ImageMetrics> {
            Ok(ImageMetrics {
                psnr_db: f(o)?,
                y_psnr_db: f(o + 1)?,
                ssim: f(o + 2)?,
                delta_e: f(o + 3)?,
            })
        };
        rows.push(EvalRow {
            index: rec[0]
                .parse()
                .map_err(|_| Error::Invalid(format!("{}: bad index `{}`", path.display(), &rec[0])))?,
            content: rec[1].to_string(),
            output: im(2)?,
            input: im(6)?,
        });
    }
    Ok(rows)
}

/// Wall-clock helper for report phases.
pub(crate) struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
