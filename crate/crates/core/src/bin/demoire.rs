use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use demoire::arch::count_params;
use demoire::harness::{
    ablate, bench_inference, evaluate, load_model, parse_variants, train, write_eval_csv, Checkpoint, RunReport,
    TrainConfig, EVAL_CSV, REPORT_CSV,
};
use demoire::sim::{dataset_generate, load_content_dir, load_dataset, ContentSource, GenerateOptions, SimRanges};
use demoire::Result;

#[derive(Parser)]
#[command(name = "demoire", version, about = "Raw-domain screen demoireing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ranges {
    Default,
    Heldout,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Override the config's data_dir.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the config's eval_dir.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of pairs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write each output as PNG next to the CSV.
        #[arg(long)]
        dump_images: bool,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Train and evaluate several variants of one config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names.
        #[arg(long, default_value = "no_ycc,no_sadm_lcat,no_lcat,no_sadm,full")]
        variants: String,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Time single-image inference.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Mosaic side length.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
    },
    /// Generate synthetic moire pairs.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mosaic side length.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, value_enum, default_value = "default")]
        ranges: Ranges,
        /// Directory of PNG content images; procedural content if absent.
        #[arg(long)]
        content: Option<PathBuf>,
    },
    /// Print the parameter count of a config's network.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_file(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            data,
            eval_data,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(d) = eval_data {
                cfg.eval_dir = Some(d);
            }
            let outcome = train(&cfg, Some(&out))?;
            print!("{}", outcome.report);
            println!("wrote {}", out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            dump_images,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (_, net, store) = load_model(&ck)?;
            let pairs = load_dataset(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| demoire::Error::io(&out, e))?;
            let t0 = std::time::Instant::now();
            let ev = evaluate(&net, &store, &pairs, dump_images.then_some(out.as_path()))?;
            let secs = t0.elapsed().as_secs_f64();
            write_eval_csv(&out.join(EVAL_CSV), &ev)?;
            let mut report = RunReport::new(net.variant.name(), store.num_scalars());
            report.train_steps = ck.step as usize;
            report.training_skipped = true;
            report.metrics = Some(ev.output);
            report.input_metrics = Some(ev.input);
            report.flops_per_image = ev.flops_per_image;
            report.ms_per_image = Some(1e3 * secs / pairs.len().max(1) as f64);
            report.phases.push(("eval".into(), Some(secs)));
            report.write_csv(&out.join(REPORT_CSV))?;
            print!("{report}");
        }
        Cmd::Ablate { config, variants, out } => {
            let cfg = load_config(&config)?;
            let vs = parse_variants(&variants)?;
            let runs = ablate(&cfg, &vs, Some(&out))?;
            println!("{:<14} {:>10} {:>9} {:>9} {:>7} {:>7}", "variant", "params", "psnr", "y_psnr", "ssim", "dE");
            for r in &runs {
                let rep = &r.outcome.report;
                match rep.metrics {
                    Some(m) => println!(
                        "{:<14} {:>10} {:>9.3} {:>9.3} {:>7.4} {:>7.3}",
                        r.variant.name(),
                        rep.params,
                        m.psnr_db,
                        m.y_psnr_db,
                        m.ssim,
                        m.delta_e
                    ),
                    None => println!("{:<14} {:>10}   (no eval_dir)", r.variant.name(), rep.params),
                }
            }
            println!("wrote {}", out.join(demoire::harness::ABLATION_CSV).display());
        }
        Cmd::Bench { ckpt, size, repeats } => {
            let (_, net, store) = load_model(&Checkpoint::load(&ckpt)?)?;
            let b = bench_inference(&net, &store, size, repeats)?;
            println!("size {0}x{0}, {1} warmup + {2} timed runs", b.size, b.warmup, b.repeats);
            println!("median {:.3} ms  p95 {:.3} ms", b.median_ms, b.p95_ms);
            println!("{:.3} GFLOPs per image", b.flops as f64 / 1e9);
            println!(
                "{} invocation(s) per image, {} image-domain round trips",
                b.invocations_per_image, b.image_round_trips
            );
        }
        Cmd::GenData {
            n,
            out,
            seed,
            size,
            ranges,
            content,
        } => {
            let content = match content {
                Some(dir) => ContentSource::Images(
                    load_content_dir(&dir)?
                        .into_iter()
                        .map(|(p, img)| (p.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned()), img))
                        .collect(),
                ),
                None => ContentSource::Procedural,
            };
            let opts = GenerateOptions {
                n,
                seed,
                width: size,
                height: size,
                ranges: match ranges {
                    Ranges::Default => SimRanges::default(),
                    Ranges::Heldout => SimRanges::held_out(),
                },
                content,
                ..Default::default()
            };
            let rows = dataset_generate(&out, &opts)?;
            let mean = rows.iter().map(|r| r.degraded_psnr).sum::<f64>() / rows.len().max(1) as f64;
            println!("wrote {} pairs to {} (mean input PSNR {mean:.2} dB)", rows.len(), out.display());
        }
        Cmd::Params { config } => {
            let cfg = load_config(&config)?;
            println!("{}", count_params(&cfg.net)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
