//! Training loop.
//!
//! The objective is `L1(srgb, gt) + lambda_aux * L1(aux, aux_gt)`, the second
//! term only for variants with a guidance stream. Every random choice is
//! drawn from ChaCha streams keyed by the seed and the step or epoch, so a
//! run is a pure function of (config, data) and resuming from a checkpoint
//! continues the exact same sequence.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{augmented_sample, stack, Sample};
use super::eval::{evaluate, write_eval_csv, Stopwatch, EVAL_CSV};
use super::report::RunReport;
use crate::arch::DsdNet;
use crate::error::{Error, Result};
use crate::sim::{load_dataset, LoadedPair};
use crate::tensor::{cosine_lr, AdamW, ParamStore, Tape};

const ORDER_SALT: u64 = 0x6f72_6465_72;
const CROP_SALT: u64 = 0x6372_6f70;

pub const LOSS_CSV: &str = "losses.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub aux: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: DsdNet,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pairs: Vec<LoadedPair>,
    epoch: Option<(usize, Vec<usize>)>,
    /// Iterations completed.
    pub step: usize,
    pub log: Vec<StepLog>,
}

pub fn load_training_data(dir: &Path) -> Result<Vec<LoadedPair>> {
    let pairs = load_dataset(dir)?;
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("{}: dataset has no pairs", dir.display())));
    }
    Ok(pairs)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, pairs: Vec<LoadedPair>) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Invalid("no training pairs".into()));
        }
        for p in &pairs {
            if p.input.width < cfg.crop_size || p.input.height < cfg.crop_size {
                return Err(Error::Config(format!(
                    "pair {} is {}x{}, smaller than crop_size {}",
                    p.meta.index, p.input.width, p.input.height, cfg.crop_size
                )));
            }
        }
        let (net, store) = DsdNet::new(&cfg.net, cfg.seed)?;
        let opt = AdamW::new(cfg.adamw(), &store);
        Ok(Self {
            cfg,
            net,
            store,
            opt,
            pairs,
            epoch: None,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_into(&mut self.store)?;
        if let Some(o) = &ckpt.optimizer {
            self.opt.state = o.clone();
        }
        self.step = ckpt.step as usize;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.cfg.to_text(), self.step as u64, Some(self.opt.state.clone()))
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, &self.cfg.schedule())
    }

    /// Pair index for the `k`-th sample drawn in the run.
    fn pair_for(&mut self, k: usize) -> usize {
        let n = self.pairs.len();
        let e = k / n;
        if self.epoch.as_ref().is_none_or(|(cur, _)| *cur != e) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ORDER_SALT);
            rng.set_stream(e as u64);
            order.shuffle(&mut rng);
            self.epoch = Some((e, order));
        }
        self.epoch.as_ref().expect("set above").1[k % n]
    }

    /// The batch for iteration `step`.
    pub fn batch(&mut self, step: usize) -> Result<Sample> {
        let b = self.cfg.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ CROP_SALT);
        rng.set_stream(step as u64);
        let mut items = Vec::with_capacity(b);
        for j in 0..b {
            let idx = self.pair_for(step * b + j);
            items.push(augmented_sample(&self.pairs[idx], self.cfg.crop_size, self.cfg.hflip, self.net.variant, &mut rng)?);
        }
        if items.len() == 1 {
            Ok(items.pop().expect("one item"))
        } else {
            stack(&items)
        }
    }

    /// Loss terms and gradients for `batch` at the current parameters. The
    /// gradients are left in the store.
    pub fn loss_and_grads(&mut self, batch: &Sample) -> Result<(f64, f64, f64)> {
        let use_aux = self.net.variant.has_guide() && self.cfg.lambda_aux > 0.0;
        let (loss, l1, aux, grads) = {
            let mut t = Tape::new(&self.store);
            let raw = t.constant(batch.raw.clone());
            let guide = t.constant(batch.guide.clone());
            let out = self.net.forward(&mut t, raw, guide)?;
            let l1 = t.l1_loss(out.srgb, &batch.gt)?;
            let l1v = t.value(l1).data()[0] as f64;
            let (loss, auxv) = if use_aux {
                let a = t.l1_loss(out.aux, &batch.aux_gt)?;
                let av = t.value(a).data()[0] as f64;
                let scaled = t.affine(a, self.cfg.lambda_aux, 0.0);
                (t.add(l1, scaled)?, av)
            } else {
                (l1, 0.0)
            };
            let lv = t.value(loss).data()[0] as f64;
            (lv, l1v, auxv, t.backward(loss)?)
        };
        self.store.zero_grad();
        self.store.accumulate(&grads);
        Ok((loss, l1, aux))
    }

    /// One iteration: batch, forward, backward, one optimizer update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let lr = self.lr_at(step);
        let batch = self.batch(step)?;
        let (loss, l1, aux) = self.loss_and_grads(&batch)?;
        let grad_norm = self.store.grad_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr, grad_norm });
        }
        self.opt.step(&mut self.store, lr)?;
        self.step += 1;
        let rec = StepLog {
            step,
            lr,
            loss,
            l1,
            aux,
            grad_norm,
        };
        self.log.push(rec);
        Ok(rec)
    }
}

/// Artifacts of a finished run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: RunReport,
    pub log: Vec<StepLog>,
    pub net: DsdNet,
    pub store: ParamStore<f32>,
}

/// Trains per `cfg`, writing checkpoints, the loss log and the report into
/// `out` when given.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let load = Stopwatch::start();
    let pairs = load_training_data(&cfg.data_dir)?;
    let eval_pairs = match &cfg.eval_dir {
        Some(d) => Some(load_dataset(d)?),
        None => None,
    };
    let load_s = load.seconds();
    let mut tr = Trainer::new(cfg.clone(), pairs)?;
    run(&mut tr, eval_pairs.as_deref(), out, load_s)
}

/// Runs `tr` to `total_steps` and evaluates on `eval_pairs`.
pub fn run(tr: &mut Trainer, eval_pairs: Option<&[LoadedPair]>, out: Option<&Path>, load_seconds: f64) -> Result<TrainOutcome> {
    let cfg = tr.cfg.clone();
    let mut loss_file = match out {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            fs::write(d.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(d, e))?;
            let p = d.join(LOSS_CSV);
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "step,lr,loss,l1,aux,grad_norm").map_err(|e| Error::io(&p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut report = RunReport::new(tr.net.variant.name(), tr.store.num_scalars());
    report.phases.push(("load".into(), Some(load_seconds)));

    let train_clock = Stopwatch::start();
    let start_step = tr.step;
    while tr.step < cfg.total_steps {
        let s = tr.train_step()?;
        if let Some((p, f)) = loss_file.as_mut() {
            writeln!(f, "{},{},{},{},{},{}", s.step, s.lr, s.loss, s.l1, s.aux, s.grad_norm).map_err(|e| Error::io(&*p, e))?;
        }
        if cfg.log_every > 0 && (s.step % cfg.log_every == 0 || tr.step == cfg.total_steps) {
            log::info!(
                "step {:>7}  lr {:.3e}  loss {:.5}  l1 {:.5}  aux {:.5}  |g| {:.3e}",
                s.step,
                s.lr,
                s.loss,
                s.l1,
                s.aux,
                s.grad_norm
            );
        } else {
            log::debug!("step {} loss {}", s.step, s.loss);
        }
        if let Some(d) = out {
            if cfg.checkpoint_every > 0 && tr.step.is_multiple_of(cfg.checkpoint_every) && tr.step < cfg.total_steps {
                tr.checkpoint().save(&step_path(d, tr.step))?;
            }
        }
    }
    let trained = tr.step - start_step;
    report.train_steps = tr.step;
    report.training_skipped = trained == 0;
    report.initial_loss = tr.log.first().map(|s| s.loss);
    report.final_loss = tr.log.last().map(|s| s.loss);
    report.phases.push((
        "train".into(),
        if trained == 0 { None } else { Some(train_clock.seconds()) },
    ));

    let checkpoint = tr.checkpoint();
    match eval_pairs {
        Some(pairs) => {
            let clock = Stopwatch::start();
            let ev = evaluate(&tr.net, &tr.store, pairs, None)?;
            let secs = clock.seconds();
            report.metrics = Some(ev.output);
            report.input_metrics = Some(ev.input);
            report.flops_per_image = ev.flops_per_image;
            report.ms_per_image = Some(1e3 * secs / pairs.len().max(1) as f64);
            report.phases.push(("eval".into(), Some(secs)));
            if let Some(d) = out {
                write_eval_csv(&d.join(EVAL_CSV), &ev)?;
            }
        }
        None => report.phases.push(("eval".into(), None)),
    }
    if let Some(d) = out {
        checkpoint.save(&d.join(FINAL_CKPT))?;
        report.write_csv(&d.join(REPORT_CSV))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        report,
        log: tr.log.clone(),
        net: tr.net.clone(),
        store: tr.store.clone(),
    })
}

pub fn step_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// Rebuilds the network described by a checkpoint and loads its weights.
pub fn load_model(ckpt: &Checkpoint) -> Result<(TrainConfig, DsdNet, ParamStore<f32>)> {
    let cfg = TrainConfig::from_text(&ckpt.config)?;
    let (net, mut store) = DsdNet::new(&cfg.net, cfg.seed)?;
    ckpt.load_into(&mut store)?;
    Ok((cfg, net, store))
}
