use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Upper bound on probed scalar entries across all parameters.
    pub max_probes: usize,
    /// Denominator floor for the relative error, so exact zeros compare sanely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes: 10_000,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` records a scalar loss on the tape it is given, reading parameters from
/// that tape's store. Probed entries are sampled uniformly when the store has
/// more than `max_probes` scalars.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let base = eval(store, &f)?;
    let again = eval(store, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic ({base:e} vs {again:e})"
        )));
    }

    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let sizes: Vec<usize> = store.iter().map(|(_, p)| p.tensor.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks: Vec<usize> = if total <= opts.max_probes {
        (0..total).collect()
    } else {
        sample(&mut rng, total, opts.max_probes).into_vec()
    };
    picks.sort_unstable();

    let mut work = store.clone();
    let mut report = Vec::with_capacity(store.len());
    let mut offset = 0;
    let mut pi = 0;
    for ((id, p), &len) in store.iter().zip(&sizes) {
        let mut check = ParamCheck {
            name: p.name.clone(),
            probes: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        let analytic = grads.param(id);
        while pi < picks.len() && picks[pi] < offset + len {
            let j = picks[pi] - offset;
            pi += 1;
            let orig = p.tensor.data()[j];
            work.tensor_mut(id).data_mut()[j] = orig + opts.step;
            let plus = eval(&work, &f)?;
            work.tensor_mut(id).data_mut()[j] = orig - opts.step;
            let minus = eval(&work, &f)?;
            work.tensor_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |g| g[j]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.abs_floor);
            check.probes += 1;
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        offset += len;
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}
