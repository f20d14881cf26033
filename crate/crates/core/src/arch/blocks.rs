//! Per-stream encoder blocks.

use crate::error::Result;
use crate::tensor::{Activation, Init, ParamId, Real, ScanOrder, Tape, Var};

use super::layers::{hidden_width, Builder, Conv, DwConv, Norm};

/// Gated MLP: `x + W2 (F1 * dw(F2))` with `F1, F2 = split(W1 LN(x))`.
#[derive(Clone, Debug)]
pub struct Gmlp {
    pub norm: Norm,
    pub expand: Conv,
    pub dw: DwConv,
    pub project: Conv,
}

impl Gmlp {
    pub fn new(b: &mut Builder<'_>, c: usize, expansion: f64) -> Result<Self> {
        let hidden = hidden_width(c, expansion);
        Ok(Self {
            norm: Norm::new(b, "norm", c)?,
            expand: Conv::new(b, "expand", c, 2 * hidden)?,
            dw: DwConv::new(b, "dw", hidden, 1)?,
            project: Conv::zeros(b, "project", hidden, c)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(t, x)?;
        let e = self.expand.forward(t, n)?;
        let halves = t.split_channels(e, 2)?;
        let d = self.dw.forward(t, halves[1])?;
        let g = t.mul(halves[0], d)?;
        let p = self.project.forward(t, g)?;
        t.add(x, p)
    }
}

/// Input-dependent parameters of one scan direction.
#[derive(Clone, Debug)]
pub struct ScanDirection {
    pub order: ScanOrder,
    /// Low-rank step-size projection `c -> r -> c`, softplus on the output.
    pub delta_down: Conv,
    pub delta_up: Conv,
    pub b_proj: Conv,
    pub c_proj: Conv,
    /// `(c, N, 1, 1)`, `A = -exp(a_log)`.
    pub a_log: ParamId,
}

/// Four-direction selective state-space scan in residual form.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub norm: Norm,
    pub in_proj: Conv,
    pub directions: Vec<ScanDirection>,
    pub out_proj: Conv,
}

pub fn delta_rank(c: usize) -> usize {
    c.div_ceil(8).max(1)
}

impl Ss2d {
    pub fn new(b: &mut Builder<'_>, c: usize, state: usize) -> Result<Self> {
        let norm = Norm::new(b, "norm", c)?;
        let in_proj = Conv::new(b, "in_proj", c, c)?;
        let rank = delta_rank(c);
        let mut directions = Vec::with_capacity(4);
        for (k, order) in ScanOrder::ALL.into_iter().enumerate() {
            let mut s = b.sub(&format!("dir{k}"));
            let delta_down = Conv::new(&mut s, "delta_down", c, rank)?;
            let delta_up = Conv::new(&mut s, "delta_up", rank, c)?;
            // Step sizes start near softplus(-2) ~ 0.13.
            let bias = delta_up.b.expect("conv has bias");
            s.store().tensor_mut(bias).data_mut().iter_mut().for_each(|v| *v = -2.0);
            let b_proj = Conv::new(&mut s, "b_proj", c, state)?;
            let c_proj = Conv::new(&mut s, "c_proj", c, state)?;
            let a_log = s.param("a_log", [c, state, 1, 1], Init::Zeros)?;
            // A = -(1, 2, ..., N) per channel.
            let data = s.store().tensor_mut(a_log).data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v = ((i % state) as f32 + 1.0).ln();
            }
            directions.push(ScanDirection {
                order,
                delta_down,
                delta_up,
                b_proj,
                c_proj,
                a_log,
            });
        }
        Ok(Self {
            norm,
            in_proj,
            directions,
            out_proj: Conv::zeros(b, "out_proj", c, c)?,
        })
    }

    /// Sum of the four directional scans, before the output projection.
    pub fn scan_sum<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(t, x)?;
        let u = self.in_proj.forward(t, n)?;
        let mut acc: Option<Var> = None;
        for d in &self.directions {
            let lo = d.delta_down.forward(t, u)?;
            let hi = d.delta_up.forward(t, lo)?;
            let delta = t.activation(hi, Activation::Softplus);
            let bm = d.b_proj.forward(t, u)?;
            let cm = d.c_proj.forward(t, u)?;
            let a = t.param(d.a_log);
            let y = t.selective_scan(u, delta, bm, cm, a, d.order)?;
            acc = Some(match acc {
                None => y,
                Some(s) => t.add(s, y)?,
            });
        }
        Ok(acc.expect("four directions"))
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let y = self.scan_sum(t, x)?;
        let p = self.out_proj.forward(t, y)?;
        t.add(x, p)
    }
}

/// Raw-stream block: `GMLP(SS2D(x))`.
#[derive(Clone, Debug)]
pub struct Cmb {
    pub ss2d: Ss2d,
    pub gmlp: Gmlp,
}

impl Cmb {
    pub fn new(b: &mut Builder<'_>, c: usize, state: usize, expansion: f64) -> Result<Self> {
        Ok(Self {
            ss2d: Ss2d::new(&mut b.sub("ss2d"), c, state)?,
            gmlp: Gmlp::new(&mut b.sub("gmlp"), c, expansion)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = self.ss2d.forward(t, x)?;
        self.gmlp.forward(t, s)
    }
}

/// Guidance-stream block: dilated depthwise context plus channel attention.
///
/// `x + P(w * F)` where `F = GELU(fuse([dw_1(u), dw_2(u), dw_3(u)]))`,
/// `u = W LN(x)` and `w = sigmoid(W_b ReLU(W_a avgpool(F)))`.
#[derive(Clone, Debug)]
pub struct Cgb {
    pub norm: Norm,
    pub in_proj: Conv,
    pub dilated: Vec<DwConv>,
    pub fuse: Conv,
    pub squeeze: Conv,
    pub excite: Conv,
    pub out_proj: Conv,
}

pub const CGB_DILATIONS: [usize; 3] = [1, 2, 3];

pub struct CgbTrace {
    pub out: Var,
    /// Channel weights `(n, c, 1, 1)`.
    pub weights: Var,
}

impl Cgb {
    pub fn new(b: &mut Builder<'_>, c: usize) -> Result<Self> {
        let norm = Norm::new(b, "norm", c)?;
        let in_proj = Conv::new(b, "in_proj", c, c)?;
        let dilated = CGB_DILATIONS
            .iter()
            .map(|&d| DwConv::new(b, &format!("dw_d{d}"), c, d))
            .collect::<Result<Vec<_>>>()?;
        let squeeze_c = c.div_ceil(4).max(1);
        Ok(Self {
            norm,
            in_proj,
            dilated,
            fuse: Conv::new(b, "fuse", 3 * c, c)?,
            squeeze: Conv::new(b, "squeeze", c, squeeze_c)?,
            excite: Conv::new(b, "excite", squeeze_c, c)?,
            out_proj: Conv::zeros(b, "out_proj", c, c)?,
        })
    }

    pub fn trace<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<CgbTrace> {
        let n = self.norm.forward(t, x)?;
        let u = self.in_proj.forward(t, n)?;
        let mut branches = Vec::with_capacity(self.dilated.len());
        for dw in &self.dilated {
            branches.push(dw.forward(t, u)?);
        }
        let cat = t.concat_channels(&branches)?;
        let f = self.fuse.forward(t, cat)?;
        let f = t.gelu(f);
        let pooled = t.global_avg_pool(f);
        let s = self.squeeze.forward(t, pooled)?;
        let s = t.relu(s);
        let e = self.excite.forward(t, s)?;
        let weights = t.sigmoid(e);
        let scaled = t.scale_channels(f, weights)?;
        let p = self.out_proj.forward(t, scaled)?;
        let out = t.add(x, p)?;
        Ok(CgbTrace { out, weights })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(t, x)?.out)
    }
}
