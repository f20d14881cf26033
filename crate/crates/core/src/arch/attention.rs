//! Cross-stream fusion (SADM) and the decoder transformer (LCAT).
//!
//! Attention is transposed: per head, the `d x d` channel similarity of
//! spatially L2-normalized queries and keys, with `d = c / heads`. Logits are
//! `(Q K^T / sqrt(d)) * tau` with one learnable `tau` per head, initialized to
//! `sqrt(d)`.
//!
//! Pathways are named by query source: `A_raw->ycc = softmax(Q_raw K_ycc^T) V_ycc`
//! and `A_ycc->raw = softmax(Q_ycc K_raw^T) V_raw`.

use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, Real, Tape, Var};

use super::layers::{Builder, Conv, Ffn, Norm};

const QK_NORM_EPS: f64 = 1e-12;

/// Output and row-stochastic attention matrix of one attention pass.
pub struct AttentionOut {
    pub out: Var,
    /// `(n, heads, d, d)`.
    pub attn: Var,
}

pub fn temperature(b: &mut Builder<'_>, c: usize, heads: usize) -> Result<ParamId> {
    let d = (c / heads) as f64;
    b.param("temperature", [heads, 1, 1, 1], Init::Const(d.sqrt()))
}

/// Transposed multi-head attention of `q`, `k`, `v`, all `(n, c, h, w)`.
pub fn channel_attention<T: Real>(
    t: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    tau: Var,
    heads: usize,
) -> Result<AttentionOut> {
    let c = t.shape(q)[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Shape(format!("{c} channels do not split into {heads} heads")));
    }
    let d = (c / heads) as f64;
    let qn = t.normalize_spatial(q, QK_NORM_EPS);
    let kn = t.normalize_spatial(k, QK_NORM_EPS);
    let g = t.head_gram(qn, kn, heads)?;
    let s = t.scale_heads(g, tau, 1.0 / d.sqrt())?;
    let attn = t.softmax_lastdim(s);
    let out = t.head_apply(attn, v, heads)?;
    Ok(AttentionOut { out, attn })
}

/// Spatial fusion gate `alpha = sigmoid(C2(GELU(C1([a, b]))))`, one channel.
#[derive(Clone, Debug)]
pub struct DynamicGate {
    pub c1: Conv,
    pub c2: Conv,
}

impl DynamicGate {
    pub fn new(b: &mut Builder<'_>, c: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv::new(b, "c1", 2 * c, c)?,
            c2: Conv::new(b, "c2", c, 1)?,
        })
    }

    /// `alpha` as `(n, 1, h, w)`.
    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
        if t.shape(a) != t.shape(b) {
            return Err(Error::Shape(format!("gate inputs {:?} vs {:?}", t.shape(a), t.shape(b))));
        }
        let cat = t.concat_channels(&[a, b])?;
        let h = self.c1.forward(t, cat)?;
        let h = t.gelu(h);
        let o = self.c2.forward(t, h)?;
        Ok(t.sigmoid(o))
    }
}

/// `sigmoid(W2 ReLU(W1 x))` with full `c x h x w` output.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub c1: Conv,
    pub c2: Conv,
}

impl Modulation {
    pub fn new(b: &mut Builder<'_>, c: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv::new(b, "c1", c, c)?,
            c2: Conv::new(b, "c2", c, c)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.c1.forward(t, x)?;
        let h = t.relu(h);
        let o = self.c2.forward(t, h)?;
        Ok(t.sigmoid(o))
    }
}

#[derive(Clone, Debug)]
pub struct Sadm {
    pub heads: usize,
    pub norm_raw: Norm,
    pub norm_ycc: Norm,
    pub q_raw: Conv,
    pub kv_raw: Conv,
    pub q_ycc: Conv,
    pub kv_ycc: Conv,
    pub temperature: ParamId,
    pub gate: DynamicGate,
    pub project: Conv,
    pub ffn: Ffn,
    pub mod_raw: Modulation,
    pub mod_ycc: Modulation,
}

/// Every intermediate of one SADM pass.
pub struct SadmTrace {
    pub raw: Var,
    pub ycc: Var,
    pub alpha: Var,
    pub a_raw_to_ycc: AttentionOut,
    pub a_ycc_to_raw: AttentionOut,
    pub fused: Var,
    pub fuse: Var,
    pub m_raw: Var,
    pub m_ycc: Var,
}

impl Sadm {
    pub fn new(b: &mut Builder<'_>, c: usize, heads: usize, ffn_expansion: f64) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
        }
        Ok(Self {
            heads,
            norm_raw: Norm::new(b, "norm_raw", c)?,
            norm_ycc: Norm::new(b, "norm_ycc", c)?,
            q_raw: Conv::new(b, "q_raw", c, c)?,
            kv_raw: Conv::new(b, "kv_raw", c, 2 * c)?,
            q_ycc: Conv::new(b, "q_ycc", c, c)?,
            kv_ycc: Conv::new(b, "kv_ycc", c, 2 * c)?,
            temperature: temperature(b, c, heads)?,
            gate: DynamicGate::new(&mut b.sub("gate"), c)?,
            project: Conv::new(b, "project", c, c)?,
            ffn: Ffn::new(b, "ffn", c, ffn_expansion, false)?,
            mod_raw: Modulation::new(&mut b.sub("mod_raw"), c)?,
            mod_ycc: Modulation::new(&mut b.sub("mod_ycc"), c)?,
        })
    }

    pub fn trace<T: Real>(&self, t: &mut Tape<'_, T>, f_raw: Var, f_ycc: Var) -> Result<SadmTrace> {
        if t.shape(f_raw) != t.shape(f_ycc) {
            return Err(Error::Shape(format!(
                "SADM inputs {:?} vs {:?}",
                t.shape(f_raw),
                t.shape(f_ycc)
            )));
        }
        let c = t.shape(f_raw)[1];
        let nr = self.norm_raw.forward(t, f_raw)?;
        let ny = self.norm_ycc.forward(t, f_ycc)?;
        let q_raw = self.q_raw.forward(t, nr)?;
        let kv_raw = self.kv_raw.forward(t, nr)?;
        let kv_raw = t.split_channels(kv_raw, 2)?;
        let q_ycc = self.q_ycc.forward(t, ny)?;
        let kv_ycc = self.kv_ycc.forward(t, ny)?;
        let kv_ycc = t.split_channels(kv_ycc, 2)?;
        let tau = t.param(self.temperature);
        let a_raw_to_ycc = channel_attention(t, q_raw, kv_ycc[0], kv_ycc[1], tau, self.heads)?;
        let a_ycc_to_raw = channel_attention(t, q_ycc, kv_raw[0], kv_raw[1], tau, self.heads)?;

        let alpha1 = self.gate.forward(t, nr, ny)?;
        let alpha = t.repeat_channels(alpha1, c)?;
        let one_minus = t.affine(alpha, -1.0, 1.0);
        let x = t.mul(alpha, a_ycc_to_raw.out)?;
        let y = t.mul(one_minus, a_raw_to_ycc.out)?;
        let fused = t.add(x, y)?;

        let p = self.project.forward(t, fused)?;
        let refined = self.ffn.forward(t, p)?;
        let fuse = t.add(refined, fused)?;

        let m_raw = self.mod_raw.forward(t, fuse)?;
        let m_ycc = self.mod_ycc.forward(t, fuse)?;
        let r = t.mul(f_raw, m_raw)?;
        let raw = t.add(r, fuse)?;
        let y = t.mul(f_ycc, m_ycc)?;
        let ycc = t.add(y, fuse)?;
        Ok(SadmTrace {
            raw,
            ycc,
            alpha: alpha1,
            a_raw_to_ycc,
            a_ycc_to_raw,
            fused,
            fuse,
            m_raw,
            m_ycc,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, f_raw: Var, f_ycc: Var) -> Result<(Var, Var)> {
        let tr = self.trace(t, f_raw, f_ycc)?;
        Ok((tr.raw, tr.ycc))
    }
}

/// Stand-in for SADM in ablations: `f = W [raw, ycc]`, both streams get `+ f`.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub fuse: Conv,
}

impl ConcatFusion {
    pub fn new(b: &mut Builder<'_>, c: usize) -> Result<Self> {
        Ok(Self {
            fuse: Conv::new(b, "fuse", 2 * c, c)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, f_raw: Var, f_ycc: Var) -> Result<(Var, Var)> {
        let cat = t.concat_channels(&[f_raw, f_ycc])?;
        let f = self.fuse.forward(t, cat)?;
        Ok((t.add(f_raw, f)?, t.add(f_ycc, f)?))
    }
}

#[derive(Clone, Debug)]
pub struct Lcat {
    pub heads: usize,
    pub norm_rgb: Norm,
    pub norm_ycc: Norm,
    pub gate: Modulation,
    pub qk: Conv,
    pub v: Conv,
    pub temperature: ParamId,
    pub project: Conv,
    pub norm_ffn: Norm,
    pub ffn: Ffn,
}

pub struct LcatTrace {
    pub out: Var,
    pub gate: Var,
    pub attention: AttentionOut,
    pub fused: Var,
}

impl Lcat {
    pub fn new(b: &mut Builder<'_>, c: usize, heads: usize, ffn_expansion: f64) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
        }
        Ok(Self {
            heads,
            norm_rgb: Norm::new(b, "norm_rgb", c)?,
            norm_ycc: Norm::new(b, "norm_ycc", c)?,
            gate: Modulation::new(&mut b.sub("gate"), c)?,
            qk: Conv::new(b, "qk", c, 2 * c)?,
            v: Conv::new(b, "v", c, c)?,
            temperature: temperature(b, c, heads)?,
            project: Conv::zeros(b, "project", c, c)?,
            norm_ffn: Norm::new(b, "norm_ffn", c)?,
            ffn: Ffn::new(b, "ffn", c, ffn_expansion, true)?,
        })
    }

    pub fn trace<T: Real>(&self, t: &mut Tape<'_, T>, f_rgb: Var, f_ycc: Var) -> Result<LcatTrace> {
        if t.shape(f_rgb) != t.shape(f_ycc) {
            return Err(Error::Shape(format!(
                "LCAT inputs {:?} vs {:?}",
                t.shape(f_rgb),
                t.shape(f_ycc)
            )));
        }
        let nr = self.norm_rgb.forward(t, f_rgb)?;
        let ny = self.norm_ycc.forward(t, f_ycc)?;
        let gate = self.gate.forward(t, nr)?;
        let gy = t.mul(ny, gate)?;
        let fused = t.add(gy, nr)?;
        let qk = self.qk.forward(t, fused)?;
        let qk = t.split_channels(qk, 2)?;
        let v = self.v.forward(t, nr)?;
        let tau = t.param(self.temperature);
        let attention = channel_attention(t, qk[0], qk[1], v, tau, self.heads)?;
        let p = self.project.forward(t, attention.out)?;
        let a = t.add(f_rgb, p)?;
        let n = self.norm_ffn.forward(t, a)?;
        let f = self.ffn.forward(t, n)?;
        let out = t.add(a, f)?;
        Ok(LcatTrace {
            out,
            gate,
            attention,
            fused,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, f_rgb: Var, f_ycc: Var) -> Result<Var> {
        Ok(self.trace(t, f_rgb, f_ycc)?.out)
    }
}
