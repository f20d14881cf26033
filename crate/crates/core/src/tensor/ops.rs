//! Slice-level kernels shared by the tape's forward and backward passes.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
    Softplus,
}

/// Raster order of a selective scan over an `h x w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::RowForward,
        ScanOrder::RowBackward,
        ScanOrder::ColForward,
        ScanOrder::ColBackward,
    ];

    /// Pixel index visited at step `t`.
    #[inline]
    pub fn pixel(self, t: usize, h: usize, w: usize) -> usize {
        let len = h * w;
        match self {
            ScanOrder::RowForward => t,
            ScanOrder::RowBackward => len - 1 - t,
            ScanOrder::ColForward => (t % h) * w + t / h,
            ScanOrder::ColBackward => {
                let t = len - 1 - t;
                (t % h) * w + t / h
            }
        }
    }
}

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (x * T::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    let cdf = half * (T::one() + (x * T::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn activation_forward<T: Real>(kind: Activation, x: &[T]) -> Vec<T> {
    match kind {
        Activation::Gelu => x.iter().map(|&v| gelu(v)).collect(),
        Activation::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
        Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Softplus => x.iter().map(|&v| softplus(v)).collect(),
    }
}

/// `dx += dy * f'(x)`; `y` is the saved forward output.
pub(crate) fn activation_backward<T: Real>(
    kind: Activation,
    x: &[T],
    y: &[T],
    dy: &[T],
    dx: &mut [T],
) {
    match kind {
        Activation::Gelu => {
            for i in 0..dx.len() {
                dx[i] += dy[i] * gelu_grad(x[i]);
            }
        }
        Activation::Relu => {
            for i in 0..dx.len() {
                if x[i] > T::zero() {
                    dx[i] += dy[i];
                }
            }
        }
        Activation::Sigmoid => {
            for i in 0..dx.len() {
                dx[i] += dy[i] * y[i] * (T::one() - y[i]);
            }
        }
        Activation::Softplus => {
            for i in 0..dx.len() {
                dx[i] += dy[i] * sigmoid(x[i]);
            }
        }
    }
}

/// Depthwise 3x3 correlation with zero padding equal to the dilation.
/// `x`, `out`: `c x h x w` planes for one batch item; `w`: `c x 9`.
pub(crate) fn dwconv3x3_forward<T: Real>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    c: usize,
    h: usize,
    wd: usize,
    dil: usize,
) {
    let plane = h * wd;
    for ch in 0..c {
        let xp = &x[ch * plane..(ch + 1) * plane];
        let op = &mut out[ch * plane..(ch + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let k = w[ch * 9 + ky * 3 + kx];
                if k == T::zero() {
                    continue;
                }
                let dy = (ky as isize - 1) * dil as isize;
                let dx = (kx as isize - 1) * dil as isize;
                let (y0, y1) = valid_range(h, dy);
                let (x0, x1) = valid_range(wd, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let orow = &mut op[y * wd..(y + 1) * wd];
                    let irow = &xp[sy * wd..(sy + 1) * wd];
                    for xx in x0..x1 {
                        orow[xx] += k * irow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv3x3_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    c: usize,
    h: usize,
    wd: usize,
    dil: usize,
) {
    let plane = h * wd;
    let mut dx = dx;
    let mut dw = dw;
    for ch in 0..c {
        let xp = &x[ch * plane..(ch + 1) * plane];
        let gp = &dout[ch * plane..(ch + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let dy = (ky as isize - 1) * dil as isize;
                let ddx = (kx as isize - 1) * dil as isize;
                let (y0, y1) = valid_range(h, dy);
                let (x0, x1) = valid_range(wd, ddx);
                let k = w[ch * 9 + ky * 3 + kx];
                let mut acc = T::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    for xx in x0..x1 {
                        let sx = (xx as isize + ddx) as usize;
                        let g = gp[y * wd + xx];
                        acc += g * xp[sy * wd + sx];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[ch * plane + sy * wd + sx] += g * k;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[ch * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Output rows `y` such that `y + off` is inside `0..len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

/// Hidden-state trajectories saved by a selective scan for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ScanSaved<T> {
    /// `n x ch x L x N`, indexed by scan step.
    pub hidden: Vec<T>,
}

/// Discretized selective state-space scan.
///
/// Sequence layout: `u`, `delta`: `n x ch x L`; `bm`, `cm`: `n x N x L`;
/// `a_log`: `ch x N` with `A = -exp(a_log)`. Zero-order hold:
/// `abar = exp(delta * A)`, `bbar = (abar - 1) / A * B`,
/// `h_t = abar * h_{t-1} + bbar * u_t`, `y_t = sum_s C_t[s] * h_t[s]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward<T: Real>(
    u: &[T],
    delta: &[T],
    bm: &[T],
    cm: &[T],
    a_log: &[T],
    n: usize,
    ch: usize,
    ns: usize,
    h: usize,
    w: usize,
    order: ScanOrder,
) -> (Vec<T>, ScanSaved<T>) {
    let len = h * w;
    let mut y = vec![T::zero(); n * ch * len];
    let mut hidden = vec![T::zero(); n * ch * len * ns];
    let pix: Vec<usize> = (0..len).map(|t| order.pixel(t, h, w)).collect();
    let mut bt = vec![T::zero(); len * ns];
    let mut ct = vec![T::zero(); len * ns];
    let mut state = vec![T::zero(); ns];
    let mut amat = vec![T::zero(); ns];
    for b in 0..n {
        gather_by_step(&bm[b * ns * len..(b + 1) * ns * len], &pix, ns, &mut bt);
        gather_by_step(&cm[b * ns * len..(b + 1) * ns * len], &pix, ns, &mut ct);
        for c in 0..ch {
            let base = (b * ch + c) * len;
            for s in 0..ns {
                amat[s] = -a_log[c * ns + s].exp();
            }
            state.iter_mut().for_each(|v| *v = T::zero());
            let hbase = (b * ch + c) * len * ns;
            for t in 0..len {
                let p = pix[t];
                let dt = delta[base + p];
                let uu = u[base + p];
                let mut acc = T::zero();
                for s in 0..ns {
                    let a = (dt * amat[s]).exp();
                    let beta = (a - T::one()) / amat[s];
                    let hs = a * state[s] + beta * bt[t * ns + s] * uu;
                    state[s] = hs;
                    hidden[hbase + t * ns + s] = hs;
                    acc += ct[t * ns + s] * hs;
                }
                y[base + p] = acc;
            }
        }
    }
    (y, ScanSaved { hidden })
}

pub(crate) struct ScanGrads<'a, T> {
    pub du: Option<&'a mut [T]>,
    pub ddelta: Option<&'a mut [T]>,
    pub db: Option<&'a mut [T]>,
    pub dc: Option<&'a mut [T]>,
    pub da_log: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Real>(
    u: &[T],
    delta: &[T],
    bm: &[T],
    cm: &[T],
    a_log: &[T],
    saved: &ScanSaved<T>,
    dy: &[T],
    grads: ScanGrads<'_, T>,
    n: usize,
    ch: usize,
    ns: usize,
    h: usize,
    w: usize,
    order: ScanOrder,
) {
    let ScanGrads {
        mut du,
        mut ddelta,
        mut db,
        mut dc,
        mut da_log,
    } = grads;
    let len = h * w;
    let pix: Vec<usize> = (0..len).map(|t| order.pixel(t, h, w)).collect();
    let mut bt = vec![T::zero(); len * ns];
    let mut ct = vec![T::zero(); len * ns];
    let mut dbt = vec![T::zero(); len * ns];
    let mut dct = vec![T::zero(); len * ns];
    let mut carry = vec![T::zero(); ns];
    let mut amat = vec![T::zero(); ns];
    let mut da = vec![T::zero(); ns];
    for b in 0..n {
        gather_by_step(&bm[b * ns * len..(b + 1) * ns * len], &pix, ns, &mut bt);
        gather_by_step(&cm[b * ns * len..(b + 1) * ns * len], &pix, ns, &mut ct);
        dbt.iter_mut().for_each(|v| *v = T::zero());
        dct.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..ch {
            let base = (b * ch + c) * len;
            let hbase = (b * ch + c) * len * ns;
            for s in 0..ns {
                amat[s] = -a_log[c * ns + s].exp();
            }
            carry.iter_mut().for_each(|v| *v = T::zero());
            da.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let p = pix[t];
                let dt = delta[base + p];
                let uu = u[base + p];
                let g_y = dy[base + p];
                let mut du_acc = T::zero();
                let mut ddt_acc = T::zero();
                for s in 0..ns {
                    let h_t = saved.hidden[hbase + t * ns + s];
                    let h_prev = if t > 0 {
                        saved.hidden[hbase + (t - 1) * ns + s]
                    } else {
                        T::zero()
                    };
                    let am = amat[s];
                    let a = (dt * am).exp();
                    let beta = (a - T::one()) / am;
                    let bs = bt[t * ns + s];
                    dct[t * ns + s] += g_y * h_t;
                    let g = carry[s] + g_y * ct[t * ns + s];
                    let g_a = g * h_prev;
                    let g_beta = g * bs * uu;
                    dbt[t * ns + s] += g * beta * uu;
                    du_acc += g * beta * bs;
                    ddt_acc += g_a * am * a + g_beta * a;
                    da[s] += g_a * dt * a + g_beta * (dt * a * am - (a - T::one())) / (am * am);
                    carry[s] = g * a;
                }
                if let Some(du) = du.as_deref_mut() {
                    du[base + p] += du_acc;
                }
                if let Some(dd) = ddelta.as_deref_mut() {
                    dd[base + p] += ddt_acc;
                }
            }
            if let Some(dal) = da_log.as_deref_mut() {
                for s in 0..ns {
                    dal[c * ns + s] += da[s] * amat[s];
                }
            }
        }
        if let Some(db) = db.as_deref_mut() {
            scatter_by_step(&dbt, &pix, ns, &mut db[b * ns * len..(b + 1) * ns * len]);
        }
        if let Some(dc) = dc.as_deref_mut() {
            scatter_by_step(&dct, &pix, ns, &mut dc[b * ns * len..(b + 1) * ns * len]);
        }
    }
}

/// `src`: `ns x L` planes; `dst[t * ns + s] = src[s][pix[t]]`.
fn gather_by_step<T: Real>(src: &[T], pix: &[usize], ns: usize, dst: &mut [T]) {
    let len = pix.len();
    for (t, &p) in pix.iter().enumerate() {
        for s in 0..ns {
            dst[t * ns + s] = src[s * len + p];
        }
    }
}

fn scatter_by_step<T: Real>(src: &[T], pix: &[usize], ns: usize, dst: &mut [T]) {
    let len = pix.len();
    for (t, &p) in pix.iter().enumerate() {
        for s in 0..ns {
            dst[s * len + p] += src[t * ns + s];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_orders_are_permutations() {
        let (h, w) = (3, 5);
        for order in ScanOrder::ALL {
            let mut seen = vec![false; h * w];
            for t in 0..h * w {
                seen[order.pixel(t, h, w)] = true;
            }
            assert!(seen.iter().all(|&s| s), "{order:?}");
        }
        assert_eq!(ScanOrder::ColForward.pixel(1, h, w), w);
        assert_eq!(ScanOrder::RowBackward.pixel(0, h, w), h * w - 1);
    }

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(activation_forward(Activation::Relu, &[-1.0f64, 2.0]), vec![0.0, 2.0]);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-800.0f64) >= 0.0 && softplus(800.0f64) == 800.0);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
