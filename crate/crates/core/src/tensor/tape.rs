use std::collections::HashMap;

use super::ops::{self, Activation, ScanGrads, ScanOrder, ScanSaved};
use super::{ParamId, ParamStore, Real, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Recording position on the tape.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    DwConv3x3 { x: Var, w: Var, dilation: usize },
    Downsample { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Narrow { x: Var, start: usize },
    Concat { parts: Vec<Var> },
    PixelShuffle { x: Var, r: usize },
    PixelUnshuffle { x: Var, r: usize },
    AvgPool { x: Var },
    ScaleChannels { x: Var, s: Var },
    RepeatChannels { x: Var },
    NormalizeSpatial { x: Var, inv_norm: Vec<T> },
    HeadGram { q: Var, k: Var, heads: usize },
    ScaleHeads { x: Var, tau: Var, factor: T },
    HeadApply { attn: Var, v: Var, heads: usize },
    Scan { u: Var, delta: Var, b: Var, c: Var, a_log: Var, order: ScanOrder, saved: ScanSaved<T> },
    Sum { x: Var },
    L1 { x: Var, target: Vec<T> },
    Mse { x: Var, target: Vec<T> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    shape: Shape,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward operations for reverse-mode differentiation.
///
/// A tape borrows the parameter store it reads from; gradients come back as
/// a [`Gradients`] value that the caller accumulates into the store.
pub struct Tape<'a, T: Real = f32> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    flops: u64,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    inputs: HashMap<Var, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient for an input created with `requires_grad = true`.
    pub fn input(&self, var: Var) -> Option<&[T]> {
        self.inputs.get(&var).map(|g| g.as_slice())
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(shape_err!("{op}: shapes {:?} and {:?} differ", a, b));
    }
    Ok(())
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            flops: 0,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Analytic floating-point operation count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.tensor(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Vars recorded so far, oldest first.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// True for inputs, constants and parameters.
    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf | Op::Param(_))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let shape = value.shape();
        self.nodes.push(Node {
            value: Some(value),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf for a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let shape = self.store.tensor(id).shape();
        self.nodes.push(Node {
            value: None,
            shape,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, ci, h, wd] = self.shape(x);
        let ws = self.shape(w);
        if ws[1] != ci || ws[2] != 1 || ws[3] != 1 {
            return Err(shape_err!(
                "conv1x1: weight {:?} does not accept {} input channels",
                ws,
                ci
            ));
        }
        let co = ws[0];
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != co {
                return Err(shape_err!("conv1x1: bias {:?} for {} outputs", self.shape(b), co));
            }
        }
        let hw = h * wd;
        let mut out = vec![T::zero(); n * co * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                T::gemm(
                    co,
                    ci,
                    hw,
                    T::one(),
                    wv,
                    (ci, 1),
                    &xv[bi * ci * hw..(bi + 1) * ci * hw],
                    (hw, 1),
                    T::zero(),
                    &mut out[bi * co * hw..(bi + 1) * co * hw],
                    (hw, 1),
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for bi in 0..n {
                    for o in 0..co {
                        let bo = bv[o];
                        out[(bi * co + o) * hw..(bi * co + o + 1) * hw]
                            .iter_mut()
                            .for_each(|v| *v += bo);
                    }
                }
            }
        }
        self.flops += (2 * n * co * ci * hw) as u64;
        let need = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new([n, co, h, wd], out)?, Op::Conv1x1 { x, w, b }, need))
    }

    /// Depthwise 3x3 correlation, zero padding equal to `dilation`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let ws = self.shape(w);
        if ws != [c, 1, 3, 3] {
            return Err(shape_err!("dwconv3x3: weight {:?} for {} channels", ws, c));
        }
        if dilation == 0 {
            return Err(shape_err!("dwconv3x3: dilation must be >= 1"));
        }
        let plane = c * h * wd;
        let mut out = vec![T::zero(); n * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                ops::dwconv3x3_forward(
                    &xv[bi * plane..(bi + 1) * plane],
                    wv,
                    &mut out[bi * plane..(bi + 1) * plane],
                    c,
                    h,
                    wd,
                    dilation,
                );
            }
        }
        self.flops += (18 * n * plane) as u64;
        let need = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new([n, c, h, wd], out)?, Op::DwConv3x3 { x, w, dilation }, need))
    }

    /// Stride-2 convolution with a 2x2 kernel `w: (c_out, c_in, 2, 2)`.
    pub fn strided_downsample(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, ci, h, wd] = self.shape(x);
        let ws = self.shape(w);
        if ws[1] != ci || ws[2] != 2 || ws[3] != 2 {
            return Err(shape_err!("downsample: weight {:?} for {} channels", ws, ci));
        }
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(shape_err!("downsample: odd spatial size {}x{}", h, wd));
        }
        let co = ws[0];
        let unshuffled = pixel_unshuffle_data(self.value(x).data(), n, ci, h, wd, 2);
        let (h2, w2) = (h / 2, wd / 2);
        let hw = h2 * w2;
        let k = ci * 4;
        let mut out = vec![T::zero(); n * co * hw];
        {
            let wv = self.value(w).data();
            for bi in 0..n {
                T::gemm(
                    co,
                    k,
                    hw,
                    T::one(),
                    wv,
                    (k, 1),
                    &unshuffled[bi * k * hw..(bi + 1) * k * hw],
                    (hw, 1),
                    T::zero(),
                    &mut out[bi * co * hw..(bi + 1) * co * hw],
                    (hw, 1),
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for bi in 0..n {
                    for o in 0..co {
                        out[(bi * co + o) * hw..(bi * co + o + 1) * hw]
                            .iter_mut()
                            .for_each(|v| *v += bv[o]);
                    }
                }
            }
        }
        self.flops += (2 * n * co * k * hw) as u64;
        let need = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new([n, co, h2, w2], out)?, Op::Downsample { x, w, b }, need))
    }

    /// Normalize each pixel across channels, then apply `gamma`, `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        if c == 0 {
            return Err(shape_err!("layer_norm: zero channels"));
        }
        for p in [gamma, beta] {
            if self.shape(p).iter().product::<usize>() != c {
                return Err(shape_err!("layer_norm: affine {:?} for {} channels", self.shape(p), c));
            }
        }
        let hw = h * wd;
        let eps = T::from_f64c(eps);
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); n * c * hw];
        let mut mean = vec![T::zero(); hw];
        let mut var = vec![T::zero(); hw];
        for bi in 0..n {
            let xb = &xv[bi * c * hw..(bi + 1) * c * hw];
            mean.iter_mut().for_each(|m| *m = T::zero());
            var.iter_mut().for_each(|m| *m = T::zero());
            for ch in 0..c {
                for (m, &v) in mean.iter_mut().zip(&xb[ch * hw..(ch + 1) * hw]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ch in 0..c {
                for p in 0..hw {
                    let d = xb[ch * hw + p] - mean[p];
                    var[p] += d * d;
                }
            }
            let istd = &mut inv_std[bi * hw..(bi + 1) * hw];
            for p in 0..hw {
                istd[p] = T::one() / (var[p] * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let off = bi * c * hw + ch * hw;
                for p in 0..hw {
                    let xh = (xb[ch * hw + p] - mean[p]) * istd[p];
                    xhat[off + p] = xh;
                    out[off + p] = xh * gv[ch] + bv[ch];
                }
            }
        }
        self.flops += (8 * n * c * hw) as u64;
        let need = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new([n, c, h, wd], out)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            need,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x);
        let shape = t.shape();
        let out = ops::activation_forward(kind, t.data());
        self.flops += (out.len() * 4) as u64;
        let need = self.ng(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Act { x, kind }, need)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    /// Softmax along the last (width) axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let shape = t.shape();
        let row = shape[3];
        let mut out = t.data().to_vec();
        for r in out.chunks_mut(row.max(1)) {
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            r.iter_mut().for_each(|v| *v *= inv);
        }
        self.flops += (out.len() * 5) as u64;
        let need = self.ng(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Softmax { x }, need)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data)?;
        self.flops += t.len() as u64;
        Ok((t, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, need) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, need))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, need) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, need))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, need) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, need))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, sh) = (T::from_f64c(scale), T::from_f64c(shift));
        let t = self.value(x).map(|v| s * v + sh);
        self.flops += (2 * t.len()) as u64;
        let need = self.ng(x);
        self.push(t, Op::Affine { x, scale: s }, need)
    }

    /// Channels `start..start + len`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(shape_err!("narrow: {}..{} of {} channels", start, start + len, c));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for bi in 0..n {
            out.extend_from_slice(&xv[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let need = self.ng(x);
        Ok(self.push(Tensor::new([n, len, h, w], out)?, Op::Narrow { x, start }, need))
    }

    /// Split channels into `parts` equal groups.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(x)[1];
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(shape_err!("split: {} channels into {} parts", c, parts));
        }
        let each = c / parts;
        (0..parts).map(|i| self.narrow_channels(x, i * each, each)).collect()
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat: no inputs"))?;
        let [n, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(shape_err!("concat: {:?} vs {:?}", s, self.shape(first)));
            }
            c_total += s[1];
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for bi in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let need = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new([n, c_total, h, w], out)?,
            Op::Concat { parts: parts.to_vec() },
            need,
        ))
    }

    /// `(n, c*r*r, h, w) -> (n, c, h*r, w*r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if r == 0 || c % (r * r) != 0 {
            return Err(shape_err!("pixel_shuffle: {} channels, factor {}", c, r));
        }
        let out = pixel_shuffle_data(self.value(x).data(), n, c / (r * r), h, w, r);
        let need = self.ng(x);
        Ok(self.push(
            Tensor::new([n, c / (r * r), h * r, w * r], out)?,
            Op::PixelShuffle { x, r },
            need,
        ))
    }

    /// `(n, c, h*r, w*r) -> (n, c*r*r, h, w)`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(shape_err!("pixel_unshuffle: {}x{} by factor {}", h, w, r));
        }
        let out = pixel_unshuffle_data(self.value(x).data(), n, c, h, w, r);
        let need = self.ng(x);
        Ok(self.push(
            Tensor::new([n, c * r * r, h / r, w / r], out)?,
            Op::PixelUnshuffle { x, r },
            need,
        ))
    }

    /// Spatial mean: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.flops += (n * c * hw) as u64;
        let need = self.ng(x);
        self.push(Tensor::new([n, c, 1, 1], out).unwrap(), Op::AvgPool { x }, need)
    }

    /// Multiply every plane of `x` by the matching entry of `s: (n, c, 1, 1)`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(s) != [n, c, 1, 1] {
            return Err(shape_err!("scale_channels: {:?} for {:?}", self.shape(s), self.shape(x)));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v *= sv[i]);
        }
        self.flops += out.len() as u64;
        let need = self.ng(x) || self.ng(s);
        Ok(self.push(Tensor::new([n, c, h, w], out)?, Op::ScaleChannels { x, s }, need))
    }

    /// `(n, 1, h, w) -> (n, c, h, w)` by copying the single plane.
    pub fn repeat_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let [n, c1, h, w] = self.shape(x);
        if c1 != 1 || c == 0 {
            return Err(shape_err!("repeat_channels: input has {} channels", c1));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * hw);
        for bi in 0..n {
            for _ in 0..c {
                out.extend_from_slice(&xv[bi * hw..(bi + 1) * hw]);
            }
        }
        let need = self.ng(x);
        Ok(self.push(Tensor::new([n, c, h, w], out)?, Op::RepeatChannels { x }, need))
    }

    /// Divide each channel plane by its L2 norm over the spatial axes.
    pub fn normalize_spatial(&mut self, x: Var, eps: f64) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let eps = T::from_f64c(eps);
        let mut out = self.value(x).data().to_vec();
        let mut inv_norm = Vec::with_capacity(n * c);
        for plane in out.chunks_mut(hw) {
            let ss: T = plane.iter().map(|&v| v * v).sum();
            let r = T::one() / (ss + eps).sqrt();
            plane.iter_mut().for_each(|v| *v *= r);
            inv_norm.push(r);
        }
        self.flops += (3 * out.len()) as u64;
        let need = self.ng(x);
        self.push(
            Tensor::new([n, c, h, w], out).unwrap(),
            Op::NormalizeSpatial { x, inv_norm },
            need,
        )
    }

    /// Per-head channel Gram matrix `Q K^T`: `(n, heads, d, d)` with `d = c / heads`.
    pub fn head_gram(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        same_shape("head_gram", self.shape(q), self.shape(k))?;
        let [n, c, h, w] = self.shape(q);
        if heads == 0 || c % heads != 0 {
            return Err(shape_err!("head_gram: {} channels over {} heads", c, heads));
        }
        let d = c / heads;
        let hw = h * w;
        let mut out = vec![T::zero(); n * heads * d * d];
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            for bi in 0..n {
                for hd in 0..heads {
                    let off = (bi * c + hd * d) * hw;
                    T::gemm(
                        d,
                        hw,
                        d,
                        T::one(),
                        &qv[off..off + d * hw],
                        (hw, 1),
                        &kv[off..off + d * hw],
                        (1, hw),
                        T::zero(),
                        &mut out[(bi * heads + hd) * d * d..(bi * heads + hd + 1) * d * d],
                        (d, 1),
                    );
                }
            }
        }
        self.flops += (2 * n * heads * d * d * hw) as u64;
        let need = self.ng(q) || self.ng(k);
        Ok(self.push(Tensor::new([n, heads, d, d], out)?, Op::HeadGram { q, k, heads }, need))
    }

    /// Multiply head `i` of `x: (n, heads, d, d)` by `tau[i] * factor`.
    pub fn scale_heads(&mut self, x: Var, tau: Var, factor: f64) -> Result<Var> {
        let [n, heads, d1, d2] = self.shape(x);
        if self.shape(tau).iter().product::<usize>() != heads {
            return Err(shape_err!("scale_heads: tau {:?} for {} heads", self.shape(tau), heads));
        }
        let f = T::from_f64c(factor);
        let tv = self.value(tau).data();
        let mut out = self.value(x).data().to_vec();
        for (i, blk) in out.chunks_mut(d1 * d2).enumerate() {
            let s = tv[i % heads] * f;
            blk.iter_mut().for_each(|v| *v *= s);
        }
        self.flops += out.len() as u64;
        let need = self.ng(x) || self.ng(tau);
        Ok(self.push(
            Tensor::new([n, heads, d1, d2], out)?,
            Op::ScaleHeads { x, tau, factor: f },
            need,
        ))
    }

    /// Apply per-head attention `(n, heads, d, d)` to `v: (n, heads*d, h, w)`.
    pub fn head_apply(&mut self, attn: Var, v: Var, heads: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(v);
        let a_shape = self.shape(attn);
        if heads == 0 || c % heads != 0 || a_shape != [n, heads, c / heads, c / heads] {
            return Err(shape_err!("head_apply: attention {:?} for value {:?}", a_shape, [n, c, h, w]));
        }
        let d = c / heads;
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        {
            let av = self.value(attn).data();
            let vv = self.value(v).data();
            for bi in 0..n {
                for hd in 0..heads {
                    let off = (bi * c + hd * d) * hw;
                    let aoff = (bi * heads + hd) * d * d;
                    T::gemm(
                        d,
                        d,
                        hw,
                        T::one(),
                        &av[aoff..aoff + d * d],
                        (d, 1),
                        &vv[off..off + d * hw],
                        (hw, 1),
                        T::zero(),
                        &mut out[off..off + d * hw],
                        (hw, 1),
                    );
                }
            }
        }
        self.flops += (2 * n * c * d * hw) as u64;
        let need = self.ng(attn) || self.ng(v);
        Ok(self.push(Tensor::new([n, c, h, w], out)?, Op::HeadApply { attn, v, heads }, need))
    }

    /// Selective state-space scan in the given raster order.
    ///
    /// `u`, `delta`: `(n, ch, h, w)`; `b`, `c`: `(n, N, h, w)`;
    /// `a_log`: `(ch, N, 1, 1)`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        b: Var,
        c: Var,
        a_log: Var,
        order: ScanOrder,
    ) -> Result<Var> {
        let [n, ch, h, w] = self.shape(u);
        same_shape("scan(delta)", self.shape(delta), [n, ch, h, w])?;
        let ns = self.shape(b)[1];
        same_shape("scan(B)", self.shape(b), [n, ns, h, w])?;
        same_shape("scan(C)", self.shape(c), [n, ns, h, w])?;
        if self.shape(a_log).iter().product::<usize>() != ch * ns {
            return Err(shape_err!("scan: A {:?} for {} x {}", self.shape(a_log), ch, ns));
        }
        let (y, saved) = ops::scan_forward(
            self.value(u).data(),
            self.value(delta).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(a_log).data(),
            n,
            ch,
            ns,
            h,
            w,
            order,
        );
        self.flops += (n * ch * h * w * ns * 8) as u64;
        let need = [u, delta, b, c, a_log].iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new([n, ch, h, w], y)?,
            Op::Scan { u, delta, b, c, a_log, order, saved },
            need,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.flops += self.value(x).len() as u64;
        let need = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, need)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("l1_loss", self.shape(x), target.shape())?;
        let xv = self.value(x).data();
        let inv = T::one() / T::from_usize(xv.len().max(1)).unwrap();
        let s: T = xv.iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        self.flops += (3 * xv.len()) as u64;
        let need = self.ng(x);
        Ok(self.push(
            Tensor::scalar(s * inv),
            Op::L1 { x, target: target.data().to_vec() },
            need,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("mse_loss", self.shape(x), target.shape())?;
        let xv = self.value(x).data();
        let inv = T::one() / T::from_usize(xv.len().max(1)).unwrap();
        let s: T = xv.iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.flops += (3 * xv.len()) as u64;
        let need = self.ng(x);
        Ok(self.push(
            Tensor::scalar(s * inv),
            Op::Mse { x, target: target.data().to_vec() },
            need,
        ))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1, 1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Param(id) => out.params.push((*id, g)),
                Op::Leaf => {
                    out.inputs.insert(Var(i), g);
                }
                _ => self.backward_node(i, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| id.0);
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.shape;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv1x1 { x, w, b } => {
                let [n, ci, h, wd] = self.shape(*x);
                let co = out_shape[1];
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for bi in 0..n {
                        T::gemm(
                            ci,
                            co,
                            hw,
                            T::one(),
                            wv,
                            (1, ci),
                            &g[bi * co * hw..(bi + 1) * co * hw],
                            (hw, 1),
                            T::one(),
                            &mut dx[bi * ci * hw..(bi + 1) * ci * hw],
                            (hw, 1),
                        );
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for bi in 0..n {
                        T::gemm(
                            co,
                            hw,
                            ci,
                            T::one(),
                            &g[bi * co * hw..(bi + 1) * co * hw],
                            (hw, 1),
                            &xv[bi * ci * hw..(bi + 1) * ci * hw],
                            (1, hw),
                            T::one(),
                            dw,
                            (ci, 1),
                        );
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for (k, plane) in g.chunks(hw).enumerate() {
                            db[k % co] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::DwConv3x3 { x, w, dilation } => {
                let [n, c, h, wd] = self.shape(*x);
                let plane = c * h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let mut dx_buf = if need_x { Some(self.take(grads, *x)) } else { None };
                let mut dw_buf = if need_w { Some(self.take(grads, *w)) } else { None };
                for bi in 0..n {
                    ops::dwconv3x3_backward(
                        &xv[bi * plane..(bi + 1) * plane],
                        wv,
                        &g[bi * plane..(bi + 1) * plane],
                        dx_buf.as_mut().map(|d| &mut d[bi * plane..(bi + 1) * plane]),
                        dw_buf.as_deref_mut(),
                        c,
                        h,
                        wd,
                        *dilation,
                    );
                }
                if let Some(d) = dx_buf {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw_buf {
                    grads[w.0] = Some(d);
                }
            }
            Op::Downsample { x, w, b } => {
                let [n, ci, h, wd] = self.shape(*x);
                let co = out_shape[1];
                let hw = (h / 2) * (wd / 2);
                let k = ci * 4;
                let wv = self.value(*w).data();
                if self.ng(*x) {
                    let mut du = vec![T::zero(); n * k * hw];
                    for bi in 0..n {
                        T::gemm(
                            k,
                            co,
                            hw,
                            T::one(),
                            wv,
                            (1, k),
                            &g[bi * co * hw..(bi + 1) * co * hw],
                            (hw, 1),
                            T::zero(),
                            &mut du[bi * k * hw..(bi + 1) * k * hw],
                            (hw, 1),
                        );
                    }
                    let dxs = pixel_shuffle_data(&du, n, ci, h / 2, wd / 2, 2);
                    add_into(self.acc(grads, *x).unwrap(), &dxs);
                }
                if self.ng(*w) {
                    let unshuffled = pixel_unshuffle_data(self.value(*x).data(), n, ci, h, wd, 2);
                    let dw = self.acc(grads, *w).unwrap();
                    for bi in 0..n {
                        T::gemm(
                            co,
                            hw,
                            k,
                            T::one(),
                            &g[bi * co * hw..(bi + 1) * co * hw],
                            (hw, 1),
                            &unshuffled[bi * k * hw..(bi + 1) * k * hw],
                            (1, hw),
                            T::one(),
                            dw,
                            (k, 1),
                        );
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for (kk, plane) in g.chunks(hw).enumerate() {
                            db[kk % co] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let [n, c, h, wd] = out_shape;
                let hw = h * wd;
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            dg[ch] += (0..hw).map(|p| g[off + p] * xhat[off + p]).sum::<T>();
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            db[ch] += g[off..off + hw].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let inv_c = T::one() / T::from_usize(c).unwrap();
                    let mut m1 = vec![T::zero(); hw];
                    let mut m2 = vec![T::zero(); hw];
                    for bi in 0..n {
                        m1.iter_mut().for_each(|v| *v = T::zero());
                        m2.iter_mut().for_each(|v| *v = T::zero());
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for p in 0..hw {
                                let dxh = g[off + p] * gv[ch];
                                m1[p] += dxh;
                                m2[p] += dxh * xhat[off + p];
                            }
                        }
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for p in 0..hw {
                                let dxh = g[off + p] * gv[ch];
                                dx[off + p] += inv_std[bi * hw + p]
                                    * (dxh - m1[p] * inv_c - xhat[off + p] * m2[p] * inv_c);
                            }
                        }
                    }
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.as_ref().unwrap().data();
                if let Some(dx) = self.acc(grads, *x) {
                    ops::activation_backward(*kind, xv, yv, g, dx);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.as_ref().unwrap().data();
                let row = out_shape[3].max(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for ((yr, gr), dr) in y.chunks(row).zip(g.chunks(row)).zip(dx.chunks_mut(row)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..row {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *scale);
                }
            }
            Op::Narrow { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = out_shape[1];
                let hw = h * w;
                if let Some(dx) = self.acc(grads, *x) {
                    for bi in 0..n {
                        add_into(
                            &mut dx[(bi * c + start) * hw..(bi * c + start + len) * hw],
                            &g[bi * len * hw..(bi + 1) * len * hw],
                        );
                    }
                }
            }
            Op::Concat { parts } => {
                let [n, ct, h, w] = out_shape;
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(dp) = self.acc(grads, p) {
                        for bi in 0..n {
                            add_into(
                                &mut dp[bi * c * hw..(bi + 1) * c * hw],
                                &g[(bi * ct + off) * hw..(bi * ct + off + c) * hw],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::PixelShuffle { x, r } => {
                let [n, c, h, w] = out_shape;
                if let Some(dx) = self.acc(grads, *x) {
                    let back = pixel_unshuffle_data(g, n, c, h, w, *r);
                    add_into(dx, &back);
                }
            }
            Op::PixelUnshuffle { x, r } => {
                let [n, c, h, w] = self.shape(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    let back = pixel_shuffle_data(g, n, c, h / r, w / r, *r);
                    add_into(dx, &back);
                }
            }
            Op::AvgPool { x } => {
                let [_, _, h, w] = self.shape(*x);
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, plane) in dx.chunks_mut(hw).enumerate() {
                        let v = g[i] * inv;
                        plane.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::ScaleChannels { x, s } => {
                let [_, _, h, w] = out_shape;
                let hw = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, plane) in dx.chunks_mut(hw).enumerate() {
                        for (p, d) in plane.iter_mut().enumerate() {
                            *d += g[i * hw + p] * sv[i];
                        }
                    }
                }
                if let Some(ds) = self.acc(grads, *s) {
                    for (i, d) in ds.iter_mut().enumerate() {
                        *d += (0..hw).map(|p| g[i * hw + p] * xv[i * hw + p]).sum::<T>();
                    }
                }
            }
            Op::RepeatChannels { x } => {
                let [n, c, h, w] = out_shape;
                let hw = h * w;
                if let Some(dx) = self.acc(grads, *x) {
                    for bi in 0..n {
                        for ch in 0..c {
                            add_into(
                                &mut dx[bi * hw..(bi + 1) * hw],
                                &g[(bi * c + ch) * hw..(bi * c + ch + 1) * hw],
                            );
                        }
                    }
                }
            }
            Op::NormalizeSpatial { x, inv_norm } => {
                let [_, _, h, w] = out_shape;
                let hw = h * w;
                let y = node.value.as_ref().unwrap().data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, r) in inv_norm.iter().enumerate() {
                        let off = i * hw;
                        let dot: T = (0..hw).map(|p| g[off + p] * y[off + p]).sum();
                        for p in 0..hw {
                            dx[off + p] += *r * (g[off + p] - y[off + p] * dot);
                        }
                    }
                }
            }
            Op::HeadGram { q, k, heads } => {
                let [n, c, h, w] = self.shape(*q);
                let d = c / heads;
                let hw = h * w;
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                if let Some(dq) = self.acc(grads, *q) {
                    for bi in 0..n {
                        for hd in 0..*heads {
                            let off = (bi * c + hd * d) * hw;
                            let goff = (bi * heads + hd) * d * d;
                            T::gemm(
                                d,
                                d,
                                hw,
                                T::one(),
                                &g[goff..goff + d * d],
                                (d, 1),
                                &kv[off..off + d * hw],
                                (hw, 1),
                                T::one(),
                                &mut dq[off..off + d * hw],
                                (hw, 1),
                            );
                        }
                    }
                }
                if let Some(dk) = self.acc(grads, *k) {
                    for bi in 0..n {
                        for hd in 0..*heads {
                            let off = (bi * c + hd * d) * hw;
                            let goff = (bi * heads + hd) * d * d;
                            T::gemm(
                                d,
                                d,
                                hw,
                                T::one(),
                                &g[goff..goff + d * d],
                                (1, d),
                                &qv[off..off + d * hw],
                                (hw, 1),
                                T::one(),
                                &mut dk[off..off + d * hw],
                                (hw, 1),
                            );
                        }
                    }
                }
            }
            Op::ScaleHeads { x, tau, factor } => {
                let [_, heads, d1, d2] = out_shape;
                let blk = d1 * d2;
                let xv = self.value(*x).data();
                let tv = self.value(*tau).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, chunk) in dx.chunks_mut(blk).enumerate() {
                        let s = tv[i % heads] * *factor;
                        for (j, d) in chunk.iter_mut().enumerate() {
                            *d += g[i * blk + j] * s;
                        }
                    }
                }
                if let Some(dt) = self.acc(grads, *tau) {
                    for i in 0..g.len() / blk {
                        let dot: T = (0..blk).map(|j| g[i * blk + j] * xv[i * blk + j]).sum();
                        dt[i % heads] += dot * *factor;
                    }
                }
            }
            Op::HeadApply { attn, v, heads } => {
                let [n, c, h, w] = out_shape;
                let d = c / heads;
                let hw = h * w;
                let av = self.value(*attn).data();
                let vv = self.value(*v).data();
                if let Some(da) = self.acc(grads, *attn) {
                    for bi in 0..n {
                        for hd in 0..*heads {
                            let off = (bi * c + hd * d) * hw;
                            let aoff = (bi * heads + hd) * d * d;
                            T::gemm(
                                d,
                                hw,
                                d,
                                T::one(),
                                &g[off..off + d * hw],
                                (hw, 1),
                                &vv[off..off + d * hw],
                                (1, hw),
                                T::one(),
                                &mut da[aoff..aoff + d * d],
                                (d, 1),
                            );
                        }
                    }
                }
                if let Some(dv) = self.acc(grads, *v) {
                    for bi in 0..n {
                        for hd in 0..*heads {
                            let off = (bi * c + hd * d) * hw;
                            let aoff = (bi * heads + hd) * d * d;
                            T::gemm(
                                d,
                                d,
                                hw,
                                T::one(),
                                &av[aoff..aoff + d * d],
                                (1, d),
                                &g[off..off + d * hw],
                                (hw, 1),
                                T::one(),
                                &mut dv[off..off + d * hw],
                                (hw, 1),
                            );
                        }
                    }
                }
            }
            Op::Scan { u, delta, b, c, a_log, order, saved } => {
                let [n, ch, h, w] = out_shape;
                let ns = self.shape(*b)[1];
                let mut bufs: Vec<Option<Vec<T>>> = [*u, *delta, *b, *c, *a_log]
                    .iter()
                    .map(|&v| if self.ng(v) { Some(self.take(grads, v)) } else { None })
                    .collect();
                {
                    let mut it = bufs.iter_mut();
                    let mut next = || it.next().unwrap().as_deref_mut();
                    let (du, ddelta, db, dc, da_log) = (next(), next(), next(), next(), next());
                    ops::scan_backward(
                        self.value(*u).data(),
                        self.value(*delta).data(),
                        self.value(*b).data(),
                        self.value(*c).data(),
                        self.value(*a_log).data(),
                        saved,
                        g,
                        ScanGrads { du, ddelta, db, dc, da_log },
                        n,
                        ch,
                        ns,
                        h,
                        w,
                        *order,
                    );
                }
                for (v, buf) in [*u, *delta, *b, *c, *a_log].iter().zip(bufs) {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::L1 { x, target } => {
                let xv = self.value(*x).data();
                let s = g[0] / T::from_usize(xv.len().max(1)).unwrap();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dx.len() {
                        let diff = xv[i] - target[i];
                        if diff > T::zero() {
                            dx[i] += s;
                        } else if diff < T::zero() {
                            dx[i] -= s;
                        }
                    }
                }
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let s = g[0] * T::from_f64c(2.0) / T::from_usize(xv.len().max(1)).unwrap();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += s * (xv[i] - target[i]);
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.shape(v).iter().product();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn take(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Vec<T> {
        let len = self.shape(v).iter().product();
        grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// `(n, c*r*r, h, w) -> (n, c, h*r, w*r)` where channel `c*r*r + i*r + j`
/// lands at offset `(i, j)` of each `r x r` cell.
pub(crate) fn pixel_shuffle_data<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for bi in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = (bi * c + ch) * r * r + i * r + j;
                    let src = &x[src_c * h * w..(src_c + 1) * h * w];
                    let dst = &mut out[(bi * c + ch) * ho * wo..(bi * c + ch + 1) * ho * wo];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y * r + i) * wo + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle_data`]; `h`, `w` are the input (large) dims.
pub(crate) fn pixel_unshuffle_data<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); n * c * h * w];
    for bi in 0..n {
        for ch in 0..c {
            let src = &x[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for i in 0..r {
                for j in 0..r {
                    let dst_c = (bi * c + ch) * r * r + i * r + j;
                    let dst = &mut out[dst_c * ho * wo..(dst_c + 1) * ho * wo];
                    for y in 0..ho {
                        for xx in 0..wo {
                            dst[y * wo + xx] = src[(y * r + i) * w + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}
