use rand::Rng;

use crate::error::Result;
use crate::tensor::{Init, ParamId, ParamStore, Real, Tape, Var};

pub const LN_EPS: f64 = 1e-6;
pub const PROJ_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'s> {
    store: &'s mut ParamStore<f32>,
    rng: &'s mut dyn RngLike,
    prefix: String,
}

/// Object-safe view of an RNG so builders can nest without generics.
pub trait RngLike {
    fn sample_into(&mut self, store: &mut ParamStore<f32>, name: String, shape: [usize; 4], init: Init) -> Result<ParamId>;
}

impl<R: Rng> RngLike for R {
    fn sample_into(&mut self, store: &mut ParamStore<f32>, name: String, shape: [usize; 4], init: Init) -> Result<ParamId> {
        store.add_init(name, shape, init, self)
    }
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s mut ParamStore<f32>, rng: &'s mut dyn RngLike) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: [usize; 4], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.rng.sample_into(self.store, full, shape, init)
    }

    pub fn store(&mut self) -> &mut ParamStore<f32> {
        self.store
    }
}

/// Per-pixel linear map, weight `(c_out, c_in, 1, 1)`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new(b: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::with_init(b, name, c_in, c_out, Init::TruncNormal(PROJ_STD))
    }

    /// Weight and bias both zero.
    pub fn zeros(b: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::with_init(b, name, c_in, c_out, Init::Zeros)
    }

    pub fn with_init(b: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, init: Init) -> Result<Self> {
        let mut s = b.sub(name);
        let w = s.param("weight", [c_out, c_in, 1, 1], init)?;
        let bias = s.param("bias", [c_out, 1, 1, 1], Init::Zeros)?;
        Ok(Self {
            w,
            b: Some(bias),
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let b = self.b.map(|b| t.param(b));
        t.conv1x1(x, w, b)
    }
}

/// Depthwise 3x3 without bias.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub w: ParamId,
    pub dilation: usize,
}

impl DwConv {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize, dilation: usize) -> Result<Self> {
        let w = b.sub(name).param("weight", [c, 1, 3, 3], Init::TruncNormal(PROJ_STD * 10.0))?;
        Ok(Self { w, dilation })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        t.dwconv3x3(x, w, self.dilation)
    }
}

/// Channel layer norm with affine parameters.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            gamma: s.param("weight", [c, 1, 1, 1], Init::Ones)?,
            beta: s.param("bias", [c, 1, 1, 1], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm_channels(x, g, b, LN_EPS)
    }
}

/// Gated depthwise feed-forward: expand, depthwise 3x3, GELU-gate, project.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub expand: Conv,
    pub dw: DwConv,
    pub project: Conv,
}

pub fn hidden_width(c: usize, expansion: f64) -> usize {
    ((c as f64 * expansion).round() as usize).max(1)
}

impl Ffn {
    /// `zero_out` zero-initializes the output projection.
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize, expansion: f64, zero_out: bool) -> Result<Self> {
        let mut s = b.sub(name);
        let hidden = hidden_width(c, expansion);
        let expand = Conv::new(&mut s, "expand", c, 2 * hidden)?;
        let dw = DwConv::new(&mut s, "dw", 2 * hidden, 1)?;
        let project = if zero_out {
            Conv::zeros(&mut s, "project", hidden, c)?
        } else {
            Conv::new(&mut s, "project", hidden, c)?
        };
        Ok(Self { expand, dw, project })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let e = self.expand.forward(t, x)?;
        let d = self.dw.forward(t, e)?;
        let halves = t.split_channels(d, 2)?;
        let g = t.gelu(halves[0]);
        let m = t.mul(g, halves[1])?;
        self.project.forward(t, m)
    }
}
