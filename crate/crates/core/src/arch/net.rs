use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::{CB_SCALE, CR_SCALE, KB, KG, KR};
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, ParamStore, Real, Tape, Tensor, Var};

use super::attention::{ConcatFusion, Lcat, Sadm};
use super::blocks::{Cgb, Cmb};
use super::layers::{Builder, Conv};
use super::{DsdNetConfig, FusionKind, Variant};

#[derive(Clone, Debug)]
enum Block {
    Scan(Cmb),
    Context(Cgb),
}

impl Block {
    fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Scan(b) => b.forward(t, x),
            Block::Context(b) => b.forward(t, x),
        }
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Sadm(Sadm),
    Concat(ConcatFusion),
}

/// Stride-2 2x2 convolution.
#[derive(Clone, Debug)]
struct Down {
    w: ParamId,
    b: ParamId,
}

impl Down {
    fn new(b: &mut Builder<'_>, name: &str, ci: usize, co: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            w: s.param("weight", [co, ci, 2, 2], Init::TruncNormal(0.02))?,
            b: s.param("bias", [co, 1, 1, 1], Init::Zeros)?,
        })
    }

    fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let b = t.param(self.b);
        t.strided_downsample(x, w, Some(b))
    }
}

/// Pixel-shuffle upsampling to the finer scale, then skip merge.
#[derive(Clone, Debug)]
struct Up {
    expand: Conv,
    merge: Conv,
}

impl Up {
    fn new(b: &mut Builder<'_>, c_coarse: usize, c_fine: usize) -> Result<Self> {
        Ok(Self {
            expand: Conv::new(b, "expand", c_coarse, 4 * c_fine)?,
            merge: Conv::new(b, "merge", 2 * c_fine, c_fine)?,
        })
    }

    fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let e = self.expand.forward(t, x)?;
        let u = t.pixel_shuffle(e, 2)?;
        let cat = t.concat_channels(&[u, skip])?;
        self.merge.forward(t, cat)
    }
}

#[derive(Clone, Debug)]
struct EncoderScale {
    main: Vec<Block>,
    guide: Vec<Block>,
    fusion: Option<Fusion>,
}

#[derive(Clone, Debug)]
struct DecoderScale {
    /// `None` at the coarsest scale.
    up_main: Option<Up>,
    up_guide: Option<Up>,
    lcat: Option<Lcat>,
    refine: Vec<Block>,
    refine_guide: Vec<Block>,
}

/// Network outputs for one batch.
pub struct NetOutput {
    /// `(n, 3, 2h, 2w)` sRGB.
    pub srgb: Var,
    /// `(n, 3, h, w)` in the guidance colour space.
    pub aux: Var,
    /// Non-leaf 3-channel tensors at input or output resolution produced
    /// before the output heads.
    pub image_round_trips: usize,
}

/// Parameter layout of the network. Weights live in a separate
/// [`ParamStore`] so the same structure can drive `f32` and `f64` tapes.
#[derive(Debug)]
pub struct DsdNet {
    pub config: DsdNetConfig,
    pub variant: Variant,
    raw_embed: Option<Conv>,
    guide_embed: Option<Conv>,
    encoder: Vec<EncoderScale>,
    down_main: Vec<Down>,
    down_guide: Vec<Down>,
    decoder: Vec<DecoderScale>,
    head: Conv,
    head_skip: Conv,
    aux_head: Option<Conv>,
    invocations: AtomicU64,
    images: AtomicU64,
    round_trips: AtomicU64,
}

impl Clone for DsdNet {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            variant: self.variant,
            raw_embed: self.raw_embed.clone(),
            guide_embed: self.guide_embed.clone(),
            encoder: self.encoder.clone(),
            down_main: self.down_main.clone(),
            down_guide: self.down_guide.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            head_skip: self.head_skip.clone(),
            aux_head: self.aux_head.clone(),
            invocations: AtomicU64::new(0),
            images: AtomicU64::new(0),
            round_trips: AtomicU64::new(0),
        }
    }
}

impl DsdNet {
    /// Builds the network and its initialized parameters.
    pub fn new(config: &DsdNetConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let variant = config.variant;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let s = config.n_scales;
        let c0 = config.base_channels;
        let (has_raw, has_guide) = (variant.has_raw(), variant.has_guide());
        let lcat = variant.has_lcat();
        let ex = config.ffn_expansion;
        let st = config.ssm_state_dim;

        let raw_embed = has_raw.then(|| Conv::new(&mut b, "raw_embed", 4, c0)).transpose()?;
        let guide_embed = has_guide.then(|| Conv::new(&mut b, "guide_embed", 3, c0)).transpose()?;

        // Main stream is raw when present, otherwise guidance.
        let main_block = |b: &mut Builder<'_>, c: usize| -> Result<Block> {
            if has_raw {
                Ok(Block::Scan(Cmb::new(b, c, st, ex)?))
            } else {
                Ok(Block::Context(Cgb::new(b, c)?))
            }
        };

        let mut encoder = Vec::with_capacity(s);
        let mut down_main = Vec::new();
        let mut down_guide = Vec::new();
        for i in 0..s {
            let c = config.width(i);
            let mut e = b.sub(&format!("enc{i}"));
            let mut main = Vec::with_capacity(config.blocks_per_scale);
            let mut guide = Vec::new();
            for k in 0..config.blocks_per_scale {
                main.push(main_block(&mut e.sub(&format!("main{k}")), c)?);
                if has_raw && has_guide {
                    guide.push(Block::Context(Cgb::new(&mut e.sub(&format!("guide{k}")), c)?));
                }
            }
            let fusion = match variant.fusion() {
                FusionKind::Sadm => Some(Fusion::Sadm(Sadm::new(&mut e.sub("sadm"), c, config.heads_at(i), ex)?)),
                FusionKind::Concat => Some(Fusion::Concat(ConcatFusion::new(&mut e.sub("concat"), c)?)),
                FusionKind::None => None,
            };
            encoder.push(EncoderScale { main, guide, fusion });
            if i + 1 < s {
                down_main.push(Down::new(&mut e, "down_main", c, config.width(i + 1))?);
                if has_raw && has_guide {
                    down_guide.push(Down::new(&mut e, "down_guide", c, config.width(i + 1))?);
                }
            }
        }

        let mut decoder = Vec::with_capacity(s);
        for i in (0..s).rev() {
            let c = config.width(i);
            let mut d = b.sub(&format!("dec{i}"));
            let coarser = (i + 1 < s).then(|| config.width(i + 1));
            let up_main = coarser.map(|cc| Up::new(&mut d.sub("up_main"), cc, c)).transpose()?;
            let up_guide = match coarser {
                Some(cc) if lcat => Some(Up::new(&mut d.sub("up_guide"), cc, c)?),
                _ => None,
            };
            let lcat_block = lcat
                .then(|| Lcat::new(&mut d.sub("lcat"), c, config.heads_at(i), ex))
                .transpose()?;
            let mut refine = Vec::with_capacity(config.decoder_blocks);
            let mut refine_guide = Vec::new();
            for k in 0..config.decoder_blocks {
                refine.push(main_block(&mut d.sub(&format!("refine{k}")), c)?);
                if lcat {
                    refine_guide.push(Block::Context(Cgb::new(&mut d.sub(&format!("refine_guide{k}")), c)?));
                }
            }
            decoder.push(DecoderScale {
                up_main,
                up_guide,
                lcat: lcat_block,
                refine,
                refine_guide,
            });
        }

        let head = Conv::zeros(&mut b, "head", c0, 12)?;
        let skip_in = if has_raw { 4 } else { 3 };
        let head_skip = Conv::zeros(&mut b, "head_skip", skip_in, 12)?;
        let aux_head = has_guide.then(|| Conv::zeros(&mut b, "aux_head", c0, 3)).transpose()?;

        init_head_skip(&mut store, &head_skip, has_raw);
        let net = Self {
            config: config.clone(),
            variant,
            raw_embed,
            guide_embed,
            encoder,
            down_main,
            down_guide,
            decoder,
            head,
            head_skip,
            aux_head,
            invocations: AtomicU64::new(0),
            images: AtomicU64::new(0),
            round_trips: AtomicU64::new(0),
        };
        Ok((net, store))
    }

    /// Runs the network on packed raw `(n, 4, h, w)` and guidance `(n, 3, h, w)`.
    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, raw: Var, guide: Var) -> Result<NetOutput> {
        let rs = t.shape(raw);
        let gs = t.shape(guide);
        if rs[1] != 4 || gs[1] != 3 || rs[0] != gs[0] || rs[2..] != gs[2..] {
            return Err(Error::Shape(format!("network inputs {rs:?} and {gs:?}")));
        }
        let k = self.config.stride();
        if !rs[2].is_multiple_of(k) || !rs[3].is_multiple_of(k) {
            return Err(Error::Shape(format!(
                "{}x{} not divisible by {k} for {} scales",
                rs[2], rs[3], self.config.n_scales
            )));
        }
        let first = t.len();
        let v = self.variant;
        let s = self.config.n_scales;

        let mut main = match &self.raw_embed {
            Some(e) => e.forward(t, raw)?,
            None => self.guide_embed.as_ref().expect("some stream").forward(t, guide)?,
        };
        let dual = v.has_raw() && v.has_guide();
        let mut side = if dual {
            Some(self.guide_embed.as_ref().expect("guide stream").forward(t, guide)?)
        } else {
            None
        };

        let mut skips_main = Vec::with_capacity(s);
        let mut skips_side = Vec::with_capacity(s);
        for (i, enc) in self.encoder.iter().enumerate() {
            for blk in &enc.main {
                main = blk.forward(t, main)?;
            }
            if let Some(y) = side.as_mut() {
                for blk in &enc.guide {
                    *y = blk.forward(t, *y)?;
                }
            }
            if let (Some(f), Some(y)) = (&enc.fusion, side) {
                let (m, yy) = match f {
                    Fusion::Sadm(m) => m.forward(t, main, y)?,
                    Fusion::Concat(c) => c.forward(t, main, y)?,
                };
                main = m;
                side = Some(yy);
            }
            skips_main.push(main);
            skips_side.push(side);
            if i + 1 < s {
                main = self.down_main[i].forward(t, main)?;
                if let Some(y) = side {
                    side = Some(self.down_guide[i].forward(t, y)?);
                }
            }
        }

        let mut d = skips_main[s - 1];
        let mut g = skips_side[s - 1];
        for (j, dec) in self.decoder.iter().enumerate() {
            let i = s - 1 - j;
            if let Some(up) = &dec.up_main {
                d = up.forward(t, d, skips_main[i])?;
            }
            if let (Some(up), Some(gv), Some(skip)) = (&dec.up_guide, g, skips_side[i]) {
                g = Some(up.forward(t, gv, skip)?);
            }
            if let Some(gv) = g.as_mut() {
                for blk in &dec.refine_guide {
                    *gv = blk.forward(t, *gv)?;
                }
            }
            if let (Some(l), Some(gv)) = (&dec.lcat, g) {
                d = l.forward(t, d, gv)?;
            }
            for blk in &dec.refine {
                d = blk.forward(t, d)?;
            }
        }

        let head_start = t.len();
        let (r, gin) = (rs[2], rs[3]);
        let round_trips = t
            .vars()
            .skip(first)
            .take(head_start - first)
            .filter(|&var| {
                let sh = t.shape(var);
                !t.is_leaf(var)
                    && sh[1] == 3
                    && ((sh[2] == r && sh[3] == gin) || (sh[2] == 2 * r && sh[3] == 2 * gin))
            })
            .count();

        let h = self.head.forward(t, d)?;
        let skip_src = if v.has_raw() { raw } else { guide };
        let sk = self.head_skip.forward(t, skip_src)?;
        let sum = t.add(h, sk)?;
        let srgb = t.pixel_shuffle(sum, 2)?;

        let aux = match &self.aux_head {
            Some(a) => {
                // Guidance features at full packed resolution.
                let src = if v.has_lcat() {
                    g.expect("guide decoder")
                } else if dual {
                    skips_side[0].expect("guide skip")
                } else {
                    d
                };
                let o = a.forward(t, src)?;
                t.add(guide, o)?
            }
            None => t.affine(guide, 1.0, 0.0),
        };

        self.invocations.fetch_add(1, Ordering::Relaxed);
        self.images.fetch_add(rs[0] as u64, Ordering::Relaxed);
        self.round_trips.fetch_add(round_trips as u64, Ordering::Relaxed);
        Ok(NetOutput {
            srgb,
            aux,
            image_round_trips: round_trips,
        })
    }

    /// Forward calls since construction or the last reset.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn images_processed(&self) -> u64 {
        self.images.load(Ordering::Relaxed)
    }

    pub fn image_round_trips(&self) -> u64 {
        self.round_trips.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.invocations.store(0, Ordering::Relaxed);
        self.images.store(0, Ordering::Relaxed);
        self.round_trips.store(0, Ordering::Relaxed);
    }

    /// Runs one batch without gradients and returns `(srgb, aux)`.
    pub fn infer(&self, store: &ParamStore<f32>, raw: &Tensor<f32>, guide: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>, u64)> {
        let mut t = Tape::new(store);
        let r = t.constant(raw.clone());
        let g = t.constant(guide.clone());
        let out = self.forward(&mut t, r, g)?;
        let flops = t.flops();
        Ok((t.value(out.srgb).clone(), t.value(out.aux).clone(), flops))
    }
}

/// Starts the sRGB head at a nearest-neighbour reconstruction of the input.
fn init_head_skip(store: &mut ParamStore<f32>, skip: &Conv, from_raw: bool) {
    let w = store.tensor_mut(skip.w);
    let ci = if from_raw { 4 } else { 3 };
    let rows: [[f64; 4]; 3] = if from_raw {
        [[1.0, 0.0, 0.0, 0.0], [0.0, 0.5, 0.5, 0.0], [0.0, 0.0, 0.0, 1.0]]
    } else {
        // Inverse of the YCbCr transform on (Y, Cb, Cr).
        let (cb, cr) = (1.0 / CB_SCALE, 1.0 / CR_SCALE);
        [
            [1.0, 0.0, cr, 0.0],
            [1.0, -KB / KG * cb, -KR / KG * cr, 0.0],
            [1.0, cb, 0.0, 0.0],
        ]
    };
    let data = w.data_mut();
    for (color, row) in rows.iter().enumerate() {
        for sub in 0..4 {
            let o = color * 4 + sub;
            for i in 0..ci {
                data[o * ci + i] = row[i] as f32;
            }
        }
    }
}
