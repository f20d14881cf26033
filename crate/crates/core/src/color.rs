//! Image representations and the conversions between them.
//!
//! All image tensors are `1 x C x H x W`. The YCbCr matrix is BT.601 full
//! range with chroma in `[-0.5, 0.5]`:
//!
//! ```text
//! Y  = 0.299 R + 0.587 G + 0.114 B
//! Cb = 0.564 (B - Y)
//! Cr = 0.713 (R - Y)
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;
pub const CB_SCALE: f64 = 0.564;
pub const CR_SCALE: f64 = 0.713;
pub const U_SCALE: f64 = 0.492;
pub const V_SCALE: f64 = 0.877;

/// Colour filter layout. Only RGGB is supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cfa {
    Rggb,
}

impl Cfa {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RGGB" => Ok(Cfa::Rggb),
            other => Err(Error::Invalid(format!("unsupported CFA pattern `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Cfa::Rggb => "RGGB",
        }
    }
}

/// Mosaicked sensor samples, `height x width` with a 2x2 CFA period.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BayerImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
    pub cfa: Cfa,
    pub black_level: u16,
    pub white_level: u16,
}

impl BayerImage {
    pub fn new(width: usize, height: usize, data: Vec<u16>, black_level: u16, white_level: u16) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid("Bayer image must be non-empty".into()));
        }
        if data.len() != width * height {
            return Err(Error::Invalid(format!(
                "Bayer image {}x{} needs {} samples, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if white_level <= black_level {
            return Err(Error::Invalid(format!(
                "white level {white_level} must exceed black level {black_level}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            cfa: Cfa::Rggb,
            black_level,
            white_level,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Sample normalized by the black and white levels, clamped to `[0, 1]`.
    #[inline]
    pub fn normalized(&self, x: usize, y: usize) -> f64 {
        let range = (self.white_level - self.black_level) as f64;
        ((self.at(x, y) as f64 - self.black_level as f64) / range).clamp(0.0, 1.0)
    }

    fn check_even(&self) -> Result<()> {
        if !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "Bayer dimensions {}x{} must be even",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Packed `(R, G1, G2, B)` planes at half resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedRaw {
    pub tensor: Tensor<f32>,
}

/// `(Y, Cb, Cr)` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct YccImage {
    pub tensor: Tensor<f32>,
}

/// `(R, G, B)` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SrgbImage {
    pub tensor: Tensor<f32>,
}

fn expect_channels(t: &Tensor<f32>, c: usize, what: &str) -> Result<()> {
    if t.n() != 1 || t.c() != c {
        return Err(Error::Shape(format!("{what} needs shape (1, {c}, h, w), got {:?}", t.shape())));
    }
    Ok(())
}

impl PackedRaw {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        expect_channels(&tensor, 4, "packed raw")?;
        Ok(Self { tensor })
    }
}

impl YccImage {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        expect_channels(&tensor, 3, "YCbCr image")?;
        Ok(Self { tensor })
    }
}

impl SrgbImage {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        expect_channels(&tensor, 3, "sRGB image")?;
        Ok(Self { tensor })
    }

    pub fn width(&self) -> usize {
        self.tensor.w()
    }

    pub fn height(&self) -> usize {
        self.tensor.h()
    }

    /// Copy with every value clamped to `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self {
            tensor: self.tensor.map(|v| v.clamp(0.0, 1.0)),
        }
    }
}

/// Split a Bayer mosaic into four half-resolution planes.
pub fn pack_rggb(b: &BayerImage) -> Result<PackedRaw> {
    b.check_even()?;
    let (h, w) = (b.height / 2, b.width / 2);
    let t = Tensor::from_fn([1, 4, h, w], |[_, c, y, x]| {
        let (dy, dx) = (c / 2, c % 2);
        b.normalized(2 * x + dx, 2 * y + dy) as f32
    });
    PackedRaw::new(t)
}

/// Inverse of [`pack_rggb`] for in-range samples.
pub fn unpack_rggb(p: &PackedRaw, black_level: u16, white_level: u16) -> Result<BayerImage> {
    let [_, _, h, w] = p.tensor.shape();
    let range = (white_level as f64) - (black_level as f64);
    let mut data = vec![0u16; 4 * h * w];
    for c in 0..4 {
        let (dy, dx) = (c / 2, c % 2);
        for y in 0..h {
            for x in 0..w {
                let v = p.tensor.at([0, c, y, x]) as f64;
                let q = (black_level as f64 + v.clamp(0.0, 1.0) * range).round();
                data[(2 * y + dy) * 2 * w + 2 * x + dx] = q as u16;
            }
        }
    }
    BayerImage::new(2 * w, 2 * h, data, black_level, white_level)
}

#[inline]
pub fn rgb_to_ycc_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, CB_SCALE * (b - y), CR_SCALE * (r - y)]
}

#[inline]
pub fn ycc_to_rgb_px([y, cb, cr]: [f64; 3]) -> [f64; 3] {
    let r = y + cr / CR_SCALE;
    let b = y + cb / CB_SCALE;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

#[inline]
pub fn rgb_to_yuv_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, U_SCALE * (b - y), V_SCALE * (r - y)]
}

#[inline]
pub fn yuv_to_rgb_px([y, u, v]: [f64; 3]) -> [f64; 3] {
    let r = y + v / V_SCALE;
    let b = y + u / U_SCALE;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// Hexcone HSV with hue in `[0, 1)`. Gray pixels get hue 0 and saturation 0.
pub fn rgb_to_hsv_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d <= 0.0 {
        return [0.0, 0.0, v];
    }
    let sector = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let mut h = sector / 6.0;
    if h >= 1.0 {
        h -= 1.0;
    }
    [h, s, v]
}

pub fn hsv_to_rgb_px([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn map3(t: &Tensor<f32>, f: impl Fn([f64; 3]) -> [f64; 3]) -> Tensor<f32> {
    let [n, _, h, w] = t.shape();
    let hw = h * w;
    let mut out = vec![0.0f32; t.len()];
    let src = t.data();
    for b in 0..n {
        let base = b * 3 * hw;
        for p in 0..hw {
            let px = [
                src[base + p] as f64,
                src[base + hw + p] as f64,
                src[base + 2 * hw + p] as f64,
            ];
            let q = f(px);
            for c in 0..3 {
                out[base + c * hw + p] = q[c] as f32;
            }
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

pub fn srgb_to_ycc(img: &SrgbImage) -> YccImage {
    YccImage {
        tensor: map3(&img.tensor, rgb_to_ycc_px),
    }
}

/// Exact matrix inverse; no clamping.
pub fn ycc_to_srgb(img: &YccImage) -> SrgbImage {
    SrgbImage {
        tensor: map3(&img.tensor, ycc_to_rgb_px),
    }
}

pub fn rgb_to_hsv(img: &SrgbImage) -> Tensor<f32> {
    map3(&img.tensor, rgb_to_hsv_px)
}

pub fn hsv_to_rgb(t: &Tensor<f32>) -> SrgbImage {
    SrgbImage {
        tensor: map3(t, hsv_to_rgb_px),
    }
}

pub fn rgb_to_yuv(img: &SrgbImage) -> Tensor<f32> {
    map3(&img.tensor, rgb_to_yuv_px)
}

pub fn yuv_to_rgb(t: &Tensor<f32>) -> SrgbImage {
    SrgbImage {
        tensor: map3(t, yuv_to_rgb_px),
    }
}

/// Colour space of the guidance stream input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GuideSpace {
    #[default]
    Ycc,
    Hsv,
    Yuv,
}

impl GuideSpace {
    pub fn convert_px(self, rgb: [f64; 3]) -> [f64; 3] {
        match self {
            GuideSpace::Ycc => rgb_to_ycc_px(rgb),
            GuideSpace::Hsv => rgb_to_hsv_px(rgb),
            GuideSpace::Yuv => rgb_to_yuv_px(rgb),
        }
    }

    pub fn convert(self, t: &Tensor<f32>) -> Tensor<f32> {
        map3(t, |px| self.convert_px(px))
    }
}

/// Half-resolution RGB from a mosaic: `(R, (G1 + G2) / 2, B)` per 2x2 site.
pub fn bayer_to_rgb_half(b: &BayerImage) -> Result<SrgbImage> {
    let p = pack_rggb(b)?;
    Ok(packed_to_rgb_half(&p))
}

pub fn packed_to_rgb_half(p: &PackedRaw) -> SrgbImage {
    let [_, _, h, w] = p.tensor.shape();
    let t = &p.tensor;
    let rgb = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| match c {
        0 => t.at([0, 0, y, x]),
        1 => ((t.at([0, 1, y, x]) as f64 + t.at([0, 2, y, x]) as f64) * 0.5) as f32,
        _ => t.at([0, 3, y, x]),
    });
    SrgbImage { tensor: rgb }
}

/// Guidance-stream input: green-averaged mosaic converted to YCbCr.
pub fn bayer_to_ycc(b: &BayerImage) -> Result<YccImage> {
    let rgb = bayer_to_rgb_half(b)?;
    Ok(srgb_to_ycc(&rgb))
}

pub fn bayer_to_guide(b: &BayerImage, space: GuideSpace) -> Result<Tensor<f32>> {
    let rgb = bayer_to_rgb_half(b)?;
    Ok(space.convert(&rgb.tensor))
}

/// Full-resolution bilinear demosaic of an RGGB mosaic.
///
/// Missing samples are the mean of the nearest same-colour neighbours, with
/// edges replicated. This is the naive pipeline the network is compared to.
pub fn demosaic_bilinear(b: &BayerImage) -> Result<SrgbImage> {
    b.check_even()?;
    let (w, h) = (b.width, b.height);
    let colour = |x: usize, y: usize| -> usize {
        match (y % 2, x % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    };
    let mut out = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let own = colour(x, y);
            for c in 0..3 {
                let v = if c == own {
                    b.normalized(x, y)
                } else {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            if colour(sx, sy) == c && (dx != 0 || dy != 0) {
                                acc += b.normalized(sx, sy);
                                n += 1.0;
                            }
                        }
                    }
                    if n > 0.0 {
                        acc / n
                    } else {
                        0.0
                    }
                };
                out[c * w * h + y * w + x] = v as f32;
            }
        }
    }
    Ok(SrgbImage {
        tensor: Tensor::new([1, 3, h, w], out)?,
    })
}

/// Sample an RGB image through an RGGB mosaic without quantization.
pub fn mosaic(img: &SrgbImage) -> Vec<f64> {
    let [_, _, h, w] = img.tensor.shape();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = match (y % 2, x % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            };
            out[y * w + x] = img.tensor.at([0, c, y, x]) as f64;
        }
    }
    out
}

/// 2x2 box average of a `(1, c, 2h, 2w)` tensor.
pub fn box_downsample2(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("box downsample needs even dims, got {h}x{w}")));
    }
    Ok(Tensor::from_fn([n, c, h / 2, w / 2], |[b, ch, y, x]| {
        let s = t.at([b, ch, 2 * y, 2 * x]) as f64
            + t.at([b, ch, 2 * y, 2 * x + 1]) as f64
            + t.at([b, ch, 2 * y + 1, 2 * x]) as f64
            + t.at([b, ch, 2 * y + 1, 2 * x + 1]) as f64;
        (s * 0.25) as f32
    }))
}
