//! Synthetic screen-capture pairs.
//!
//! Content is shown on an RGB-stripe display whose cells are `pitch` field
//! samples wide, then photographed by a camera that is rotated and scaled
//! relative to the panel. The camera taps the field bilinearly at one point
//! per sensor pixel, so the subpixel grid aliases into low-frequency bands.
//! The clean target is the same view with the panel structure removed and a
//! box filter over each sensor pixel footprint.

mod content;
mod dataset;

pub use content::{load_content_dir, procedural_content, ContentKind};
pub use dataset::{
    dataset_generate, generate_pair, load_dataset, manifest_hash, read_manifest, ContentSource, GenerateOptions,
    gt_path, input_path, LoadedPair, ManifestRow, SimRanges, MANIFEST_FILE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::color::{BayerImage, SrgbImage, YccImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lit fraction of each subpixel stripe across its third of the cell.
pub const STRIPE_FILL: f64 = 0.8;
/// Lit fraction of a cell vertically.
pub const ROW_FILL: f64 = 0.9;
pub const DEFAULT_BLACK: u16 = 64;
const APERTURE_SUB: usize = 4;
pub const DEFAULT_WHITE: u16 = 1023;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SubpixelLayout {
    #[default]
    RgbStripe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenModel {
    /// Field samples per content pixel.
    pub subpixel_pitch: f64,
    pub subpixel_layout: SubpixelLayout,
    /// 0 shows content without panel structure, 1 fully blacks out gaps.
    pub grid_contrast: f64,
}

impl ScreenModel {
    pub fn new(subpixel_pitch: f64, grid_contrast: f64) -> Self {
        Self {
            subpixel_pitch,
            subpixel_layout: SubpixelLayout::RgbStripe,
            grid_contrast,
        }
    }

    /// Mean transmission of each colour channel's mask.
    pub fn duty_cycle(&self) -> f64 {
        let lit = STRIPE_FILL / 3.0 * ROW_FILL;
        1.0 - self.grid_contrast + self.grid_contrast * lit
    }

    fn validate(&self) -> Result<()> {
        if !(self.subpixel_pitch > 1.0) {
            return Err(Error::Invalid(format!(
                "subpixel pitch {} must exceed 1",
                self.subpixel_pitch
            )));
        }
        if !(0.0..=1.0).contains(&self.grid_contrast) {
            return Err(Error::Invalid(format!("grid contrast {} outside [0, 1]", self.grid_contrast)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptureModel {
    pub rotation_deg: f64,
    /// Sensor pixels per content pixel.
    pub scale: f64,
    /// Gaussian blur in sensor pixels.
    pub defocus_sigma: f64,
    /// Side of the light-sensitive square of each photosite as a fraction
    /// of the pixel pitch; 0 samples a single point.
    pub aperture: f64,
    pub luminance_gain: f64,
    /// Read noise as a fraction of the black-to-white range.
    pub read_noise_sigma: f64,
    pub seed: u64,
    pub black_level: u16,
    pub white_level: u16,
}

impl Default for CaptureModel {
    fn default() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            defocus_sigma: 0.0,
            aperture: 0.0,
            luminance_gain: 1.0,
            read_noise_sigma: 0.0,
            seed: 0,
            black_level: DEFAULT_BLACK,
            white_level: DEFAULT_WHITE,
        }
    }
}

impl CaptureModel {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.rotation_deg.is_finite() {
            return Err(Error::Invalid(format!(
                "capture geometry rotation {} scale {}",
                self.rotation_deg, self.scale
            )));
        }
        if !(self.defocus_sigma >= 0.0) || !(self.read_noise_sigma >= 0.0) {
            return Err(Error::Invalid("defocus and noise must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.aperture) {
            return Err(Error::Invalid(format!("aperture {} outside [0, 1]", self.aperture)));
        }
        if !(self.luminance_gain > 0.0) {
            return Err(Error::Invalid(format!("luminance gain {} must be positive", self.luminance_gain)));
        }
        if self.white_level <= self.black_level {
            return Err(Error::Invalid("white level must exceed black level".into()));
        }
        Ok(())
    }
}

/// Displayed radiance, three planes of `height x width` field samples.
#[derive(Clone, Debug)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub screen: ScreenModel,
    pub content_width: usize,
    pub content_height: usize,
    pub data: Vec<f64>,
}

impl Field {
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Radiance averaged over the panel area.
    pub fn mean_radiance(&self) -> f64 {
        let p = self.screen.subpixel_pitch;
        let area = self.content_width as f64 * p * self.content_height as f64 * p;
        self.data.iter().sum::<f64>() / (3.0 * area)
    }
}

/// Per field sample along one axis: `(cell, plain overlap, lit overlap per stripe)`.
type AxisWeights = Vec<Vec<(usize, f64, [f64; 3])>>;

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// `stripes` lit intervals per cell, stripe `k` centred at `(k + 0.5) / stripes`
/// of the cell with width `fill / stripes`.
fn axis_weights(cells: usize, pitch: f64, stripes: usize, fill: f64) -> AxisWeights {
    let len = (cells as f64 * pitch).ceil() as usize;
    (0..len)
        .map(|a| {
            let (a0, a1) = (a as f64, a as f64 + 1.0);
            let first = (a0 / pitch).floor() as usize;
            let last = ((a1 / pitch).ceil() as usize).min(cells);
            (first..last)
                .filter_map(|m| {
                    let c0 = m as f64 * pitch;
                    let plain = overlap(a0, a1, c0, c0 + pitch);
                    if plain <= 0.0 {
                        return None;
                    }
                    let mut lit = [0.0; 3];
                    for (k, l) in lit.iter_mut().enumerate().take(stripes) {
                        let centre = (k as f64 + 0.5) / stripes as f64;
                        let half = fill / stripes as f64 / 2.0;
                        *l = overlap(a0, a1, c0 + pitch * (centre - half), c0 + pitch * (centre + half));
                    }
                    if stripes == 1 {
                        lit = [lit[0]; 3];
                    }
                    Some((m, plain, lit))
                })
                .collect()
        })
        .collect()
}

/// Area-sampled panel radiance for `content`.
pub fn render_screen(content: &SrgbImage, screen: &ScreenModel) -> Result<Field> {
    screen.validate()?;
    let t = &content.tensor;
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("content values must lie in [0, 1]".into()));
    }
    let (cw, ch) = (content.width(), content.height());
    let p = screen.subpixel_pitch;
    let g = screen.grid_contrast;
    let wx = axis_weights(cw, p, 3, STRIPE_FILL);
    let wy = axis_weights(ch, p, 1, ROW_FILL);
    let (fw, fh) = (wx.len(), wy.len());
    let mut data = vec![0.0; 3 * fw * fh];
    for c in 0..3 {
        for (y, ry) in wy.iter().enumerate() {
            for (x, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(my, py, ly) in ry {
                    for &(mx, px, lx) in rx {
                        let v = t.at([0, c, my, mx]) as f64;
                        acc += v * ((1.0 - g) * px * py + g * lx[c] * ly[0]);
                    }
                }
                data[(c * fh + y) * fw + x] = acc;
            }
        }
    }
    Ok(Field {
        width: fw,
        height: fh,
        screen: *screen,
        content_width: cw,
        content_height: ch,
        data,
    })
}

/// Affine map from sensor pixel coordinates to content pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct ViewGeometry {
    cos: f64,
    sin: f64,
    inv_scale: f64,
    sensor_centre: (f64, f64),
    content_centre: (f64, f64),
}

impl ViewGeometry {
    pub fn new(cap: &CaptureModel, sensor: (usize, usize), content: (usize, usize)) -> Self {
        let th = cap.rotation_deg.to_radians();
        Self {
            cos: th.cos(),
            sin: th.sin(),
            inv_scale: 1.0 / cap.scale,
            sensor_centre: (sensor.0 as f64 / 2.0, sensor.1 as f64 / 2.0),
            content_centre: (content.0 as f64 / 2.0, content.1 as f64 / 2.0),
        }
    }

    /// Content coordinates of sensor position `(x, y)`.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = (x - self.sensor_centre.0) * self.inv_scale;
        let dy = (y - self.sensor_centre.1) * self.inv_scale;
        (
            self.content_centre.0 + self.cos * dx - self.sin * dy,
            self.content_centre.1 + self.sin * dx + self.cos * dy,
        )
    }

    /// Content size needed so the view of a `w x h` sensor stays on the panel
    /// with `pad` spare content pixels on every side.
    pub fn required_content(cap: &CaptureModel, w: usize, h: usize, pad: usize) -> (usize, usize) {
        let th = cap.rotation_deg.to_radians();
        let (c, s) = (th.cos().abs(), th.sin().abs());
        let need_w = (c * w as f64 + s * h as f64) / cap.scale;
        let need_h = (s * w as f64 + c * h as f64) / cap.scale;
        // Even sizes keep the centres aligned to pixel corners.
        let round = |v: f64| {
            let n = v.ceil() as usize + 2 * pad;
            n + n % 2
        };
        (round(need_w), round(need_h))
    }
}

fn bilinear(field: &Field, c: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let a = field.at(c, y0, x0);
    let b = field.at(c, y0, x0 + 1);
    let cc = field.at(c, y0 + 1, x0);
    let d = field.at(c, y0 + 1, x0 + 1);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (cc * (1.0 - fx) + d * fx) * fy
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of one `h x w` plane with edge replication.
fn blur_plane(p: &mut [f64], w: usize, h: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; p.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p[y * w + (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            p[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
}

#[inline]
pub fn cfa_channel(x: usize, y: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Photograph `field` with a `width x height` RGGB sensor.
///
/// The exposure is normalized by the panel duty cycle, so a gain of one
/// reproduces the content brightness on average.
pub fn simulate_capture(field: &Field, cap: &CaptureModel, width: usize, height: usize) -> Result<BayerImage> {
    cap.validate()?;
    if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
        return Err(Error::Invalid(format!("sensor {width}x{height} must be even and non-empty")));
    }
    let geo = ViewGeometry::new(cap, (width, height), (field.content_width, field.content_height));
    let p = field.screen.subpixel_pitch;
    let to_field = |x: f64, y: f64| {
        let (cx, cy) = geo.map(x, y);
        (cx * p - 0.5, cy * p - 0.5)
    };
    // Photosite integration: an APERTURE_SUB x APERTURE_SUB grid of
    // bilinear samples spread over the aperture square.
    let sub = if cap.aperture > 0.0 { APERTURE_SUB } else { 1 };
    let offsets: Vec<f64> = (0..sub)
        .map(|k| ((k as f64 + 0.5) / sub as f64 - 0.5) * cap.aperture)
        .collect();
    let (lo, hi) = (offsets[0], offsets[sub - 1]);
    for (x, y) in [
        (0.5 + lo, 0.5 + lo),
        (width as f64 - 0.5 + hi, 0.5 + lo),
        (0.5 + lo, height as f64 - 0.5 + hi),
        (width as f64 - 0.5 + hi, height as f64 - 0.5 + hi),
    ] {
        let (fx, fy) = to_field(x, y);
        if fx < 0.0 || fy < 0.0 || fx >= (field.width - 1) as f64 || fy >= (field.height - 1) as f64 {
            return Err(Error::Invalid(format!(
                "capture footprint leaves the panel at sensor ({x}, {y}); content {}x{} is too small",
                field.content_width, field.content_height
            )));
        }
    }

    let hw = width * height;
    let inv = 1.0 / (sub * sub) as f64;
    let mut rgb = vec![0.0; 3 * hw];
    for y in 0..height {
        for x in 0..width {
            for &oy in &offsets {
                for &ox in &offsets {
                    let (fx, fy) = to_field(x as f64 + 0.5 + ox, y as f64 + 0.5 + oy);
                    for c in 0..3 {
                        rgb[c * hw + y * width + x] += inv * bilinear(field, c, fx, fy);
                    }
                }
            }
        }
    }
    for c in 0..3 {
        blur_plane(&mut rgb[c * hw..(c + 1) * hw], width, height, cap.defocus_sigma);
    }

    let exposure = cap.luminance_gain / field.screen.duty_cycle();
    let range = (cap.white_level - cap.black_level) as f64;
    let noise = Normal::new(0.0, cap.read_noise_sigma * range).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cap.seed);
    let mut data = Vec::with_capacity(hw);
    for y in 0..height {
        for x in 0..width {
            let v = (rgb[cfa_channel(x, y) * hw + y * width + x] * exposure).min(1.0);
            let mut dn = cap.black_level as f64 + v * range;
            if cap.read_noise_sigma > 0.0 {
                dn += noise.sample(&mut rng);
            }
            data.push(dn.round().clamp(0.0, cap.white_level as f64) as u16);
        }
    }
    BayerImage::new(width, height, data, cap.black_level, cap.white_level)
}

/// Clean target: content seen through the capture geometry, box-filtered over
/// each sensor pixel and quantized to 8 bits.
pub fn render_target(content: &SrgbImage, cap: &CaptureModel, width: usize, height: usize) -> Result<SrgbImage> {
    const SUB: usize = 4;
    let (cw, ch) = (content.width(), content.height());
    let geo = ViewGeometry::new(cap, (width, height), (cw, ch));
    let t = &content.tensor;
    let mut out = Tensor::zeros([1, 3, height, width]);
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    let (cx, cy) = geo.map(px, py);
                    if cx < 0.0 || cy < 0.0 || cx >= cw as f64 || cy >= ch as f64 {
                        return Err(Error::Invalid("target footprint leaves the content".into()));
                    }
                    let (ix, iy) = (cx as usize, cy as usize);
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += t.at([0, c, iy, ix]) as f64;
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                let v = a / (SUB * SUB) as f64;
                out.set([0, c, y, x], quantize8(v));
            }
        }
    }
    SrgbImage::new(out)
}

/// `round(v * 255) / 255`, the value a PNG round trip yields.
pub fn quantize8(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub input: BayerImage,
    pub gt_srgb: SrgbImage,
    pub gt_ycc: YccImage,
    pub meta: ManifestRow,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_weights_partition_each_sample() {
        for pitch in [1.5, 2.0, 3.7, 4.0] {
            let w = axis_weights(7, pitch, 3, 0.8);
            let total: f64 = w.iter().flatten().map(|(_, p, _)| p).sum();
            assert!((total - 7.0 * pitch).abs() < 1e-9);
            let lit: f64 = w.iter().flatten().map(|(_, _, l)| l[1]).sum();
            assert!((lit - 7.0 * pitch * 0.8 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn required_content_covers_rotation() {
        let cap = CaptureModel {
            rotation_deg: 4.0,
            scale: 1.05,
            ..Default::default()
        };
        let (w, h) = ViewGeometry::required_content(&cap, 64, 64, 2);
        assert!(w >= 64 && h >= 64 && w % 2 == 0 && h % 2 == 0);
    }
}
