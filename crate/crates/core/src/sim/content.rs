use std::path::{Path, PathBuf};

use rand::Rng;

use super::quantize8;
use crate::color::SrgbImage;
use crate::error::{Error, Result};
use crate::io::read_png;
use crate::tensor::Tensor;

/// Families of procedural screen content.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContentKind {
    /// Flat panels, bars and text-like strokes on a light background.
    Interface,
    /// Smooth gradients with soft blobs.
    Photo,
    /// Discs and wide stripes.
    Chart,
}

impl ContentKind {
    pub const ALL: [ContentKind; 3] = [ContentKind::Interface, ContentKind::Photo, ContentKind::Chart];

    pub fn name(self) -> &'static str {
        match self {
            ContentKind::Interface => "interface",
            ContentKind::Photo => "photo",
            ContentKind::Chart => "chart",
        }
    }
}

fn colour<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Procedural content, 8-bit quantized so it survives a PNG round trip.
pub fn procedural_content<R: Rng + ?Sized>(kind: ContentKind, width: usize, height: usize, rng: &mut R) -> SrgbImage {
    let (w, h) = (width as f64, height as f64);
    let mut img = vec![[0.0f64; 3]; width * height];
    match kind {
        ContentKind::Interface => {
            let bg = colour(rng, 0.75, 0.95);
            img.iter_mut().for_each(|p| *p = bg);
            let panels = rng.random_range(3..7);
            for _ in 0..panels {
                let x0 = rng.random_range(0.0..w * 0.8);
                let y0 = rng.random_range(0.0..h * 0.8);
                let pw = rng.random_range(w * 0.15..w * 0.5);
                let ph = rng.random_range(h * 0.1..h * 0.4);
                let c = colour(rng, 0.1, 0.9);
                fill(&mut img, width, |x, y| x >= x0 && x < x0 + pw && y >= y0 && y < y0 + ph, c);
            }
            // Text-like rows of short strokes.
            let rows = rng.random_range(3..9);
            let ink = colour(rng, 0.05, 0.3);
            for r in 0..rows {
                let y0 = h * (r as f64 + 0.5) / rows as f64;
                let stroke = rng.random_range(1.5..3.5);
                let period = rng.random_range(5.0..11.0);
                let phase = rng.random_range(0.0..period);
                fill(
                    &mut img,
                    width,
                    |x, y| (y - y0).abs() < stroke && ((x + phase) % period) < period * 0.6,
                    ink,
                );
            }
        }
        ContentKind::Photo => {
            let a = colour(rng, 0.1, 0.9);
            let b = colour(rng, 0.1, 0.9);
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (ang.cos(), ang.sin());
            for y in 0..height {
                for x in 0..width {
                    let t = ((x as f64 / w - 0.5) * dx + (y as f64 / h - 0.5) * dy + 0.5).clamp(0.0, 1.0);
                    img[y * width + x] = [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t);
                }
            }
            for _ in 0..rng.random_range(2..6) {
                let cx = rng.random_range(0.0..w);
                let cy = rng.random_range(0.0..h);
                let s = rng.random_range(0.05..0.25) * w.min(h);
                let c = colour(rng, 0.0, 1.0);
                let amt = rng.random_range(0.3..0.8);
                for y in 0..height {
                    for x in 0..width {
                        let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s);
                        let k = amt * (-d2).exp();
                        let p = &mut img[y * width + x];
                        for ch in 0..3 {
                            p[ch] = p[ch] * (1.0 - k) + c[ch] * k;
                        }
                    }
                }
            }
        }
        ContentKind::Chart => {
            let a = colour(rng, 0.2, 0.9);
            let b = colour(rng, 0.2, 0.9);
            let period = rng.random_range(12.0..40.0);
            let vertical = rng.random_bool(0.5);
            for y in 0..height {
                for x in 0..width {
                    let u = if vertical { x as f64 } else { y as f64 };
                    img[y * width + x] = if (u / period).floor() as i64 % 2 == 0 { a } else { b };
                }
            }
            for _ in 0..rng.random_range(2..6) {
                let cx = rng.random_range(0.0..w);
                let cy = rng.random_range(0.0..h);
                let r = rng.random_range(0.05..0.2) * w.min(h);
                let c = colour(rng, 0.0, 1.0);
                fill(&mut img, width, |x, y| (x - cx).powi(2) + (y - cy).powi(2) < r * r, c);
            }
        }
    }
    let t = Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| quantize8(img[y * width + x][c]));
    SrgbImage { tensor: t }
}

fn fill(img: &mut [[f64; 3]], width: usize, inside: impl Fn(f64, f64) -> bool, c: [f64; 3]) {
    for (i, p) in img.iter_mut().enumerate() {
        let (x, y) = ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5);
        if inside(x, y) {
            *p = c;
        }
    }
}

/// PNG files in `dir`, sorted by name.
pub fn load_content_dir(dir: &Path) -> Result<Vec<(PathBuf, SrgbImage)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let img = read_png(&p)?;
            Ok((p, img))
        })
        .collect()
}
