use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::content::{procedural_content, ContentKind};
use super::{render_screen, render_target, simulate_capture, CaptureModel, ScreenModel, SynthPair, ViewGeometry};
use super::{DEFAULT_BLACK, DEFAULT_WHITE};
use crate::color::{demosaic_bilinear, srgb_to_ycc, BayerImage, SrgbImage};
use crate::error::{Error, Result};
use crate::io::{read_bayer, read_png, write_bayer, write_png};
use crate::metrics::psnr;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

const COLUMNS: [&str; 16] = [
    "index",
    "seed",
    "content",
    "subpixel_pitch",
    "grid_contrast",
    "rotation_deg",
    "scale",
    "defocus_sigma",
    "aperture",
    "luminance_gain",
    "read_noise_sigma",
    "black",
    "white",
    "width",
    "height",
    "degraded_psnr",
];

/// Inclusive draw ranges for the generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SimRanges {
    pub subpixel_pitch: (f64, f64),
    pub grid_contrast: (f64, f64),
    /// Magnitude; the sign is drawn separately.
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub defocus_sigma: (f64, f64),
    pub aperture: (f64, f64),
    pub luminance_gain: (f64, f64),
    pub read_noise_sigma: (f64, f64),
}

impl Default for SimRanges {
    fn default() -> Self {
        Self {
            subpixel_pitch: (2.5, 4.0),
            grid_contrast: (0.4, 0.9),
            rotation_deg: (0.5, 6.0),
            scale: (0.92, 1.12),
            defocus_sigma: (0.0, 0.6),
            aperture: (0.6, 1.0),
            luminance_gain: (0.7, 0.95),
            read_noise_sigma: (0.0, 0.004),
        }
    }
}

impl SimRanges {
    /// Pitch and rotation ranges disjoint from the default ones, for probing
    /// generalization to unseen capture conditions.
    pub fn held_out() -> Self {
        Self {
            subpixel_pitch: (4.0, 4.8),
            rotation_deg: (6.0, 10.0),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub enum ContentSource {
    #[default]
    Procedural,
    /// Named images; each pair takes a random crop of one.
    Images(Vec<(String, SrgbImage)>),
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub n: usize,
    pub seed: u64,
    /// Sensor width and height in mosaic pixels.
    pub width: usize,
    pub height: usize,
    pub ranges: SimRanges,
    pub content: ContentSource,
    pub black_level: u16,
    pub white_level: u16,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n: 8,
            seed: 0,
            width: 256,
            height: 256,
            ranges: SimRanges::default(),
            content: ContentSource::Procedural,
            black_level: DEFAULT_BLACK,
            white_level: DEFAULT_WHITE,
        }
    }
}

/// Generator parameters and the measured degradation of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub index: usize,
    pub seed: u64,
    pub content: String,
    pub screen: ScreenModel,
    pub capture: CaptureModel,
    pub width: usize,
    pub height: usize,
    /// PSNR of the bilinear demosaic of the input against the target.
    pub degraded_psnr: f64,
}

impl ManifestRow {
    fn record(&self) -> Vec<String> {
        let c = &self.capture;
        vec![
            self.index.to_string(),
            self.seed.to_string(),
            self.content.clone(),
            self.screen.subpixel_pitch.to_string(),
            self.screen.grid_contrast.to_string(),
            c.rotation_deg.to_string(),
            c.scale.to_string(),
            c.defocus_sigma.to_string(),
            c.aperture.to_string(),
            c.luminance_gain.to_string(),
            c.read_noise_sigma.to_string(),
            c.black_level.to_string(),
            c.white_level.to_string(),
            self.width.to_string(),
            self.height.to_string(),
            self.degraded_psnr.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != COLUMNS.len() {
            return Err(Error::Invalid(format!("manifest row has {} fields, expected {}", rec.len(), COLUMNS.len())));
        }
        fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("manifest column {}: bad value `{}`", COLUMNS[i], &rec[i])))
        }
        Ok(Self {
            index: num(rec, 0)?,
            seed: num(rec, 1)?,
            content: rec[2].to_string(),
            screen: ScreenModel::new(num(rec, 3)?, num(rec, 4)?),
            capture: CaptureModel {
                rotation_deg: num(rec, 5)?,
                scale: num(rec, 6)?,
                defocus_sigma: num(rec, 7)?,
                aperture: num(rec, 8)?,
                luminance_gain: num(rec, 9)?,
                read_noise_sigma: num(rec, 10)?,
                black_level: num(rec, 11)?,
                white_level: num(rec, 12)?,
                seed: num(rec, 1)?,
            },
            width: num(rec, 13)?,
            height: num(rec, 14)?,
            degraded_psnr: num(rec, 15)?,
        })
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn crop(img: &SrgbImage, x0: usize, y0: usize, w: usize, h: usize) -> SrgbImage {
    let t = &img.tensor;
    SrgbImage {
        tensor: Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| t.at([0, c, y0 + y, x0 + x])),
    }
}

/// Builds pair `index` of the dataset described by `opts`.
pub fn generate_pair(opts: &GenerateOptions, index: usize) -> Result<SynthPair> {
    let mut rng = pair_rng(opts.seed, index);
    let r = &opts.ranges;
    let screen = ScreenModel::new(draw(&mut rng, r.subpixel_pitch), draw(&mut rng, r.grid_contrast));
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let capture = CaptureModel {
        rotation_deg: sign * draw(&mut rng, r.rotation_deg),
        scale: draw(&mut rng, r.scale),
        defocus_sigma: draw(&mut rng, r.defocus_sigma),
        aperture: draw(&mut rng, r.aperture),
        luminance_gain: draw(&mut rng, r.luminance_gain),
        read_noise_sigma: draw(&mut rng, r.read_noise_sigma),
        seed: rng.random(),
        black_level: opts.black_level,
        white_level: opts.white_level,
    };
    let (cw, ch) = ViewGeometry::required_content(&capture, opts.width, opts.height, 2);
    let (name, content) = match &opts.content {
        ContentSource::Procedural => {
            let kind = ContentKind::ALL[rng.random_range(0..ContentKind::ALL.len())];
            (format!("procedural:{}", kind.name()), procedural_content(kind, cw, ch, &mut rng))
        }
        ContentSource::Images(list) => {
            if list.is_empty() {
                return Err(Error::Invalid("content source has no images".into()));
            }
            let (name, img) = &list[rng.random_range(0..list.len())];
            if img.width() < cw || img.height() < ch {
                return Err(Error::Invalid(format!(
                    "content `{name}` is {}x{}, pair {index} needs at least {cw}x{ch}",
                    img.width(),
                    img.height()
                )));
            }
            let x0 = rng.random_range(0..=img.width() - cw);
            let y0 = rng.random_range(0..=img.height() - ch);
            (name.clone(), crop(img, x0, y0, cw, ch))
        }
    };
    let field = render_screen(&content, &screen)?;
    let input = simulate_capture(&field, &capture, opts.width, opts.height)?;
    let gt_srgb = render_target(&content, &capture, opts.width, opts.height)?;
    let gt_ycc = srgb_to_ycc(&gt_srgb);
    let degraded_psnr = psnr(&demosaic_bilinear(&input)?, &gt_srgb)?;
    let meta = ManifestRow {
        index,
        seed: capture.seed,
        content: name,
        screen,
        capture,
        width: opts.width,
        height: opts.height,
        degraded_psnr,
    };
    Ok(SynthPair {
        input,
        gt_srgb,
        gt_ycc,
        meta,
    })
}

pub fn input_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("pair_{index:05}_input.pgm"))
}

pub fn gt_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("pair_{index:05}_gt.png"))
}

/// Writes `opts.n` pairs and the manifest into `dir`.
pub fn dataset_generate(dir: &Path, opts: &GenerateOptions) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let pair = generate_pair(opts, i)?;
        write_bayer(&input_path(dir, i), &pair.input)?;
        write_png(&gt_path(dir, i), &pair.gt_srgb)?;
        log::debug!("pair {i}: degraded PSNR {:.2} dB", pair.meta.degraded_psnr);
        rows.push(pair.meta);
    }
    write_manifest(dir, &rows)?;
    Ok(rows)
}

fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(COLUMNS) {
        return Err(Error::Invalid(format!("{}: unexpected header", path.display())));
    }
    r.records().map(|rec| ManifestRow::parse(&rec.map_err(csv_err)?)).collect()
}

/// SHA-256 of the manifest file, lowercase hex.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub meta: ManifestRow,
    pub input: BayerImage,
    pub gt: SrgbImage,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedPair>> {
    read_manifest(dir)?
        .into_iter()
        .map(|meta| {
            let input = read_bayer(&input_path(dir, meta.index))?;
            let gt = read_png(&gt_path(dir, meta.index))?;
            if gt.width() != input.width || gt.height() != input.height {
                return Err(Error::Invalid(format!(
                    "pair {}: input {}x{} vs target {}x{}",
                    meta.index,
                    input.width,
                    input.height,
                    gt.width(),
                    gt.height()
                )));
            }
            Ok(LoadedPair { meta, input, gt })
        })
        .collect()
}
