//! On-disk image formats.
//!
//! Raw mosaics are 16-bit binary PGM (`P5`, big-endian samples, maxval equal
//! to the white level) with a sidecar text header of `key=value` lines:
//!
//! ```text
//! cfa=RGGB
//! black=64
//! white=1023
//! ```
//!
//! The sidecar shares the PGM stem with the extension `.hdr`. sRGB images are
//! 8-bit RGB PNG with values mapped by `round(v * 255)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::color::{BayerImage, Cfa, SrgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("hdr")
}

pub fn write_bayer(path: &Path, img: &BayerImage) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + img.data.len() * 2);
    write!(buf, "P5\n{} {}\n{}\n", img.width, img.height, img.white_level).expect("vec write");
    for &v in &img.data {
        buf.extend_from_slice(&v.min(img.white_level).to_be_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let header = format!(
        "cfa={}\nblack={}\nwhite={}\n",
        img.cfa.as_str(),
        img.black_level,
        img.white_level
    );
    let hdr = sidecar_path(path);
    fs::write(&hdr, header).map_err(|e| Error::io(&hdr, e))
}

pub fn read_bayer(path: &Path) -> Result<BayerImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, data) = parse_pgm(&bytes).map_err(|m| Error::Invalid(format!("{}: {m}", path.display())))?;

    let hdr_path = sidecar_path(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let mut cfa = None;
    let mut black = None;
    let mut white = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Invalid(format!("{}: malformed line `{line}`", hdr_path.display())));
        };
        let parse_level = |v: &str| {
            v.trim()
                .parse::<u16>()
                .map_err(|_| Error::Invalid(format!("{}: bad level `{v}`", hdr_path.display())))
        };
        match k.trim() {
            "cfa" => cfa = Some(Cfa::parse(v)?),
            "black" => black = Some(parse_level(v)?),
            "white" => white = Some(parse_level(v)?),
            _ => {}
        }
    }
    let missing = |k: &str| Error::Invalid(format!("{}: missing `{k}`", hdr_path.display()));
    let cfa = cfa.ok_or_else(|| missing("cfa"))?;
    let black = black.ok_or_else(|| missing("black"))?;
    let white = white.ok_or_else(|| missing("white"))?;
    if maxval != white as u32 {
        return Err(Error::Invalid(format!(
            "{}: PGM maxval {maxval} differs from white level {white}",
            path.display()
        )));
    }
    let mut img = BayerImage::new(width, height, data, black, white)?;
    img.cfa = cfa;
    Ok(img)
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, u32, Vec<u16>), String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| s.parse::<u32>().map_err(|_| format!("bad PGM number `{s}`"));
    let width = num(token()?)? as usize;
    let height = num(token()?)? as usize;
    let maxval = num(token()?)?;
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} out of range"));
    }
    let n = width * height;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let body = bytes.get(pos..pos + need).ok_or("truncated PGM data")?;
    let data = if wide {
        body.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        body.iter().map(|&b| b as u16).collect()
    };
    Ok((width, height, maxval, data))
}

/// Quantize to 8 bits with `round(v * 255)` after clamping.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn srgb_to_rgb8(img: &SrgbImage) -> Vec<u8> {
    let [_, _, h, w] = img.tensor.shape();
    let hw = h * w;
    let d = img.tensor.data();
    let mut out = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push(to_u8(d[c * hw + p]));
        }
    }
    out
}

pub fn rgb8_to_srgb(width: usize, height: usize, rgb: &[u8]) -> Result<SrgbImage> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Invalid("RGB buffer size mismatch".into()));
    }
    let hw = width * height;
    let t = Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| {
        rgb[(y * width + x) * 3 + c] as f32 / 255.0
    });
    debug_assert_eq!(t.len(), 3 * hw);
    SrgbImage::new(t)
}

pub fn write_png(path: &Path, img: &SrgbImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&srgb_to_rgb8(img))
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

pub fn read_png(path: &Path) -> Result<SrgbImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Png(format!("unsupported colour type {other:?}"))),
    };
    rgb8_to_srgb(w, h, &rgb)
}
