//! Network inputs, training targets and augmentation.

use rand::Rng;

use crate::arch::Variant;
use crate::color::{bayer_to_guide, box_downsample2, pack_rggb, BayerImage, SrgbImage};
use crate::error::{Error, Result};
use crate::sim::LoadedPair;
use crate::tensor::Tensor;

/// One network-ready example. Batched examples stack along the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Packed RGGB planes, `(n, 4, h/2, w/2)`.
    pub raw: Tensor<f32>,
    /// Guidance-space planes, `(n, 3, h/2, w/2)`.
    pub guide: Tensor<f32>,
    /// Target sRGB, `(n, 3, h, w)`.
    pub gt: Tensor<f32>,
    /// Target for the auxiliary head: the guidance-space transform of the
    /// target, box-averaged to the packed resolution.
    pub aux_gt: Tensor<f32>,
}

pub fn network_inputs(bayer: &BayerImage, variant: Variant) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let raw = pack_rggb(bayer)?.tensor;
    let guide = bayer_to_guide(bayer, variant.guide_space())?;
    Ok((raw, guide))
}

pub fn make_sample(bayer: &BayerImage, gt: &SrgbImage, variant: Variant) -> Result<Sample> {
    if gt.width() != bayer.width || gt.height() != bayer.height {
        return Err(Error::Shape(format!(
            "mosaic {}x{} vs target {}x{}",
            bayer.width,
            bayer.height,
            gt.width(),
            gt.height()
        )));
    }
    let (raw, guide) = network_inputs(bayer, variant)?;
    let aux_gt = box_downsample2(&variant.guide_space().convert(&gt.tensor))?;
    Ok(Sample {
        raw,
        guide,
        gt: gt.tensor.clone(),
        aux_gt,
    })
}

pub fn stack(samples: &[Sample]) -> Result<Sample> {
    let col = |f: fn(&Sample) -> &Tensor<f32>| Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
    Ok(Sample {
        raw: col(|s| &s.raw)?,
        guide: col(|s| &s.guide)?,
        gt: col(|s| &s.gt)?,
        aux_gt: col(|s| &s.aux_gt)?,
    })
}

/// Crop window and flip flag in mosaic coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub hflip: bool,
}

impl Augment {
    /// Draws a crop of side `size` from a `width x height` mosaic.
    ///
    /// Offsets are even so the crop starts on an R site. A mirrored crop
    /// reads columns right to left starting one column in from an odd
    /// edge, which again lands on R; mirroring therefore needs one spare
    /// column and is skipped for crops as wide as the image.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, size: usize, allow_flip: bool) -> Result<Self> {
        if !size.is_multiple_of(2) || size > width || size > height {
            return Err(Error::Shape(format!("crop {size} does not fit a {width}x{height} mosaic")));
        }
        let hflip = allow_flip && width > size && rng.random_bool(0.5);
        let y0 = 2 * rng.random_range(0..=(height - size) / 2);
        // For a flip, x0 is the first source column of the mirrored crop's
        // right edge: columns x0 + 1 ..= x0 + size are read in reverse.
        let x0 = if hflip {
            2 * rng.random_range(0..=(width - size - 1) / 2)
        } else {
            2 * rng.random_range(0..=(width - size) / 2)
        };
        Ok(Self { x0, y0, size, hflip })
    }

    /// Source column for output column `x`.
    fn src_x(&self, x: usize) -> usize {
        if self.hflip {
            self.x0 + self.size - x
        } else {
            self.x0 + x
        }
    }

    pub fn apply_bayer(&self, b: &BayerImage) -> Result<BayerImage> {
        let s = self.size;
        let mut data = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                data.push(b.at(self.src_x(x), self.y0 + y));
            }
        }
        BayerImage::new(s, s, data, b.black_level, b.white_level)
    }

    pub fn apply_srgb(&self, img: &SrgbImage) -> SrgbImage {
        let t = &img.tensor;
        SrgbImage {
            tensor: Tensor::from_fn([1, 3, self.size, self.size], |[_, c, y, x]| t.at([0, c, self.y0 + y, self.src_x(x)])),
        }
    }
}

/// A random augmented crop of `pair`.
pub fn augmented_sample<R: Rng + ?Sized>(pair: &LoadedPair, crop: usize, hflip: bool, variant: Variant, rng: &mut R) -> Result<Sample> {
    let a = Augment::draw(rng, pair.input.width, pair.input.height, crop, hflip)?;
    make_sample(&a.apply_bayer(&pair.input)?, &a.apply_srgb(&pair.gt), variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfa(x: usize, y: usize) -> usize {
        match (y % 2, x % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    }

    #[test]
    fn flipped_crops_keep_the_cfa_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = Augment::draw(&mut rng, 20, 14, 8, true).unwrap();
            assert_eq!(a.y0 % 2, 0);
            for y in 0..8 {
                for x in 0..8 {
                    let sx = a.src_x(x);
                    assert!(sx < 20);
                    assert_eq!(cfa(sx, a.y0 + y), cfa(x, y), "{a:?}");
                }
            }
        }
    }

    #[test]
    fn full_width_crop_never_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = Augment::draw(&mut rng, 16, 16, 16, true).unwrap();
            assert_eq!((a.x0, a.y0, a.hflip), (0, 0, false));
        }
    }
}
