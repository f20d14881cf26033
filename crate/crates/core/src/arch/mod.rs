//! The dual-stream demoiréing network.
//!
//! A raw stream (packed RGGB, Mamba-style scan blocks) and a guidance stream
//! (green-averaged raw converted to YCbCr, dilated-convolution blocks) are
//! encoded side by side and exchange information once per scale. The decoder
//! injects upsampled guidance features into the raw decoder at every scale
//! and ends with a pixel-shuffle head that emits sRGB at twice the packed
//! resolution, plus an auxiliary guidance-space output at packed resolution.

pub mod attention;
pub mod blocks;
pub mod layers;
mod net;

pub use attention::{channel_attention, AttentionOut, ConcatFusion, DynamicGate, Lcat, LcatTrace, Modulation, Sadm, SadmTrace};
pub use blocks::{Cgb, CgbTrace, Cmb, Gmlp, ScanDirection, Ss2d};
pub use layers::{Builder, Conv, DwConv, Ffn, Norm};
pub use net::{DsdNet, NetOutput};

use crate::color::GuideSpace;
use crate::error::{Error, Result};

/// Which components are present. Names follow the ablation table rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// Both streams, SADM fusion, LCAT decoder.
    #[default]
    Full,
    /// Raw stream only.
    NoYcc,
    /// Both streams fused by concatenation, no LCAT.
    NoSadmLcat,
    /// SADM fusion, no LCAT.
    NoLcat,
    /// Concatenation fusion, LCAT decoder.
    NoSadm,
    /// Guidance stream alone.
    YccOnly,
    /// Full network with an HSV guidance stream.
    HsvBranch,
    /// Full network with a YUV guidance stream.
    YuvBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Sadm,
    Concat,
    None,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoYcc,
        Variant::NoSadmLcat,
        Variant::NoLcat,
        Variant::NoSadm,
        Variant::YccOnly,
        Variant::HsvBranch,
        Variant::YuvBranch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoYcc => "no_ycc",
            Variant::NoSadmLcat => "no_sadm_lcat",
            Variant::NoLcat => "no_lcat",
            Variant::NoSadm => "no_sadm",
            Variant::YccOnly => "ycc_only",
            Variant::HsvBranch => "hsv_branch",
            Variant::YuvBranch => "yuv_branch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }

    /// Row number in the key-component ablation, if the variant is one.
    pub fn table_row(self) -> Option<usize> {
        match self {
            Variant::NoYcc => Some(1),
            Variant::NoSadmLcat => Some(2),
            Variant::NoLcat => Some(3),
            Variant::NoSadm => Some(4),
            Variant::Full => Some(5),
            _ => None,
        }
    }

    pub fn has_raw(self) -> bool {
        self != Variant::YccOnly
    }

    pub fn has_guide(self) -> bool {
        self != Variant::NoYcc
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Variant::NoYcc | Variant::YccOnly => FusionKind::None,
            Variant::NoSadmLcat | Variant::NoSadm => FusionKind::Concat,
            _ => FusionKind::Sadm,
        }
    }

    pub fn has_lcat(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoSadm | Variant::HsvBranch | Variant::YuvBranch
        )
    }

    pub fn guide_space(self) -> GuideSpace {
        match self {
            Variant::HsvBranch => GuideSpace::Hsv,
            Variant::YuvBranch => GuideSpace::Yuv,
            _ => GuideSpace::Ycc,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DsdNetConfig {
    pub base_channels: usize,
    pub n_scales: usize,
    pub blocks_per_scale: usize,
    /// Blocks per stream at each decoder scale.
    pub decoder_blocks: usize,
    /// Attention heads per scale.
    pub heads: Vec<usize>,
    pub ssm_state_dim: usize,
    pub ffn_expansion: f64,
    pub target_params: Option<usize>,
    pub variant: Variant,
}

impl Default for DsdNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 36,
            n_scales: 3,
            blocks_per_scale: 2,
            decoder_blocks: 2,
            heads: vec![1, 2, 4],
            ssm_state_dim: 8,
            ffn_expansion: 2.0,
            target_params: Some(2_770_000),
            variant: Variant::Full,
        }
    }
}

impl DsdNetConfig {
    /// Small configuration for gradient checks and desk-scale training.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            n_scales: 2,
            blocks_per_scale: 1,
            decoder_blocks: 0,
            heads: vec![1, 2],
            ssm_state_dim: 4,
            ffn_expansion: 2.0,
            target_params: None,
            variant: Variant::Full,
        }
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn heads_at(&self, scale: usize) -> usize {
        self.heads.get(scale).copied().unwrap_or(1)
    }

    /// Spatial divisibility the network needs on the packed input.
    pub fn stride(&self) -> usize {
        1 << (self.n_scales.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 {
            return Err(Error::Config("n_scales must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.heads.len() < self.n_scales {
            return Err(Error::Config(format!(
                "{} head counts given for {} scales",
                self.heads.len(),
                self.n_scales
            )));
        }
        let max_heads = self.heads[..self.n_scales].iter().copied().max().unwrap_or(1);
        if max_heads == 0 || !self.base_channels.is_multiple_of(max_heads) {
            return Err(Error::Config(format!(
                "base_channels {} not divisible by max heads {}",
                self.base_channels, max_heads
            )));
        }
        for s in 0..self.n_scales {
            if !self.width(s).is_multiple_of(self.heads_at(s)) {
                return Err(Error::Config(format!("scale {s}: width not divisible by heads")));
            }
        }
        if self.ssm_state_dim == 0 {
            return Err(Error::Config("ssm_state_dim must be positive".into()));
        }
        if !(self.ffn_expansion > 0.0) {
            return Err(Error::Config("ffn_expansion must be positive".into()));
        }
        Ok(())
    }
}

/// Number of trainable scalars of the network described by `config`.
pub fn count_params(config: &DsdNetConfig) -> Result<usize> {
    Ok(DsdNet::new(config, 0)?.1.num_scalars())
}
