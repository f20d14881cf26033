//! In-browser demo: simulate a moiré screen capture, run the network on the
//! raw mosaic and score the result against the clean screen content.

use demoire::arch::DsdNet;
use demoire::color::{demosaic_bilinear, BayerImage, SrgbImage};
use demoire::harness::{load_model, network_inputs, Checkpoint};
use demoire::io::srgb_to_rgb8;
use demoire::metrics::{evaluate_pair, ImageMetrics};
use demoire::sim::{
    procedural_content, render_screen, render_target, simulate_capture, CaptureModel, ContentKind, ScreenModel,
    ViewGeometry,
};
use demoire::tensor::ParamStore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Weights shipped with the page, trained with the `small` preset.
static BUNDLED: &[u8] = include_bytes!("../assets/demo.ckpt");

pub const SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub content: ContentKind,
    pub pitch: f64,
    pub contrast: f64,
    pub rotation_deg: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            content: ContentKind::Interface,
            pitch: 3.2,
            contrast: 0.7,
            rotation_deg: 2.5,
            scale: 1.04,
            seed: 1,
        }
    }
}

pub struct Capture {
    pub input: BayerImage,
    /// Bilinear demosaic of the input.
    pub naive: SrgbImage,
    pub target: SrgbImage,
}

pub fn capture(scene: &Scene) -> demoire::Result<Capture> {
    let cap = CaptureModel {
        rotation_deg: scene.rotation_deg,
        scale: scene.scale,
        defocus_sigma: 0.3,
        aperture: 0.8,
        luminance_gain: 0.85,
        read_noise_sigma: 0.002,
        seed: scene.seed,
        ..Default::default()
    };
    let (cw, ch) = ViewGeometry::required_content(&cap, SIZE, SIZE, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let content = procedural_content(scene.content, cw, ch, &mut rng);
    let field = render_screen(&content, &ScreenModel::new(scene.pitch, scene.contrast))?;
    let input = simulate_capture(&field, &cap, SIZE, SIZE)?;
    Ok(Capture {
        naive: demosaic_bilinear(&input)?.clamped(),
        target: render_target(&content, &cap, SIZE, SIZE)?,
        input,
    })
}

pub struct Model {
    net: DsdNet,
    store: ParamStore<f32>,
    pub steps: u64,
}

impl Model {
    pub fn from_bytes(bytes: &[u8]) -> demoire::Result<Self> {
        let ck = Checkpoint::from_bytes(bytes)?;
        let (_, net, store) = load_model(&ck)?;
        Ok(Self { net, store, steps: ck.step })
    }

    pub fn describe(&self) -> String {
        format!(
            "{} network, {} parameters, {} training steps",
            self.net.variant,
            self.store.num_scalars(),
            self.steps
        )
    }

    pub fn run(&self, bayer: &BayerImage) -> demoire::Result<SrgbImage> {
        let (raw, guide) = network_inputs(bayer, self.net.variant)?;
        let (srgb, _, _) = self.net.infer(&self.store, &raw, &guide)?;
        Ok(SrgbImage::new(srgb)?.clamped())
    }
}

/// Interleaved RGBA bytes for a canvas `ImageData`.
pub fn rgba(img: &SrgbImage) -> Vec<u8> {
    srgb_to_rgb8(img)
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

#[wasm_bindgen]
#[derive(Clone, Copy, Debug)]
pub struct Scores {
    pub psnr: f64,
    pub y_psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

impl From<ImageMetrics> for Scores {
    fn from(m: ImageMetrics) -> Self {
        Self {
            psnr: m.psnr_db,
            y_psnr: m.y_psnr_db,
            ssim: m.ssim,
            delta_e: m.delta_e,
        }
    }
}

fn js(e: demoire::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    model: Model,
    capture: Option<Capture>,
    output: Option<SrgbImage>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Ok(Self {
            model: Model::from_bytes(BUNDLED).map_err(js)?,
            capture: None,
            output: None,
        })
    }

    pub fn size(&self) -> usize {
        SIZE
    }

    pub fn model_info(&self) -> String {
        self.model.describe()
    }

    /// Replaces the network with one from a checkpoint file written by `demoire train`.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<String, JsError> {
        self.model = Model::from_bytes(bytes).map_err(js)?;
        self.output = None;
        Ok(self.model.describe())
    }

    /// Renders content of kind `content` (`interface`, `photo` or `chart`)
    /// on a screen and photographs it.
    pub fn simulate(&mut self, content: &str, pitch: f64, contrast: f64, rotation_deg: f64, seed: u32) -> Result<(), JsError> {
        let kind = ContentKind::ALL
            .into_iter()
            .find(|k| k.name() == content)
            .ok_or_else(|| JsError::new(&format!("unknown content `{content}`")))?;
        let scene = Scene {
            content: kind,
            pitch,
            contrast,
            rotation_deg,
            seed: seed as u64,
            ..Scene::default()
        };
        self.capture = Some(capture(&scene).map_err(js)?);
        self.output = None;
        Ok(())
    }

    fn current(&self) -> Result<&Capture, JsError> {
        self.capture.as_ref().ok_or_else(|| JsError::new("simulate a capture first"))
    }

    pub fn input_rgba(&self) -> Result<Vec<u8>, JsError> {
        Ok(rgba(&self.current()?.naive))
    }

    pub fn target_rgba(&self) -> Result<Vec<u8>, JsError> {
        Ok(rgba(&self.current()?.target))
    }

    pub fn output_rgba(&self) -> Result<Vec<u8>, JsError> {
        self.output
            .as_ref()
            .map(rgba)
            .ok_or_else(|| JsError::new("run the network first"))
    }

    pub fn input_scores(&self) -> Result<Scores, JsError> {
        let c = self.current()?;
        Ok(evaluate_pair(&c.naive, &c.target).map_err(js)?.into())
    }

    /// Runs the network on the current capture.
    pub fn demoire(&mut self) -> Result<Scores, JsError> {
        let c = self.current()?;
        let out = self.model.run(&c.input).map_err(js)?;
        let s = evaluate_pair(&out, &c.target).map_err(js)?;
        self.output = Some(out);
        Ok(s.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_weights_improve_the_default_scene() {
        let model = Model::from_bytes(BUNDLED).unwrap();
        let c = capture(&Scene::default()).unwrap();
        let out = model.run(&c.input).unwrap();
        let before = evaluate_pair(&c.naive, &c.target).unwrap();
        let after = evaluate_pair(&out, &c.target).unwrap();
        assert!(after.psnr_db > before.psnr_db, "{} -> {}", before.psnr_db, after.psnr_db);
    }

    #[test]
    fn rgba_layout() {
        let c = capture(&Scene::default()).unwrap();
        let px = rgba(&c.target);
        assert_eq!(px.len(), SIZE * SIZE * 4);
        assert!(px.chunks_exact(4).all(|p| p[3] == 255));
    }

    #[test]
    fn demo_flow() {
        let mut d = Demo::new().unwrap();
        assert!(d.model_info().contains("parameters"));
        d.simulate("chart", 3.5, 0.6, -3.0, 9).unwrap();
        let s = d.demoire().unwrap();
        assert!(s.psnr.is_finite() && s.ssim <= 1.0);
        assert_eq!(d.output_rgba().unwrap().len(), SIZE * SIZE * 4);
    }
}
