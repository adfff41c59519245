//! Browser bindings: generate a scene, prepare its labels, draw a CowMix mask.
//! Images cross the boundary as RGBA byte arrays ready for `ImageData`.

use canopyseg::grid::{compute_chm, FloatGrid, LabelGrid};
use canopyseg::infer::palette;
use canopyseg::labels::{prep_labels, upsample_nearest, PrepConfig};
use canopyseg::synth::{gen_scene, SceneSpec, SynthScene};
use canopyseg::train::{cow_mask, CowMixConfig};
use wasm_bindgen::prelude::*;

pub fn label_rgba(labels: &LabelGrid) -> Vec<u8> {
    labels.samples.iter().flat_map(|c| { let [r, g, b] = palette(*c); [r, g, b, 255] }).collect()
}

/// Heights in grey, black at 0 m and white at `top_m` and above.
pub fn height_rgba(grid: &FloatGrid, top_m: f32) -> Vec<u8> {
    grid.samples
        .iter()
        .flat_map(|v| {
            let g = (v / top_m).clamp(0.0, 1.0) * 255.0;
            [g as u8, g as u8, g as u8, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Scene {
    scene: SynthScene,
    chm: FloatGrid,
}

impl Scene {
    pub fn generate(seed: u64, extent_m: usize, clearcut_fraction: f64) -> Result<Scene, String> {
        let spec = SceneSpec { seed, extent_m, clearcut_fraction, plot_count: 0, ..SceneSpec::default() };
        let scene = gen_scene(&spec).map_err(|e| e.to_string())?;
        let chm = compute_chm(&scene.dsm, &scene.dtm).map_err(|e| e.to_string())?;
        Ok(Scene { scene, chm })
    }

    pub fn prepared(&self, median_window: usize, threshold_m: f32) -> Result<LabelGrid, String> {
        let cfg = PrepConfig { chm_median_window_px: median_window, chm_background_threshold_m: threshold_m, ..PrepConfig::default() };
        prep_labels(&self.scene.weak16, &self.chm, &cfg).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, extent_m: u32, clearcut_fraction: f64) -> Result<Scene, JsError> {
        Scene::generate(seed as u64, extent_m as usize, clearcut_fraction).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> u32 {
        self.chm.width() as u32
    }

    pub fn chm_rgba(&self) -> Vec<u8> {
        height_rgba(&self.chm, 30.0)
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        label_rgba(&self.scene.truth)
    }

    /// Weak labels drawn at 1 m.
    pub fn weak_rgba(&self) -> Vec<u8> {
        label_rgba(&upsample_nearest(&self.scene.weak16, 16))
    }

    pub fn prep_rgba(&self, median_window: u32, threshold_m: f32) -> Result<Vec<u8>, JsError> {
        self.prepared(median_window as usize, threshold_m).map(|l| label_rgba(&l)).map_err(|e| JsError::new(&e))
    }
}

pub fn cow_mask_bytes(size: usize, sigma: f64, fraction: f64, seed: u64) -> Result<Vec<u8>, String> {
    let cfg = CowMixConfig { sigma_range_px: (sigma, sigma), keep_fraction_range: (fraction, fraction), apply_probability: 1.0 };
    let mask = cow_mask(size, size, &cfg, seed).map_err(|e| e.to_string())?;
    Ok(mask.data.iter().flat_map(|m| if *m == 1 { [22, 94, 46, 255] } else { [236, 134, 30, 255] }).collect())
}

/// Square mask; kept pixels in one color, replaced pixels in another.
#[wasm_bindgen]
pub fn cow_mask_rgba(size: u32, sigma: f64, fraction: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    cow_mask_bytes(size as usize, sigma, fraction, seed as u64).map_err(|e| JsError::new(&e))
}
