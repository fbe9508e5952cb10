//! Three interactive views over the core crate, exported to JavaScript:
//! the gradient weight of the hard sample-aware loss against cosine
//! similarity, a synthetic bi-temporal scene with its change mask, and a
//! per-pixel comparison of that loss with the margin contrastive loss.

use deepcl_core::evaluation::{cosine_grid, gradient_weight_curve};
use deepcl_core::losses::{contrastive_loss_from_distance, hsac_loss_from_cosine, ChangeMask};
use deepcl_core::synthdata::{generate_scene, SceneConfig};
use deepcl_core::{Graph, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: deepcl_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Rows of `[d_cos, weight_unchanged, weight_changed]`, flattened.
pub fn weight_curve(tau: f64, points: usize) -> deepcl_core::Result<Vec<f64>> {
    let grid = cosine_grid(points);
    let curve = gradient_weight_curve(&[tau], &grid)?;
    let (unchanged, changed) = curve.split_at(grid.len());
    Ok(grid
        .iter()
        .zip(unchanged.iter().zip(changed))
        .flat_map(|(d, (u, c))| [*d, u.weight, c.weight])
        .collect())
}

#[wasm_bindgen(js_name = weightCurve)]
pub fn weight_curve_js(tau: f64, points: usize) -> Result<Vec<f64>, JsError> {
    weight_curve(tau, points).map_err(js_err)
}

#[wasm_bindgen]
pub struct Scene {
    size: usize,
    t1: Vec<u8>,
    t2: Vec<u8>,
    mask: Vec<u8>,
    changed_fraction: f64,
    shift_x: i32,
    shift_y: i32,
}

#[wasm_bindgen]
impl Scene {
    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA bytes of the first epoch.
    pub fn t1(&self) -> Vec<u8> {
        self.t1.clone()
    }

    pub fn t2(&self) -> Vec<u8> {
        self.t2.clone()
    }

    /// RGBA bytes, changed pixels white.
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    #[wasm_bindgen(js_name = changedFraction)]
    pub fn changed_fraction(&self) -> f64 {
        self.changed_fraction
    }

    #[wasm_bindgen(js_name = shiftX)]
    pub fn shift_x(&self) -> i32 {
        self.shift_x
    }

    #[wasm_bindgen(js_name = shiftY)]
    pub fn shift_y(&self) -> i32 {
        self.shift_y
    }
}

fn rgba(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

pub fn make_scene(seed: u64, size: usize, p_change: f64, gain: f64, max_shift: usize, noise: f64) -> deepcl_core::Result<Scene> {
    let cfg = SceneConfig {
        size,
        p_change,
        gain_range: (gain, gain),
        bias_range: (0.0, 0.0),
        max_shift_px: max_shift,
        noise_sigma: noise,
        ..SceneConfig::default()
    };
    let s = generate_scene(seed, &cfg)?;
    let mask: Vec<u8> = s.mask.bits().flat_map(|b| if b { [255; 4] } else { [0, 0, 0, 255] }).collect();
    Ok(Scene {
        size,
        t1: rgba(&s.img_t1),
        t2: rgba(&s.img_t2),
        changed_fraction: s.mask.count_changed() as f64 / s.mask.len() as f64,
        mask,
        shift_x: s.meta.pseudo.shift_x,
        shift_y: s.meta.pseudo.shift_y,
    })
}

#[wasm_bindgen(js_name = makeScene)]
pub fn make_scene_js(seed: u32, size: usize, p_change: f64, gain: f64, max_shift: usize, noise: f64) -> Result<Scene, JsError> {
    make_scene(seed as u64, size, p_change, gain, max_shift, noise).map_err(js_err)
}

/// Loss and `|∂L/∂cos|` for one pixel pair with cosine similarity `c`.
fn pixel_losses(c: f64, changed: bool, tau: f64, margin: f64) -> deepcl_core::Result<[f64; 4]> {
    let y = ChangeMask::from_bools(&[1, 1, 1, 1], [changed])?;
    let mut out = [0.0; 4];
    for (k, hsac) in [true, false].into_iter().enumerate() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![1, 1, 1, 1], vec![c])?);
        let loss = if hsac {
            hsac_loss_from_cosine(&mut g, x, &y, tau)?
        } else {
            let neg = g.scale(x, -1.0)?;
            let d = g.add_scalar(neg, 1.0)?;
            contrastive_loss_from_distance(&mut g, d, &y, margin)?
        };
        g.backward(loss)?;
        out[2 * k] = g.scalar_value(loss)?;
        out[2 * k + 1] = g.grad(x).map_or(0.0, |gr| gr[0].abs());
    }
    Ok(out)
}

/// Rows of `[cos, hsac_loss, hsac_grad, con_loss, con_grad]` over `[-1, 1]`,
/// flattened. The contrastive loss uses the cosine distance `1 - cos`.
pub fn loss_comparison(changed: bool, tau: f64, margin: f64, points: usize) -> deepcl_core::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points * 5);
    for c in cosine_grid(points) {
        out.push(c);
        out.extend(pixel_losses(c, changed, tau, margin)?);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = lossComparison)]
pub fn loss_comparison_js(changed: bool, tau: f64, margin: f64, points: usize) -> Result<Vec<f64>, JsError> {
    loss_comparison(changed, tau, margin, points).map_err(js_err)
}
