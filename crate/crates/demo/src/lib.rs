//! WebAssembly bindings behind `www/index.html`.
//!
//! Three operations are exposed: rendering a synthetic sample from either
//! domain at any shift, scoring and hole-filling a label mask against its
//! ground truth, and tabulating the learning-rate and teacher-averaging
//! schedules.

use cada::metrics::{self, fill_holes};
use cada::nn::{poly_lr, IntTensor, Tensor};
use cada::synth::{generate_one, Sample, SynthConfig};
use wasm_bindgen::prelude::*;

/// Display colours for background, disc and cup labels.
const LABEL_RGBA: [[u8; 4]; 3] = [[20, 20, 28, 255], [60, 170, 220, 255], [250, 210, 60, 255]];

fn js_err(e: cada::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_rgba(image: &Tensor<f32>) -> Vec<u8> {
    let plane = image.shape()[1] * image.shape()[2];
    let data = image.data();
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn mask_rgba(mask: &IntTensor) -> Vec<u8> {
    mask.data().iter().flat_map(|&v| LABEL_RGBA[v.min(2) as usize]).collect()
}

fn mask_from(labels: &[u8], size: usize) -> Result<IntTensor, JsError> {
    if labels.iter().any(|&v| v > 2) {
        return Err(JsError::new("labels must be 0, 1 or 2"));
    }
    IntTensor::new([size, size], labels.to_vec()).map_err(js_err)
}

/// A generated sample, held on the Rust side.
#[wasm_bindgen]
pub struct DemoSample {
    size: usize,
    sample: Sample,
}

#[wasm_bindgen]
impl DemoSample {
    /// Generates sample `index` of the source domain (`target == false`) or
    /// of the target domain displaced by `shift` (0 reproduces the source
    /// look, 1 is the default target).
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64, index: u64, shift: f64, target: bool) -> Result<DemoSample, JsError> {
        let cfg = SynthConfig {
            seed,
            shift,
            ..SynthConfig::default()
        };
        let spec = if target { cfg.target_spec() } else { cfg.source_spec() };
        let sample = generate_one(&spec, index, size).map_err(js_err)?;
        Ok(DemoSample { size, sample })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Vec<u8> {
        to_rgba(&self.sample.image)
    }

    #[wasm_bindgen(js_name = maskRgba)]
    pub fn mask_rgba(&self) -> Vec<u8> {
        mask_rgba(&self.sample.mask)
    }

    /// Ground-truth labels, one byte per pixel.
    pub fn labels(&self) -> Vec<u8> {
        self.sample.mask.data().to_vec()
    }

    #[wasm_bindgen(js_name = trueCdr)]
    pub fn true_cdr(&self) -> f64 {
        self.sample.true_cdr
    }
}

/// Colours a label mask for display.
#[wasm_bindgen(js_name = labelsToRgba)]
pub fn labels_to_rgba(labels: &[u8], size: usize) -> Result<Vec<u8>, JsError> {
    Ok(mask_rgba(&mask_from(labels, size)?))
}

/// Scores a predicted label mask against ground truth. Returns JSON with
/// `dice_cup`, `dice_disc`, `cdr_pred`, `cdr_true`, `gamma` and
/// `degenerate`.
#[wasm_bindgen(js_name = scoreMask)]
pub fn score_mask(pred: &[u8], truth: &[u8], size: usize) -> Result<String, JsError> {
    let s = metrics::score(String::new(), &mask_from(pred, size)?, &mask_from(truth, size)?).map_err(js_err)?;
    Ok(serde_json::json!({
        "dice_cup": s.dice_cup,
        "dice_disc": s.dice_disc,
        "cdr_pred": s.cdr_pred,
        "cdr_true": s.cdr_true,
        "gamma": s.gamma,
        "degenerate": s.degenerate,
    })
    .to_string())
}

/// Fills background holes inside the disc and disc holes inside the cup.
#[wasm_bindgen(js_name = fillHoles)]
pub fn fill_holes_labels(labels: &[u8], size: usize) -> Result<Vec<u8>, JsError> {
    Ok(fill_holes(&mask_from(labels, size)?).data().to_vec())
}

/// Learning rate at every iteration of a polynomial-decay schedule.
#[wasm_bindgen(js_name = polyLrCurve)]
pub fn poly_lr_curve(base_lr: f64, max_iter: u32, power: f64) -> Result<Vec<f64>, JsError> {
    (0..max_iter)
        .map(|i| poly_lr(base_lr, i as u64, max_iter as u64, power).map_err(js_err))
        .collect()
}

/// Share of the initial teacher weights still present after each of
/// `steps` averaging updates towards a frozen student: `alpha^t`.
#[wasm_bindgen(js_name = emaRetention)]
pub fn ema_retention(alpha: f64, steps: u32) -> Vec<f64> {
    let mut w = 1.0;
    (0..=steps)
        .map(|t| {
            if t > 0 {
                w *= alpha;
            }
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_buffers_have_expected_lengths() {
        let s = DemoSample::new(32, 3, 0, 1.0, true).map_err(|_| ()).unwrap();
        assert_eq!(s.image_rgba().len(), 32 * 32 * 4);
        assert_eq!(s.mask_rgba().len(), 32 * 32 * 4);
        assert!(s.true_cdr() > 0.0);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let s = DemoSample::new(32, 0, 1, 0.0, false).map_err(|_| ()).unwrap();
        let json = score_mask(&s.labels(), &s.labels(), 32).map_err(|_| ()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["dice_cup"], 1.0);
        assert_eq!(v["gamma"], 0.0);
    }

    #[test]
    fn schedules() {
        let lr = poly_lr_curve(0.01, 10, 0.9).map_err(|_| ()).unwrap();
        assert_eq!(lr.len(), 10);
        assert_eq!(lr[0], 0.01);
        assert!(lr.windows(2).all(|w| w[1] <= w[0]));
        let ema = ema_retention(0.5, 3);
        assert_eq!(ema, vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn fill_holes_closes_a_disc_hole() {
        let mut labels = vec![0u8; 25];
        for y in 1..4 {
            for x in 1..4 {
                labels[y * 5 + x] = 1;
            }
        }
        labels[12] = 0;
        let filled = fill_holes_labels(&labels, 5).map_err(|_| ()).unwrap();
        assert_eq!(filled[12], 1);
    }
}
