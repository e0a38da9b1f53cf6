//! Dice, vertical cup-to-disc ratio and hole filling on `[H,W]` class maps.
//!
//! Regions are nested: the disc is classes `{1,2}`, the cup is class `2`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{IntTensor, Real, Tensor};
use crate::segnet::predict_mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Disc,
    Cup,
}

impl Region {
    #[inline]
    pub fn contains(self, class: u8) -> bool {
        match self {
            Region::Disc => class == 1 || class == 2,
            Region::Cup => class == 2,
        }
    }

    /// Region of class index `1` (disc) or `2` (cup).
    pub fn from_class(class: u8) -> Result<Self> {
        match class {
            1 => Ok(Region::Disc),
            2 => Ok(Region::Cup),
            _ => Err(Error::InvalidArgument(format!("no region for class {class}"))),
        }
    }
}

/// `2·TP / (2·TP + FP + FN)` on the binarised region; 1.0 when both are empty.
pub fn dice(pred: &IntTensor, gt: &IntTensor, region: Region) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "dice",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (region.contains(p), region.contains(g)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    })
}

/// Longest column run from first to last region pixel, inclusive; 0 if empty.
pub fn vertical_diameter(mask: &IntTensor, region: Region) -> usize {
    let (h, w) = mask.hw();
    let d = mask.data();
    let mut best = 0;
    for x in 0..w {
        let first = (0..h).find(|&y| region.contains(d[y * w + x]));
        if let Some(first) = first {
            let last = (0..h).rev().find(|&y| region.contains(d[y * w + x])).unwrap_or(first);
            best = best.max(last - first + 1);
        }
    }
    best
}

/// Vertical cup-to-disc ratio and whether the disc was empty (ratio then 0).
pub fn cdr(mask: &IntTensor) -> (f64, bool) {
    let disc = vertical_diameter(mask, Region::Disc);
    if disc == 0 {
        return (0.0, true);
    }
    (vertical_diameter(mask, Region::Cup) as f64 / disc as f64, false)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdrError {
    pub cdr_pred: f64,
    pub cdr_true: f64,
    pub gamma: f64,
    /// The prediction had no disc pixels.
    pub degenerate: bool,
}

pub fn cdr_error(pred: &IntTensor, gt: &IntTensor) -> Result<CdrError> {
    let (cdr_true, gt_empty) = cdr(gt);
    if gt_empty {
        return Err(Error::InvalidArgument("ground truth has no disc pixels".into()));
    }
    let (cdr_pred, degenerate) = cdr(pred);
    if degenerate {
        log::warn!("degenerate prediction: no disc pixels, CDR taken as 0");
    }
    Ok(CdrError {
        cdr_pred,
        cdr_true,
        gamma: (cdr_pred - cdr_true).abs(),
        degenerate,
    })
}

/// Pixels outside `region` that cannot reach the border through other
/// non-region pixels (4-connectivity).
fn enclosed(mask: &[u8], h: usize, w: usize, region: Region) -> Vec<bool> {
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !region.contains(mask[y * w + x]) {
                outside[y * w + x] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let mut visit = |ny: usize, nx: usize| {
            let i = ny * w + nx;
            if !outside[i] && !region.contains(mask[i]) {
                outside[i] = true;
                queue.push_back((ny, nx));
            }
        };
        if y > 0 {
            visit(y - 1, x);
        }
        if y + 1 < h {
            visit(y + 1, x);
        }
        if x > 0 {
            visit(y, x - 1);
        }
        if x + 1 < w {
            visit(y, x + 1);
        }
    }
    (0..h * w)
        .map(|i| !outside[i] && !region.contains(mask[i]))
        .collect()
}

/// Fills holes of the disc, then of the cup, then demotes any cup pixel
/// left outside the filled disc to disc.
pub fn fill_holes(mask: &IntTensor) -> IntTensor {
    let (h, w) = mask.hw();
    let mut out = mask.clone();
    let d = out.data_mut();
    for (i, hole) in enclosed(d, h, w, Region::Disc).into_iter().enumerate() {
        if hole {
            d[i] = 1;
        }
    }
    for (i, hole) in enclosed(d, h, w, Region::Cup).into_iter().enumerate() {
        if hole {
            d[i] = 2;
        }
    }
    let disc: Vec<bool> = d.iter().map(|&c| Region::Disc.contains(c)).collect();
    for (c, inside) in d.iter_mut().zip(disc) {
        if *c == 2 && !inside {
            *c = 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    pub dice_cup: f64,
    pub dice_disc: f64,
    pub cdr_pred: f64,
    pub cdr_true: f64,
    pub gamma: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice_cup: f64,
    pub dice_disc: f64,
    pub gamma_cdr: f64,
    /// Samples whose predicted disc was empty.
    pub degenerate: usize,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<SampleEval>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::InvalidArgument("cannot report on zero samples".into()));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleEval) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            dice_cup: mean(|s| s.dice_cup),
            dice_disc: mean(|s| s.dice_disc),
            gamma_cdr: mean(|s| s.gamma),
            degenerate: per_sample.iter().filter(|s| s.degenerate).count(),
            per_sample,
        })
    }

    /// One JSON object per sample, then one aggregate object.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.per_sample {
            let mut v = serde_json::to_value(s)?;
            v["kind"] = "sample".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let agg = serde_json::json!({
            "kind": "aggregate",
            "n": self.per_sample.len(),
            "dice_cup": self.dice_cup,
            "dice_disc": self.dice_disc,
            "gamma_cdr": self.gamma_cdr,
            "degenerate": self.degenerate,
        });
        out.push_str(&serde_json::to_string(&agg)?);
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v["kind"] == "sample" {
                samples.push(serde_json::from_value(v)?);
            }
        }
        Self::from_samples(samples)
    }

    /// Columns `sample_id, dice_cup, dice_disc, cdr_pred, cdr_true, gamma`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "dice_cup", "dice_disc", "cdr_pred", "cdr_true", "gamma"])?;
        for s in &self.per_sample {
            w.write_record([
                s.sample_id.clone(),
                s.dice_cup.to_string(),
                s.dice_disc.to_string(),
                s.cdr_pred.to_string(),
                s.cdr_true.to_string(),
                s.gamma.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores one predicted class map (after hole filling) against its label.
pub fn score(sample_id: String, pred: &IntTensor, gt: &IntTensor) -> Result<SampleEval> {
    let c = cdr_error(pred, gt)?;
    Ok(SampleEval {
        sample_id,
        dice_cup: dice(pred, gt, Region::Cup)?,
        dice_disc: dice(pred, gt, Region::Disc)?,
        cdr_pred: c.cdr_pred,
        cdr_true: c.cdr_true,
        gamma: c.gamma,
        degenerate: c.degenerate,
    })
}

/// Runs `logits_of` on batches of `images`, decodes, fills holes and scores
/// against `masks`. Returns the report and the post-processed masks.
pub fn evaluate_with<T: Real>(
    images: &[&Tensor<T>],
    masks: &[&IntTensor],
    batch: usize,
    mut logits_of: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<(EvalReport, Vec<IntTensor>)> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluate needs matching non-empty inputs, got {} images and {} masks",
            images.len(),
            masks.len()
        )));
    }
    let batch = batch.max(1);
    let mut per_sample = Vec::with_capacity(images.len());
    let mut preds = Vec::with_capacity(images.len());
    for (chunk_no, chunk) in images.chunks(batch).enumerate() {
        let owned: Vec<Tensor<T>> = chunk.iter().map(|t| (*t).clone()).collect();
        let logits = logits_of(&Tensor::stack(&owned)?)?;
        let decoded = predict_mask(&logits)?;
        for j in 0..chunk.len() {
            let i = chunk_no * batch + j;
            let pred = fill_holes(&decoded.item(j)?);
            per_sample.push(score(format!("{i:05}"), &pred, masks[i])?);
            preds.push(pred);
        }
    }
    Ok((EvalReport::from_samples(per_sample)?, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> IntTensor {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| b - b'0'))
            .collect();
        IntTensor::new([h, w], data).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask(&["0110", "0110", "0000"]);
        assert_eq!(dice(&a, &a, Region::Disc).unwrap(), 1.0);
        let b = mask(&["1000", "1000", "0000"]);
        let c = mask(&["0001", "0001", "0000"]);
        assert_eq!(dice(&b, &c, Region::Disc).unwrap(), 0.0);
        let pred = mask(&["1100", "1100"]);
        let gt = mask(&["1111", "1111"]);
        assert!((dice(&pred, &gt, Region::Disc).unwrap() - 8.0 / 12.0).abs() < 1e-12);
        let empty = mask(&["00", "00"]);
        assert_eq!(dice(&empty, &empty, Region::Cup).unwrap(), 1.0);
        assert!(dice(&empty, &a, Region::Cup).is_err());
        let nested = mask(&["2211"]);
        let flat = mask(&["1111"]);
        assert_eq!(dice(&nested, &flat, Region::Disc).unwrap(), 1.0);
    }

    #[test]
    fn vertical_diameter_cases() {
        let col = mask(&["010", "010", "010", "010", "010", "010", "010"]);
        assert_eq!(vertical_diameter(&col, Region::Disc), 7);
        assert_eq!(vertical_diameter(&col, Region::Cup), 0);
        let gap = mask(&["1", "0", "1"]);
        assert_eq!(vertical_diameter(&gap, Region::Disc), 3);
    }

    #[test]
    fn cdr_cases() {
        let mut gt = vec![0u8; 64 * 64];
        let mut pred = gt.clone();
        for y in 10..50 {
            gt[y * 64 + 30] = 1;
            pred[y * 64 + 30] = 1;
        }
        for y in 20..40 {
            gt[y * 64 + 30] = 2;
        }
        for y in 25..35 {
            pred[y * 64 + 30] = 2;
        }
        let gt = IntTensor::new([64, 64], gt).unwrap();
        let pred = IntTensor::new([64, 64], pred).unwrap();
        let e = cdr_error(&pred, &gt).unwrap();
        assert!((e.gamma - 0.25).abs() < 1e-12);
        assert_eq!(cdr_error(&gt, &gt).unwrap().gamma, 0.0);
        let blank = IntTensor::zeros([64, 64]);
        let e = cdr_error(&blank, &gt).unwrap();
        assert!(e.degenerate && e.cdr_pred == 0.0);
        assert!(cdr_error(&gt, &blank).is_err());
    }

    #[test]
    fn fill_holes_cases() {
        let ring = mask(&["00000", "01110", "01010", "01110", "00000"]);
        assert_eq!(fill_holes(&ring), mask(&["00000", "01110", "01110", "01110", "00000"]));
        let cup_ring = mask(&["0000000", "0111110", "0122210", "0121210", "0122210", "0111110", "0000000"]);
        let filled = fill_holes(&cup_ring);
        assert_eq!(filled.data()[3 * 7 + 3], 2);
        let clean = mask(&["000", "012", "000"]);
        assert_eq!(fill_holes(&clean), clean);
    }

    #[test]
    fn report_aggregates_and_files() {
        let s = |id: &str, c, d, g| SampleEval {
            sample_id: id.into(),
            dice_cup: c,
            dice_disc: d,
            cdr_pred: 0.5,
            cdr_true: 0.5 + g,
            gamma: g,
            degenerate: false,
        };
        let r = EvalReport::from_samples(vec![s("a", 0.5, 1.0, 0.1), s("b", 1.0, 0.5, 0.3)]).unwrap();
        assert!((r.dice_cup - 0.75).abs() < 1e-12 && (r.gamma_cdr - 0.2).abs() < 1e-12);
        assert!(EvalReport::from_samples(vec![]).is_err());

        let dir = tempfile::tempdir().unwrap();
        r.write_jsonl(&dir.path().join("r.jsonl")).unwrap();
        assert_eq!(EvalReport::read_jsonl(&dir.path().join("r.jsonl")).unwrap(), r);
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("sample_id,dice_cup,dice_disc,cdr_pred,cdr_true,gamma\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
