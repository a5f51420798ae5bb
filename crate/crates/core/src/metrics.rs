//! Overlap and boundary metrics for binary masks.
//!
//! Conventions where the usual definitions are silent:
//! * DSC and IoU of two empty masks are 100.
//! * HD95 works on boundary pixels (foreground with at least one background
//!   4-neighbour; outside the image counts as background) and measures
//!   Euclidean distance between pixel centres. Each direction takes the
//!   nearest-rank 95th percentile and the larger direction is reported.
//! * HD95 of two empty masks is 0; if exactly one is empty it is the image
//!   diagonal, and the report counts how often that penalty was applied.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, TensorError};
use crate::error::Result;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(TensorError::Shape {
                op: "mask",
                detail: format!("{} values for a {height}x{width} mask", data.len()),
            }
            .into());
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, data }
    }

    /// `sigmoid(logit) >= threshold`, pixel by pixel.
    pub fn from_logits(height: usize, width: usize, logits: &[f64], threshold: f64) -> Result<Self> {
        Mask::new(height, width, logits.iter().map(|&z| sigmoid(z) >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    /// 1.0 on foreground, 0.0 elsewhere.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(u8::from(v))).collect()
    }

    /// Foreground pixels with a background (or out-of-image) 4-neighbour.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1);
                if edge {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }
}

fn same_shape(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(TensorError::Shape {
            op,
            detail: format!("masks {}x{} and {}x{}", a.height, a.width, b.height, b.width),
        }
        .into());
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    (inter, a.count(), b.count())
}

/// Dice score in percent.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape("dsc", pred, gt)?;
    let (inter, p, g) = overlap(pred, gt);
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Intersection over union in percent.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape("iou", pred, gt)?;
    let (inter, p, g) = overlap(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hd95 {
    pub value: f64,
    /// Exactly one mask was empty and `value` is the image diagonal.
    pub empty_penalty: bool,
}

/// 95th percentile Hausdorff distance in pixels.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(hd95_detailed(pred, gt)?.value)
}

pub fn hd95_detailed(pred: &Mask, gt: &Mask) -> Result<Hd95> {
    same_shape("hd95", pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(Hd95 { value: 0.0, empty_penalty: false }),
        (true, false) | (false, true) => return Ok(Hd95 { value: pred.diagonal(), empty_penalty: true }),
        (false, false) => {}
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let to_g = distance_field(gt.height, gt.width, &bg);
    let to_p = distance_field(pred.height, pred.width, &bp);
    let w = pred.width;
    let forward: Vec<f64> = bp.iter().map(|&(r, c)| to_g[r * w + c].sqrt()).collect();
    let backward: Vec<f64> = bg.iter().map(|&(r, c)| to_p[r * w + c].sqrt()).collect();
    let value = nearest_rank(forward, 95.0).max(nearest_rank(backward, 95.0));
    Ok(Hd95 { value, empty_penalty: false })
}

/// Nearest-rank percentile: the `ceil(q/100 * n)`-th smallest value.
pub fn nearest_rank(mut values: Vec<f64>, q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Exact squared Euclidean distance from every pixel to the nearest seed,
/// by separable lower envelopes of parabolas (Felzenszwalb and Huttenlocher).
fn distance_field(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; h * w];
    for &(r, c) in seeds {
        f[r * w + c] = 0.0;
    }
    let mut line = Vec::new();
    for r in 0..h {
        line.clear();
        line.extend_from_slice(&f[r * w..(r + 1) * w]);
        let d = envelope(&line);
        f[r * w..(r + 1) * w].copy_from_slice(&d);
    }
    for c in 0..w {
        line.clear();
        line.extend((0..h).map(|r| f[r * w + c]));
        for (r, v) in envelope(&line).into_iter().enumerate() {
            f[r * w + c] = v;
        }
    }
    f
}

fn envelope(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return d;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            if inter(p, q) <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        z.push(if v.is_empty() { f64::NEG_INFINITY } else { inter(*v.last().expect("nonempty"), q) });
        v.push(q);
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
    pub hd95_empty_penalty: bool,
}

pub fn sample_metrics(pred: &Mask, gt: &Mask) -> Result<SampleMetrics> {
    let h = hd95_detailed(pred, gt)?;
    Ok(SampleMetrics { dsc: dsc(pred, gt)?, iou: iou(pred, gt)?, hd95: h.value, hd95_empty_penalty: h.empty_penalty })
}

/// Unweighted means over a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
    pub n_samples: usize,
    pub threshold: f64,
    /// Samples whose HD95 is the empty-mask diagonal penalty.
    pub hd95_empty_penalties: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>, threshold: f64) -> Self {
        let n = per_sample.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_sample.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricsReport {
            dsc: mean(|s| s.dsc),
            iou: mean(|s| s.iou),
            hd95: mean(|s| s.hd95),
            n_samples: n,
            threshold,
            hd95_empty_penalties: per_sample.iter().filter(|s| s.hd95_empty_penalty).count(),
            per_sample,
        }
    }

    /// Aligned plain-text table, one row per `(label, report)`.
    pub fn table(rows: &[(&str, &MetricsReport)]) -> String {
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>5}  {:>8}  {:>8}  {:>8}", "split", "n", "DSC↑", "IoU↑", "HD95↓");
        for (label, r) in rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>5}  {:>8.2}  {:>8.2}  {:>8.2}",
                label, r.n_samples, r.dsc, r.iou, r.hd95
            );
        }
        let t = rows.first().map_or(0.5, |(_, r)| r.threshold);
        let penalties: usize = rows.iter().map(|(_, r)| r.hd95_empty_penalties).sum();
        let _ = writeln!(s, "threshold {t} on sigmoid(logits); empty-mask HD95 penalties: {penalties}");
        s
    }
}

/// Scores `predict` (which returns per-pixel logits) on every `(gt, input)`.
pub fn evaluate_with<T>(
    items: &[T],
    gt: impl Fn(&T) -> &Mask,
    threshold: f64,
    mut predict: impl FnMut(&T) -> Result<Vec<f64>>,
) -> Result<MetricsReport> {
    let mut per = Vec::with_capacity(items.len());
    for item in items {
        let g = gt(item);
        let logits = predict(item)?;
        let pred = Mask::from_logits(g.height(), g.width(), &logits, threshold)?;
        per.push(sample_metrics(&pred, g)?);
    }
    Ok(MetricsReport::from_samples(per, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(r0: usize, c0: usize) -> Mask {
        Mask::from_fn(8, 8, |r, c| (r0..r0 + 2).contains(&r) && (c0..c0 + 2).contains(&c))
    }

    #[test]
    fn shifted_block_counts() {
        let (p, g) = (block(3, 3), block(3, 4));
        assert_eq!(dsc(&p, &g).unwrap(), 50.0);
        assert!((iou(&p, &g).unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let e = Mask::empty(4, 4);
        let one = Mask::from_fn(4, 4, |r, c| r == 1 && c == 1);
        assert_eq!(dsc(&e, &e).unwrap(), 100.0);
        assert_eq!(iou(&e, &one).unwrap(), 0.0);
        assert_eq!(hd95(&e, &e).unwrap(), 0.0);
        let h = hd95_detailed(&one, &e).unwrap();
        assert!(h.empty_penalty);
        assert!((h.value - 32f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_pixels_three_four_five() {
        let a = Mask::from_fn(8, 8, |r, c| r == 0 && c == 0);
        let b = Mask::from_fn(8, 8, |r, c| r == 3 && c == 4);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        assert!(dsc(&Mask::empty(2, 2), &Mask::empty(2, 3)).is_err());
        assert!(hd95(&Mask::empty(2, 2), &Mask::empty(3, 2)).is_err());
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let m = Mask::from_fn(5, 5, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
        assert_eq!(m.boundary().len(), 8);
    }

    #[test]
    fn nearest_rank_picks_an_element() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(v.clone(), 95.0), 19.0);
        assert_eq!(nearest_rank(v, 100.0), 20.0);
        assert_eq!(nearest_rank(vec![7.0], 95.0), 7.0);
    }

    #[test]
    fn table_has_header_and_threshold_note() {
        let r = MetricsReport::from_samples(
            vec![SampleMetrics { dsc: 80.0, iou: 66.0, hd95: 2.0, hd95_empty_penalty: false }],
            0.5,
        );
        let t = MetricsReport::table(&[("val", &r)]);
        assert!(t.contains("DSC↑") && t.contains("HD95↓") && t.contains("threshold 0.5"));
    }
}
