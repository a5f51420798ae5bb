//! Independent reference implementations shared by the integration tests.
//! None of these call into the library's numerics.

#![allow(dead_code)]

use adapterseg::metrics::Mask;

/// All-pairs HD95: boundary pixels found by scanning 4-neighbours, distances
/// from every boundary pixel to every boundary pixel of the other mask.
pub fn hd95_brute(a: &Mask, b: &Mask) -> f64 {
    let (h, w) = (a.height(), a.width());
    let diag = ((h * h + w * w) as f64).sqrt();
    match (a.count() == 0, b.count() == 0) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return diag,
        _ => {}
    }
    let edge = |m: &Mask| -> Vec<(i64, i64)> {
        let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m.get(r as usize, c as usize);
        let mut out = Vec::new();
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                if at(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !at(r + dr, c + dc)) {
                    out.push((r, c));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| (((r - r2).pow(2) + (c - c2).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let k = (0.95 * d.len() as f64).ceil() as usize;
        d[k.max(1) - 1]
    };
    directed(&ea, &eb).max(directed(&eb, &ea))
}

/// Scalar AdamW with decoupled decay applied before the moment update.
pub struct ScalarAdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl ScalarAdamW {
    pub fn new(n: usize) -> Self {
        ScalarAdamW { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        for i in 0..w.len() {
            w[i] *= 1.0 - lr * wd;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Dice (with smoothing `eps`) and mean BCE for logits against a 0/1 mask.
pub fn dice_bce(logits: &[f64], mask: &[f64], eps: f64) -> (f64, f64) {
    let p: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    let inter: f64 = p.iter().zip(mask).map(|(a, b)| a * b).sum();
    let dice = 1.0 - (2.0 * inter + eps) / (p.iter().sum::<f64>() + mask.iter().sum::<f64>() + eps);
    let bce = logits
        .iter()
        .zip(mask)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / logits.len() as f64;
    (dice, bce)
}

/// Seeded random mask with roughly `density` foreground, xorshift-driven.
pub fn random_mask(seed: u64, h: usize, w: usize, density: f64) -> Mask {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let data = (0..h * w).map(|_| next() < density).collect();
    Mask::new(h, w, data).unwrap()
}
