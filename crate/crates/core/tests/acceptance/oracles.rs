//! Naive loop references, written independently of the library.

use transcc::imaging::{LinearImage, PixelMask, Plane};
use transcc::losses::PatchSpec;

pub const SIGMA: f64 = 1e-4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Radians via the arc cosine of the clamped cosine.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

pub fn achromatic(gt: &LinearImage, weights: &Plane, mask: &PixelMask) -> f64 {
    let (h, w) = gt.dims();
    let mut u = [0.0; 3];
    for r in 0..h {
        for c in 0..w {
            if mask.is_included(r, c) {
                let p = gt.pixel(r, c);
                for k in 0..3 {
                    u[k] += p[k] * weights.get(r, c);
                }
            }
        }
    }
    let n = norm(&u);
    let chroma = [u[0] / n, u[1] / n, u[2] / n];
    let sum: f64 = chroma.iter().sum();
    1.0 - sum / (SIGMA + (3.0 * dot(&chroma, &chroma)).sqrt())
}

pub fn edge(pred: &Plane, pseudo: &Plane) -> f64 {
    let (h, w) = pred.dims();
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let d = pred.get(r, c) - pseudo.get(r, c);
            s += d * d;
        }
    }
    s / (h * w) as f64
}

pub fn l1(pred: &LinearImage, gt: &LinearImage, mask: &PixelMask) -> f64 {
    let (h, w) = pred.dims();
    let (mut s, mut n) = (0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if mask.is_included(r, c) {
                for k in 0..3 {
                    s += (pred.pixel(r, c)[k] - gt.pixel(r, c)[k]).abs();
                }
                n += 3;
            }
        }
    }
    s / n as f64
}

/// Degrees between the illuminants implied by `pred` and by `gt`.
pub fn mae(input: &LinearImage, pred: &LinearImage, gt: &LinearImage, mask: &PixelMask, eps: f64) -> f64 {
    let (h, w) = input.dims();
    let (mut s, mut n) = (0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if !mask.is_included(r, c) {
                continue;
            }
            let (i, p, g) = (input.pixel(r, c), pred.pixel(r, c), gt.pixel(r, c));
            let mut est = [0.0; 3];
            let mut tru = [0.0; 3];
            for k in 0..3 {
                est[k] = i[k] / p[k].max(eps);
                tru[k] = i[k] / g[k].max(eps);
            }
            s += angle(&est, &tru).to_degrees();
            n += 1;
        }
    }
    s / n as f64
}

/// Angle of every patch pixel to the patch center; black pixels give 0.
fn similarity(img: &LinearImage, p: &PatchSpec) -> Vec<f64> {
    let center = img.pixel(p.center_row(), p.center_col());
    let mut out = Vec::with_capacity(p.side() * p.side());
    for r in p.top()..p.top() + p.side() {
        for c in p.left()..p.left() + p.side() {
            let x = img.pixel(r, c);
            out.push(if x == [0.0; 3] { 0.0 } else { angle(&x, &center) });
        }
    }
    out
}

pub fn patch_similarity(pred: &LinearImage, gt: &LinearImage, patches: &[PatchSpec], mask: &PixelMask) -> f64 {
    let mut per_patch = Vec::new();
    for p in patches {
        if !mask.is_included(p.center_row(), p.center_col()) {
            continue;
        }
        let (a, b) = (similarity(pred, p), similarity(gt, p));
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..p.side() {
            for j in 0..p.side() {
                if mask.is_included(p.top() + i, p.left() + j) {
                    s += (a[i * p.side() + j] - b[i * p.side() + j]).abs();
                    n += 1;
                }
            }
        }
        if n > 0 {
            per_patch.push(s / n as f64);
        }
    }
    per_patch.iter().sum::<f64>() / per_patch.len() as f64
}

/// Mean over anchors of `−log(Σ_pos e^{a·p/τ} / Σ_neg e^{a·n/τ})` on
/// cosine similarities.
pub fn dce(anchors: &[Vec<f64>], positives: &[Vec<Vec<f64>>], negatives: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (norm(a) * norm(b));
    let mut total = 0.0;
    for (m, a) in anchors.iter().enumerate() {
        let num: f64 = positives[m].iter().map(|p| (cos(a, p) / tau).exp()).sum();
        let den: f64 = negatives[m].iter().map(|q| (cos(a, q) / tau).exp()).sum();
        total -= (num / den).ln();
    }
    total / anchors.len() as f64
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `[mean, median, trimean, q1, q3, best25, worst25]` by sorting and slicing.
pub fn stats(errors: &[f64]) -> [f64; 7] {
    let mut s = errors.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let (q1, q2, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let k = n.div_ceil(4);
    let best = s[..k].iter().sum::<f64>() / k as f64;
    let worst = s[n - k..].iter().sum::<f64>() / k as f64;
    [mean, q2, (q1 + 2.0 * q2 + q3) / 4.0, q1, q3, best, worst]
}
