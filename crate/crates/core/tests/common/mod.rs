//! Test-side reference: the margin softmax written as a plain forward pass
//! over complex numbers, differentiated by the complex-step method. No
//! hand-derived backward pass is involved, so it cannot share a mistake
//! with the library's analytic gradients.

#![allow(dead_code)]

use num_complex::Complex64;
use partialfc::margin_loss::{MarginConfig, MarginKind};
use partialfc::numerics::Matrix;

const STEP: f64 = 1e-30;

pub struct Reference {
    pub loss: f64,
    /// `B × d`, row-major.
    pub grad_x: Vec<f64>,
    /// `d × C`, row-major.
    pub grad_w: Vec<f64>,
    /// `B × C`, row-major.
    pub prob: Vec<f64>,
}

fn to_complex(m: &Matrix) -> Vec<Complex64> {
    m.data().iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

#[allow(clippy::too_many_arguments)]
/// Mean margin cross-entropy. `x` is `b × d`, `w` is `d × c`, both
/// row-major. Optionally also returns the softmax probabilities.
fn forward(
    x: &[Complex64],
    w: &[Complex64],
    b: usize,
    d: usize,
    c: usize,
    labels: &[usize],
    margin: &MarginConfig,
    mut prob: Option<&mut Vec<f64>>,
) -> Complex64 {
    let s = margin.scale();
    let m = margin.margin();
    let mut w_unit = w.to_vec();
    for j in 0..c {
        let norm = (0..d)
            .map(|r| w[r * c + j] * w[r * c + j])
            .sum::<Complex64>()
            .sqrt();
        for r in 0..d {
            w_unit[r * c + j] = w[r * c + j] / norm;
        }
    }
    let mut total = Complex64::new(0.0, 0.0);
    for i in 0..b {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<Complex64>().sqrt();
        let z: Vec<Complex64> = (0..c)
            .map(|j| {
                let cos = (0..d)
                    .map(|r| row[r] / norm * w_unit[r * c + j])
                    .sum::<Complex64>();
                if j != labels[i] {
                    return cos * s;
                }
                match margin.kind() {
                    MarginKind::None => cos * s,
                    MarginKind::CosFace => (cos - m) * s,
                    MarginKind::ArcFace => {
                        if cos.re > -m.cos() {
                            (cos * m.cos()
                                - (Complex64::new(1.0, 0.0) - cos * cos).sqrt() * m.sin())
                                * s
                        } else {
                            (cos - m * m.sin()) * s
                        }
                    }
                }
            })
            .collect();
        let top = z.iter().map(|v| v.re).fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - top).exp()).sum::<Complex64>().ln() + top;
        if let Some(p) = prob.as_deref_mut() {
            p.extend(z.iter().map(|v| (v - lse).re.exp()));
        }
        total += lse - z[labels[i]];
    }
    total / b as f64
}

/// Loss, probabilities and complex-step gradients of every raw input.
pub fn reference(x: &Matrix, labels: &[usize], w: &Matrix, margin: &MarginConfig) -> Reference {
    let (b, d) = x.shape();
    let c = w.cols();
    let xc = to_complex(x);
    let wc = to_complex(w);
    let mut prob = Vec::with_capacity(b * c);
    let loss = forward(&xc, &wc, b, d, c, labels, margin, Some(&mut prob)).re;

    let mut grad_x = Vec::with_capacity(xc.len());
    for idx in 0..xc.len() {
        let mut xp = xc.clone();
        xp[idx].im = STEP;
        grad_x.push(forward(&xp, &wc, b, d, c, labels, margin, None).im / STEP);
    }
    let mut grad_w = Vec::with_capacity(wc.len());
    for idx in 0..wc.len() {
        let mut wp = wc.clone();
        wp[idx].im = STEP;
        grad_w.push(forward(&xc, &wp, b, d, c, labels, margin, None).im / STEP);
    }
    Reference {
        loss,
        grad_x,
        grad_w,
        prob,
    }
}

/// Largest `|a − b| / max(|b|, 1e-6 · max|b|)`.
pub fn rel_err(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len());
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
    actual
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}
