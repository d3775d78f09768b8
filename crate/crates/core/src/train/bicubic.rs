//! Bicubic upscaling baseline for count images.

use crate::event::EventCountImage;

/// How taps that fall outside the image are resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Edge {
    /// Repeat the border pixel.
    Clamp,
    /// Mirror about the border (half-sample symmetric). Every source pixel
    /// then receives the same total weight, so mass is preserved exactly.
    #[default]
    Mirror,
}

/// Catmull-Rom cubic (a = −0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn resolve(j: isize, n: usize, edge: Edge) -> usize {
    let n = n as isize;
    let j = match edge {
        Edge::Clamp => j.clamp(0, n - 1),
        Edge::Mirror => {
            let period = 2 * n;
            let m = j.rem_euclid(period);
            if m < n { m } else { period - 1 - m }
        }
    };
    j as usize
}

/// `(source index, weight)` taps for each of the `n·r` outputs along one axis,
/// with pixel centres aligned (`src = (dst + ½)/r − ½`).
fn taps(n: usize, r: usize, edge: Edge) -> Vec<[(usize, f64); 4]> {
    (0..n * r)
        .map(|d| {
            let s = (d as f64 + 0.5) / r as f64 - 0.5;
            let base = s.floor() as isize;
            std::array::from_fn(|i| {
                let j = base - 1 + i as isize;
                (resolve(j, n, edge), cubic_kernel(s - j as f64))
            })
        })
        .collect()
}

/// Upscale a row-major `w×h` plane by `r`, scaled by `1/r²` so counts keep their total.
pub fn upscale_plane(src: &[f64], w: usize, h: usize, r: usize, edge: Edge) -> Vec<f64> {
    assert_eq!(src.len(), w * h);
    let (tx, ty) = (taps(w, r, edge), taps(h, r, edge));
    let ow = w * r;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for (x, t) in tx.iter().enumerate() {
            rows[y * ow + x] = t.iter().map(|&(j, k)| k * src[y * w + j]).sum();
        }
    }
    let norm = 1.0 / (r * r) as f64;
    let mut out = vec![0.0; h * r * ow];
    for (y, t) in ty.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = norm * t.iter().map(|&(j, k)| k * rows[j * ow + x]).sum::<f64>();
        }
    }
    out
}

/// `[2, rH, rW]` planes (positive then negative), row-major.
pub fn bicubic_baseline(lr_pos: &EventCountImage, lr_neg: &EventCountImage, r: usize, edge: Edge) -> Vec<f64> {
    let (w, h) = (lr_pos.width(), lr_pos.height());
    let mut out = Vec::with_capacity(2 * w * h * r * r);
    for img in [lr_pos, lr_neg] {
        let src: Vec<f64> = img.counts().iter().map(|&c| f64::from(c)).collect();
        out.extend(upscale_plane(&src, w, h, r, edge));
    }
    out
}
