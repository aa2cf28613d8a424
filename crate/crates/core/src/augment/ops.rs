//! Pixel-level primitives used by the augmentation recipes: separable
//! bilinear resampling (optionally antialiased), HSV round trips, and
//! perspective warps via an 8x8 homography solve.

use ndarray::{Array2, Array3};

/// Triangle-filter weights for one output coordinate along one axis.
fn axis_weights(in_len: usize, out_len: usize, antialias: bool) -> Vec<(usize, Vec<f64>)> {
    let scale = in_len as f64 / out_len as f64;
    // Antialiasing widens the filter support when downscaling.
    let support = if antialias && scale > 1.0 { scale } else { 1.0 };
    let mut rows = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let center = (o as f64 + 0.5) * scale - 0.5;
        let lo = ((center - support).ceil() as isize).max(0) as usize;
        let hi = ((center + support).floor() as isize).min(in_len as isize - 1) as usize;
        let (lo, hi) = if lo > hi {
            let nearest = center.round().clamp(0.0, in_len as f64 - 1.0) as usize;
            (nearest, nearest)
        } else {
            (lo, hi)
        };
        let mut weights = Vec::with_capacity(hi - lo + 1);
        let mut total = 0.0;
        for i in lo..=hi {
            let w = 1.0 - ((i as f64 - center) / support).abs();
            let w = w.max(0.0);
            weights.push(w);
            total += w;
        }
        if total <= 0.0 {
            let uniform = 1.0 / weights.len() as f64;
            weights.iter_mut().for_each(|w| *w = uniform);
        } else {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        rows.push((lo, weights));
    }
    rows
}

/// Resize one channel with separable bilinear filtering.
pub fn resize_plane(src: &Array2<f64>, out_h: usize, out_w: usize, antialias: bool) -> Array2<f64> {
    let (h, w) = src.dim();
    let row_w = axis_weights(h, out_h, antialias);
    let col_w = axis_weights(w, out_w, antialias);

    // Rows first, then columns.
    let mut tmp = Array2::zeros((out_h, w));
    for (oy, (lo, ws)) in row_w.iter().enumerate() {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wgt) in ws.iter().enumerate() {
                acc += wgt * src[(lo + k, x)];
            }
            tmp[(oy, x)] = acc;
        }
    }
    let mut out = Array2::zeros((out_h, out_w));
    for (ox, (lo, ws)) in col_w.iter().enumerate() {
        for y in 0..out_h {
            let mut acc = 0.0;
            for (k, wgt) in ws.iter().enumerate() {
                acc += wgt * tmp[(y, lo + k)];
            }
            out[(y, ox)] = acc;
        }
    }
    out
}

/// Resize all channels of a CHW image.
pub fn resize_chw(src: &Array3<f64>, out_h: usize, out_w: usize, antialias: bool) -> Array3<f64> {
    let (c, _, _) = src.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = resize_plane(&src.index_axis(ndarray::Axis(0), ch).to_owned(), out_h, out_w, antialias);
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    out
}

/// Luma conversion of a CHW image to one plane (ITU-R 601 weights).
pub fn luma(img: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = img.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[(y, x)] =
                0.299 * img[(0, y, x)] + 0.587 * img[(1, y, x)] + 0.114 * img[(2, y, x)];
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta) % 6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let h = if h < 0.0 { h + 1.0 } else { h };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Shift hue of a CHW image by `delta` (fraction of a full turn).
pub fn shift_hue(img: &mut Array3<f64>, delta: f64) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]);
            let (r, g, b) = hsv_to_rgb(hh + delta, ss, vv);
            img[(0, y, x)] = r;
            img[(1, y, x)] = g;
            img[(2, y, x)] = b;
        }
    }
}

/// Solve the 8x8 linear system for the homography taking `from` points to
/// `to` points (both as (x, y)); returns row-major [a..h] with the
/// implicit ninth coefficient fixed at 1.
pub fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<[f64; 8]> {
    let mut m = [[0.0f64; 9]; 8];
    for (i, (&(fx, fy), &(tx, ty))) in from.iter().zip(to.iter()).enumerate() {
        m[2 * i] = [fx, fy, 1.0, 0.0, 0.0, 0.0, -fx * tx, -fy * tx, tx];
        m[2 * i + 1] = [0.0, 0.0, 0.0, fx, fy, 1.0, -fx * ty, -fy * ty, ty];
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        let div = m[col][col];
        for v in m[col].iter_mut() {
            *v /= div;
        }
        for row in 0..8 {
            if row != col {
                let factor = m[row][col];
                for k in 0..9 {
                    m[row][k] -= factor * m[col][k];
                }
            }
        }
    }
    let mut coeffs = [0.0; 8];
    for (i, c) in coeffs.iter_mut().enumerate() {
        *c = m[i][8];
    }
    Some(coeffs)
}

fn sample_bilinear(plane: &ndarray::ArrayView2<f64>, sy: f64, sx: f64, fill: f64) -> f64 {
    let (h, w) = plane.dim();
    if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
        return fill;
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let dx = sx - x0;
    let dy = sy - y0;
    let get = |yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            fill
        } else {
            plane[(yy as usize, xx as usize)]
        }
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    let v00 = get(y0, x0);
    let v01 = get(y0, x0 + 1);
    let v10 = get(y0 + 1, x0);
    let v11 = get(y0 + 1, x0 + 1);
    v00 * (1.0 - dy) * (1.0 - dx) + v01 * (1.0 - dy) * dx + v10 * dy * (1.0 - dx) + v11 * dy * dx
}

/// Warp a CHW image so that `startpoints` land on `endpoints`;
/// out-of-source regions take `fill`.
pub fn perspective_warp(
    img: &Array3<f64>,
    startpoints: &[(f64, f64); 4],
    endpoints: &[(f64, f64); 4],
    fill: f64,
) -> Array3<f64> {
    let (c, h, w) = img.dim();
    // Map output coordinates back into the source: endpoints -> startpoints.
    let Some(coef) = homography(endpoints, startpoints) else {
        return img.clone();
    };
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let denom = coef[6] * xf + coef[7] * yf + 1.0;
            let sx = (coef[0] * xf + coef[1] * yf + coef[2]) / denom;
            let sy = (coef[3] * xf + coef[4] * yf + coef[5]) / denom;
            for ch in 0..c {
                out[(ch, y, x)] =
                    sample_bilinear(&img.index_axis(ndarray::Axis(0), ch), sy, sx, fill);
            }
        }
    }
    out
}
