use serde::{Deserialize, Serialize};

use super::Match;
use crate::raster::{gaussian_smooth, to_gray, PixelCoord, Raster};

/// Side of the square intensity patch used as descriptor.
pub const DESCRIPTOR_SIDE: usize = 11;
const DESCRIPTOR_RADIUS: usize = DESCRIPTOR_SIDE / 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub pos: PixelCoord,
    pub response: f64,
    /// Mean-subtracted, unit-norm patch (row-major).
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Pre-smoothing before differentiation.
    pub derivative_sigma: f64,
    /// Integration scale of the structure tensor.
    pub integration_sigma: f64,
    pub harris_k: f64,
    pub nms_radius: usize,
    /// Responses below this fraction of the image maximum are ignored.
    pub relative_threshold: f64,
    /// Half-width of the gradient window used for sub-pixel corner refinement.
    pub refine_radius: usize,
    /// Blur applied before sampling descriptor patches; 0 samples the raw image.
    pub descriptor_sigma: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            derivative_sigma: 1.0,
            integration_sigma: 1.5,
            harris_k: 0.04,
            nms_radius: 3,
            relative_threshold: 1e-4,
            refine_radius: 4,
            descriptor_sigma: 1.5,
        }
    }
}

struct Gradients {
    gx: Raster,
    gy: Raster,
}

fn gradients(gray: &Raster, sigma: f64) -> Gradients {
    let smooth = gaussian_smooth(gray, sigma);
    let (w, h) = (gray.width(), gray.height());
    let at = |x: usize, y: usize, dx: isize, dy: isize| smooth.get_clamped(x as isize + dx, y as isize + dy, 0);
    Gradients {
        gx: Raster::from_fn_gray(w, h, |x, y| 0.5 * (at(x, y, 1, 0) - at(x, y, -1, 0))),
        gy: Raster::from_fn_gray(w, h, |x, y| 0.5 * (at(x, y, 0, 1) - at(x, y, 0, -1))),
    }
}

fn harris_response(g: &Gradients, cfg: &DetectorConfig) -> Raster {
    let (w, h) = (g.gx.width(), g.gx.height());
    let prod = |f: fn(f64, f64) -> f64| Raster::from_fn_gray(w, h, |x, y| f(g.gx.get(x, y, 0), g.gy.get(x, y, 0)));
    let ixx = gaussian_smooth(&prod(|a, _| a * a), cfg.integration_sigma);
    let iyy = gaussian_smooth(&prod(|_, b| b * b), cfg.integration_sigma);
    let ixy = gaussian_smooth(&prod(|a, b| a * b), cfg.integration_sigma);
    Raster::from_fn_gray(w, h, |x, y| {
        let (a, b, c) = (ixx.get(x, y, 0), iyy.get(x, y, 0), ixy.get(x, y, 0));
        a * b - c * c - cfg.harris_k * (a + b) * (a + b)
    })
}

/// Gradient least-squares corner position (the point where every window
/// gradient is orthogonal to the offset). Falls back to `None` when the
/// window is ill-conditioned or the estimate leaves the window.
fn refine_corner(g: &Gradients, x: usize, y: usize, radius: usize) -> Option<PixelCoord> {
    let (w, h) = (g.gx.width(), g.gx.height());
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for py in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
        for px in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
            let (gx, gy) = (g.gx.get(px, py, 0), g.gy.get(px, py, 0));
            let (pxf, pyf) = (px as f64, py as f64);
            a11 += gx * gx;
            a12 += gx * gy;
            a22 += gy * gy;
            b1 += gx * gx * pxf + gx * gy * pyf;
            b2 += gx * gy * pxf + gy * gy * pyf;
        }
    }
    let det = a11 * a22 - a12 * a12;
    let tr = a11 + a22;
    if det <= 1e-6 * tr * tr {
        return None;
    }
    let cx = (a22 * b1 - a12 * b2) / det;
    let cy = (a11 * b2 - a12 * b1) / det;
    let lim = radius as f64 * 0.5;
    if (cx - x as f64).abs() > lim || (cy - y as f64).abs() > lim {
        return None;
    }
    Some(PixelCoord::new(cx, cy))
}

/// Mean-subtracted, L2-normalized patch; `None` for flat patches.
fn patch_descriptor(gray: &Raster, cx: usize, cy: usize) -> Option<Vec<f64>> {
    let r = DESCRIPTOR_RADIUS;
    let mut d = Vec::with_capacity(DESCRIPTOR_SIDE * DESCRIPTOR_SIDE);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            d.push(gray.get(x, y, 0));
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

/// Parabolic peak offset from three samples, clamped to half a pixel.
fn subpixel_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Harris corners with square non-maximum suppression, strongest first.
pub fn detect_keypoints(img: &Raster, max_n: usize, cfg: &DetectorConfig) -> Vec<Keypoint> {
    let gray = to_gray(img);
    let (w, h) = (gray.width(), gray.height());
    let margin = DESCRIPTOR_RADIUS.max(1) + 1;
    if w <= 2 * margin || h <= 2 * margin || max_n == 0 {
        return Vec::new();
    }
    let grads = gradients(&gray, cfg.derivative_sigma);
    let resp = harris_response(&grads, cfg);
    let max_r = resp.data().iter().copied().fold(0.0, f64::max);
    if max_r <= 0.0 {
        return Vec::new();
    }
    let thr = (cfg.relative_threshold * max_r).max(1e-9);
    let rad = cfg.nms_radius as isize;

    let mut candidates = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = resp.get(x, y, 0);
            if r <= thr {
                continue;
            }
            let mut is_max = true;
            'win: for dy in -rad..=rad {
                for dx in -rad..=rad {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let other = resp.get(nx as usize, ny as usize, 0);
                    // strict against earlier raster positions so plateaus yield one peak
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if other > r || (earlier && other == r) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                candidates.push((r, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));

    let patches = if cfg.descriptor_sigma > 0.0 {
        gaussian_smooth(&gray, cfg.descriptor_sigma)
    } else {
        gray.clone()
    };
    let mut out = Vec::with_capacity(max_n.min(candidates.len()));
    for (r, x, y) in candidates {
        if out.len() == max_n {
            break;
        }
        let Some(descriptor) = patch_descriptor(&patches, x, y) else {
            continue;
        };
        let pos = refine_corner(&grads, x, y, cfg.refine_radius).unwrap_or_else(|| {
            let ox = subpixel_offset(resp.get(x - 1, y, 0), r, resp.get(x + 1, y, 0));
            let oy = subpixel_offset(resp.get(x, y - 1, 0), r, resp.get(x, y + 1, 0));
            PixelCoord::new(x as f64 + ox, y as f64 + oy)
        });
        out.push(Keypoint {
            pos,
            response: r,
            descriptor,
        });
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn descriptor_distance(similarity: f64) -> f64 {
    (2.0 - 2.0 * similarity).max(0.0).sqrt()
}

/// Mutual nearest neighbours by descriptor correlation with a distance ratio test.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let sim: Vec<Vec<f64>> = a
        .iter()
        .map(|ka| b.iter().map(|kb| dot(&ka.descriptor, &kb.descriptor)).collect())
        .collect();

    let best_in_row = |i: usize| -> (usize, f64, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for (j, &s) in sim[i].iter().enumerate() {
            if s > best.1 {
                second = best.1;
                best = (j, s);
            } else if s > second {
                second = s;
            }
        }
        (best.0, best.1, second)
    };
    let best_in_col = |j: usize| -> usize {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, row) in sim.iter().enumerate() {
            if row[j] > best.1 {
                best = (i, row[j]);
            }
        }
        best.0
    };

    let mut out = Vec::new();
    for i in 0..a.len() {
        let (j, s1, s2) = best_in_row(i);
        if best_in_col(j) != i {
            continue;
        }
        if s2.is_finite() {
            let (d1, d2) = (descriptor_distance(s1), descriptor_distance(s2));
            if d1 >= ratio * d2 {
                continue;
            }
        }
        out.push(Match::new(a[i].pos, b[j].pos));
    }
    out
}
