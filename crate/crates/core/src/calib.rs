//! Two-term polynomial radial lens model and frame undistortion.

use serde::{Deserialize, Serialize};

use crate::raster::{PixelCoord, Raster};

/// Pinhole intrinsics plus radial coefficients:
/// `s = 1 + k1 r^2 + k2 r^4` applied in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
}

impl DistortionModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0
    }

    /// Checks focal lengths and, when bound to an image, the principal point.
    pub fn validate(&self, size: Option<(usize, usize)>) -> Result<(), String> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("distortion model has non-finite entries".into());
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            ));
        }
        if let Some((w, h)) = size {
            if !(self.cx > 0.0 && self.cx < w as f64 && self.cy > 0.0 && self.cy < h as f64) {
                return Err(format!(
                    "principal point ({}, {}) outside the {w}x{h} image",
                    self.cx, self.cy
                ));
            }
        }
        Ok(())
    }

    #[inline]
    fn radial_scale(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Ideal pixel to its projection in the normalized camera plane.
    #[inline]
    pub fn normalize(&self, p: PixelCoord) -> (f64, f64) {
        ((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }

    #[inline]
    pub fn denormalize(&self, u: f64, v: f64) -> PixelCoord {
        PixelCoord::new(self.cx + self.fx * u, self.cy + self.fy * v)
    }
}

/// Maps an ideal (pinhole) pixel to the pixel where the lens actually images it.
pub fn distort_point(model: &DistortionModel, p_ideal: PixelCoord) -> PixelCoord {
    let (u, v) = model.normalize(p_ideal);
    let s = model.radial_scale(u * u + v * v);
    model.denormalize(u * s, v * s)
}

/// Inverts [`distort_point`] by Newton iteration on the radius. Returns `None`
/// when the radial polynomial is not invertible along this ray (the point lies
/// beyond the fold of a strongly barrel-distorted lens).
pub fn undistort_point(model: &DistortionModel, p_distorted: PixelCoord) -> Option<PixelCoord> {
    if model.is_identity() {
        return Some(p_distorted);
    }
    let (ud, vd) = model.normalize(p_distorted);
    let rd = (ud * ud + vd * vd).sqrt();
    if rd == 0.0 {
        return Some(p_distorted);
    }
    // solve f(r) = r (1 + k1 r^2 + k2 r^4) - rd = 0
    let mut r = rd;
    for _ in 0..50 {
        let r2 = r * r;
        let f = r * model.radial_scale(r2) - rd;
        let df = 1.0 + 3.0 * model.k1 * r2 + 5.0 * model.k2 * r2 * r2;
        if df <= 1e-12 {
            return None;
        }
        let step = f / df;
        r -= step;
        if r < 0.0 {
            return None;
        }
        if step.abs() < 1e-14 * (1.0 + r) {
            break;
        }
    }
    let r2 = r * r;
    if (r * model.radial_scale(r2) - rd).abs() > 1e-9 * (1.0 + rd) {
        return None;
    }
    // monotone branch only: derivative must stay positive between 0 and r
    if 1.0 + 3.0 * model.k1 * r2 + 5.0 * model.k2 * r2 * r2 <= 0.0 {
        return None;
    }
    let k = r / rd;
    Some(model.denormalize(ud * k, vd * k))
}

/// Resamples a raw frame onto the ideal pinhole grid. Pixels whose source
/// falls outside the input are black.
pub fn undistort_image(img: &Raster, model: &DistortionModel) -> Raster {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = Raster::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let src = distort_point(model, PixelCoord::new(x as f64, y as f64));
            for c in 0..ch {
                out.set(x, y, c, img.sample_channel(src, c).unwrap_or(0.0));
            }
        }
    }
    out
}

/// Applies the lens to an ideal image: output pixel `p` shows the ideal image
/// at `undistort_point(p)`.
pub fn distort_image(img: &Raster, model: &DistortionModel) -> Raster {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = Raster::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let Some(src) = undistort_point(model, PixelCoord::new(x as f64, y as f64)) else {
                continue;
            };
            for c in 0..ch {
                out.set(x, y, c, img.sample_channel(src, c).unwrap_or(0.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(k1: f64, k2: f64) -> DistortionModel {
        DistortionModel {
            fx: 300.0,
            fy: 300.0,
            cx: 280.0,
            cy: 280.0,
            k1,
            k2,
        }
    }

    #[test]
    fn identity_and_center() {
        let p = PixelCoord::new(13.5, 400.25);
        assert_eq!(distort_point(&model(0.0, 0.0), p), p);
        let c = PixelCoord::new(280.0, 280.0);
        assert_eq!(distort_point(&model(0.3, -0.1), c), c);
    }

    #[test]
    fn known_value() {
        let q = distort_point(&model(0.1, 0.0), PixelCoord::new(580.0, 280.0));
        assert!((q.x - 610.0).abs() < 1e-12 && (q.y - 280.0).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(model(0.1, 0.0).validate(Some((560, 480))).is_ok());
        assert!(model(0.1, 0.0).validate(Some((200, 200))).is_err());
        let mut m = model(0.0, 0.0);
        m.fx = 0.0;
        assert!(m.validate(None).is_err());
    }

    #[test]
    fn undistort_zero_model_is_identity() {
        let img = Raster::from_fn_gray(20, 15, |x, y| ((x * 7 + y * 13) % 256) as f64);
        let m = DistortionModel::pinhole(10.0, 10.0, 10.0, 7.0);
        assert_eq!(undistort_image(&img, &m), img);
    }

    #[test]
    fn constant_stays_constant_in_valid_region() {
        let m = DistortionModel {
            fx: 60.0,
            fy: 60.0,
            cx: 40.0,
            cy: 30.0,
            k1: 0.2,
            k2: 0.0,
        };
        let img = Raster::filled(80, 60, 1, 90.0);
        let out = undistort_image(&img, &m);
        for y in 0..60 {
            for x in 0..80 {
                let v = out.get(x, y, 0);
                assert!(v == 90.0 || v == 0.0);
            }
        }
        assert_eq!(out.get(40, 30, 0), 90.0);
    }

    #[test]
    fn distort_undistort_round_trip_mae() {
        // smooth synthetic image; central 50% region
        let (w, h) = (160usize, 120usize);
        let ideal = Raster::from_fn_gray(w, h, |x, y| {
            128.0 + 60.0 * (x as f64 * 0.21).sin() * (y as f64 * 0.17).cos()
        });
        for k1 in [-0.3, -0.1, 0.1, 0.3] {
            let m = DistortionModel {
                fx: 140.0,
                fy: 140.0,
                cx: 80.0,
                cy: 60.0,
                k1,
                k2: 0.0,
            };
            let back = undistort_image(&distort_image(&ideal, &m), &m);
            let mut sum = 0.0;
            let mut n = 0;
            for y in h / 4..3 * h / 4 {
                for x in w / 4..3 * w / 4 {
                    sum += (back.get(x, y, 0) - ideal.get(x, y, 0)).abs();
                    n += 1;
                }
            }
            assert!(sum / (n as f64) < 2.0, "k1={k1} mae={}", sum / n as f64);
        }
    }

    proptest! {
        #[test]
        fn distortion_is_radial(x in 0.0f64..560.0, y in 0.0f64..480.0,
                                k1 in -0.3f64..0.3, k2 in -0.05f64..0.05) {
            let m = model(k1, k2);
            let p = PixelCoord::new(x, y);
            let q = distort_point(&m, p);
            let (ax, ay) = (p.x - m.cx, p.y - m.cy);
            let (bx, by) = (q.x - m.cx, q.y - m.cy);
            let cross = ax * by - ay * bx;
            prop_assert!(cross.abs() <= 1e-9 * (1.0 + ax.hypot(ay) * bx.hypot(by)));
        }

        #[test]
        fn undistort_inverts_distort(x in 100.0f64..460.0, y in 100.0f64..380.0, k1 in -0.2f64..0.3) {
            let m = model(k1, 0.0);
            let p = PixelCoord::new(x, y);
            let q = distort_point(&m, p);
            let back = undistort_point(&m, q).unwrap();
            prop_assert!(back.dist(p) < 1e-7);
        }
    }
}
