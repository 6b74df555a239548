use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Match, RegisterError};
use crate::raster::PixelCoord;

/// Projective map between two image planes, kept as the representative of its
/// equivalence class with `h[2][2] = 1` (or unit Frobenius norm when the
/// bottom-right entry vanishes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Normalizes `m` into the class representative. Returns `None` for
    /// singular or non-finite matrices.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm = m.norm();
        if norm == 0.0 {
            return None;
        }
        let m = if m[(2, 2)].abs() > 1e-12 * norm {
            m / m[(2, 2)]
        } else {
            m / norm
        };
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-14 * m.norm().powi(3) {
            return None;
        }
        Some(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Option<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        out
    }

    /// Maps a point; the result is non-finite when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, p: PixelCoord) -> PixelCoord {
        let m = &self.m;
        let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
        PixelCoord::new(
            (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
            (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
        )
    }

    pub fn inverse(&self) -> Option<Self> {
        self.m.try_inverse().and_then(Self::from_matrix)
    }

    /// `self` followed by `next`: `next(self(p))`.
    pub fn then(&self, next: &Homography) -> Option<Self> {
        Self::from_matrix(next.m * self.m)
    }

    /// Conjugates by a translation of both planes: `T(t) * self * T(-t)`.
    pub fn conjugate_translation(&self, tx: f64, ty: f64) -> Option<Self> {
        let t = Homography::translation(tx, ty).m;
        let tinv = Homography::translation(-tx, -ty).m;
        Self::from_matrix(t * self.m * tinv)
    }
}

/// Mean of the forward and backward transfer distances, in pixels.
#[inline]
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, src: PixelCoord, dst: PixelCoord) -> f64 {
    let fwd = h.apply(src).dist(dst);
    let bwd = h_inv.apply(dst).dist(src);
    let e = 0.5 * (fwd + bwd);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the symmetric transfer error, pixels.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 2.0,
            seed: 0x5eed,
        }
    }
}

/// Similarity that maps the point set to zero centroid and mean distance sqrt(2).
fn normalizing_transform(pts: &[PixelCoord]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(ax, ay), p| (ax + p.x / n, ay + p.y / n));
    let mean_dist = pts.iter().map(|p| (p.x - mx).hypot(p.y - my)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Area-based collinearity test with a tolerance relative to the spread.
pub(crate) fn is_collinear(pts: &[PixelCoord]) -> bool {
    if pts.len() < 3 {
        return true;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(ax, ay), p| (ax + p.x / n, ay + p.y / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // eigenvalues of the 2x2 scatter matrix
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let lmax = tr / 2.0 + disc;
    let lmin = (tr / 2.0 - disc).max(0.0);
    lmax == 0.0 || lmin <= 1e-10 * lmax
}

fn any_three_collinear(pts: &[PixelCoord; 4]) -> bool {
    const IDX: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    let spread = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| a.dist(*b)))
        .fold(0.0, f64::max);
    IDX.iter().any(|t| {
        let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
        let area2 = ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs();
        area2 <= 1e-6 * spread * spread
    })
}

/// Normalized direct linear transform over all given correspondences.
pub fn fit_homography_dlt(src: &[PixelCoord], dst: &[PixelCoord]) -> Result<Homography, RegisterError> {
    assert_eq!(src.len(), dst.len());
    if src.len() < 4 {
        return Err(RegisterError::DegenerateConfiguration(format!(
            "{} correspondences, need at least 4",
            src.len()
        )));
    }
    if is_collinear(src) || is_collinear(dst) {
        return Err(RegisterError::DegenerateConfiguration(
            "correspondences are collinear".into(),
        ));
    }
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let p = ts * Vector3::new(s.x, s.y, 1.0);
        let q = td * Vector3::new(d.x, d.y, 1.0);
        let (x, y) = (p.x / p.z, p.y / p.z);
        let (u, v) = (q.x / q.z, q.y / q.z);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| RegisterError::DegenerateConfiguration("SVD failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| RegisterError::DegenerateConfiguration("normalization failed".into()))?;
    Homography::from_matrix(td_inv * hn * ts)
        .ok_or_else(|| RegisterError::DegenerateConfiguration("singular homography".into()))
}

fn inlier_mask(h: &Homography, src: &[PixelCoord], dst: &[PixelCoord], thr: f64) -> (Vec<bool>, f64) {
    let Some(hi) = h.inverse() else {
        return (vec![false; src.len()], f64::INFINITY);
    };
    let mut cost = 0.0;
    let mask = src
        .iter()
        .zip(dst)
        .map(|(s, d)| {
            let e = symmetric_transfer_error(h, &hi, *s, *d);
            let inl = e < thr;
            cost += if inl { e } else { thr };
            inl
        })
        .collect();
    (mask, cost)
}

/// Robust homography from point pairs: normalized DLT inside seeded RANSAC,
/// then an inlier refit.
pub fn fit_homography_points(
    src: &[PixelCoord],
    dst: &[PixelCoord],
    cfg: &RansacConfig,
) -> Result<Homography, RegisterError> {
    let n = src.len();
    if n < 4 {
        return Err(RegisterError::DegenerateConfiguration(format!(
            "{n} correspondences, need at least 4"
        )));
    }
    if is_collinear(src) || is_collinear(dst) {
        return Err(RegisterError::DegenerateConfiguration(
            "correspondences are collinear".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Homography)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 4);
        let s4 = [
            src[idx.index(0)],
            src[idx.index(1)],
            src[idx.index(2)],
            src[idx.index(3)],
        ];
        let d4 = [
            dst[idx.index(0)],
            dst[idx.index(1)],
            dst[idx.index(2)],
            dst[idx.index(3)],
        ];
        if any_three_collinear(&s4) || any_three_collinear(&d4) {
            continue;
        }
        let Ok(h) = fit_homography_dlt(&s4, &d4) else {
            continue;
        };
        let (mask, cost) = inlier_mask(&h, src, dst, cfg.inlier_threshold);
        let count = mask.iter().filter(|&&m| m).count();
        let better = match &best {
            None => true,
            Some((bc, bcost, _)) => count > *bc || (count == *bc && cost < *bcost),
        };
        if better {
            best = Some((count, cost, h));
        }
        if count == n {
            break;
        }
    }
    let (_, _, mut h) =
        best.ok_or_else(|| RegisterError::DegenerateConfiguration("no non-degenerate minimal sample".into()))?;
    // two rounds of inlier refit
    for _ in 0..2 {
        let (mask, _) = inlier_mask(&h, src, dst, cfg.inlier_threshold);
        let (s, d): (Vec<_>, Vec<_>) = src
            .iter()
            .zip(dst)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((s, d), _)| (*s, *d))
            .unzip();
        match fit_homography_dlt(&s, &d) {
            Ok(refit) => h = refit,
            Err(_) => break,
        }
    }
    Ok(h)
}

/// Robust homography over the valid pairs of a match list.
pub fn fit_homography(matches: &[Match], cfg: &RansacConfig) -> Result<Homography, RegisterError> {
    let (src, dst): (Vec<_>, Vec<_>) = matches.iter().filter(|m| m.valid).map(|m| (m.src, m.dst)).unzip();
    fit_homography_points(&src, &dst, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn projective() -> Homography {
        Homography::from_rows([[1.05, 0.04, 12.0], [-0.03, 0.98, -7.0], [1.5e-4, -0.8e-4, 1.0]]).unwrap()
    }

    #[test]
    fn minimal_translation_solve() {
        let src = [
            PixelCoord::new(0.0, 0.0),
            PixelCoord::new(100.0, 0.0),
            PixelCoord::new(100.0, 80.0),
            PixelCoord::new(0.0, 80.0),
        ];
        let dst: Vec<_> = src.iter().map(|p| PixelCoord::new(p.x + 3.0, p.y - 5.0)).collect();
        let matches: Vec<Match> = src.iter().zip(&dst).map(|(s, d)| Match::new(*s, *d)).collect();
        let h = fit_homography(&matches, &RansacConfig::default()).unwrap();
        let expect = Homography::translation(3.0, -5.0);
        assert!((h.matrix() - expect.matrix()).abs().max() < 1e-6);
    }

    #[test]
    fn robust_to_outliers() {
        let gt = projective();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut matches = Vec::new();
        for _ in 0..140 {
            let s = PixelCoord::new(rng.random_range(0.0..300.0), rng.random_range(0.0..240.0));
            matches.push(Match::new(s, gt.apply(s)));
        }
        for _ in 0..60 {
            let s = PixelCoord::new(rng.random_range(0.0..300.0), rng.random_range(0.0..240.0));
            let d = PixelCoord::new(rng.random_range(0.0..300.0), rng.random_range(0.0..240.0));
            matches.push(Match::new(s, d));
        }
        let h = fit_homography(&matches, &RansacConfig::default()).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = PixelCoord::new(rng.random_range(0.0..300.0), rng.random_range(0.0..240.0));
            worst = worst.max(h.apply(p).dist(gt.apply(p)));
        }
        assert!(worst < 0.5, "max error {worst}");
    }

    #[test]
    fn three_pairs_are_degenerate() {
        let m: Vec<Match> = (0..3)
            .map(|i| {
                Match::new(
                    PixelCoord::new(i as f64, 2.0 * i as f64),
                    PixelCoord::new(0.0, i as f64),
                )
            })
            .collect();
        assert!(matches!(
            fit_homography(&m, &RansacConfig::default()),
            Err(RegisterError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn collinear_pairs_are_degenerate() {
        let m: Vec<Match> = (0..10)
            .map(|i| {
                let p = PixelCoord::new(i as f64 * 5.0, i as f64 * 2.0);
                Match::new(p, PixelCoord::new(p.x + 1.0, p.y))
            })
            .collect();
        assert!(fit_homography(&m, &RansacConfig::default()).is_err());
    }

    #[test]
    fn equivariant_under_common_translation() {
        let gt = projective();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src: Vec<PixelCoord> = (0..50)
            .map(|_| PixelCoord::new(rng.random_range(0.0..300.0), rng.random_range(0.0..240.0)))
            .collect();
        let dst: Vec<PixelCoord> = src.iter().map(|p| gt.apply(*p)).collect();
        let (tx, ty) = (17.0, -9.0);
        let src_t: Vec<_> = src.iter().map(|p| PixelCoord::new(p.x + tx, p.y + ty)).collect();
        let dst_t: Vec<_> = dst.iter().map(|p| PixelCoord::new(p.x + tx, p.y + ty)).collect();
        let cfg = RansacConfig::default();
        let h = fit_homography_points(&src, &dst, &cfg).unwrap();
        let ht = fit_homography_points(&src_t, &dst_t, &cfg).unwrap();
        let expect = h.conjugate_translation(tx, ty).unwrap();
        assert!((ht.matrix() - expect.matrix()).abs().max() < 1e-6);
    }

    #[test]
    fn inverse_and_composition() {
        let h = projective();
        let id = h.then(&h.inverse().unwrap()).unwrap();
        assert!((id.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        let p = PixelCoord::new(40.0, 70.0);
        let t = Homography::translation(2.0, 1.0);
        let q = h.then(&t).unwrap().apply(p);
        let r = t.apply(h.apply(p));
        assert!(q.dist(r) < 1e-10);
    }
}
