//! Panorama, registration and detection metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::detect::{iou, BBox, Detection};
use crate::fusion::{Canvas, SimTransform4};
use crate::raster::{to_gray, PixelCoord, Raster};
use crate::register::{Homography, Match};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("canvas has no seam pixels")]
    NoSeams,
    #[error("{frames} frames but {transforms} transforms")]
    TransformCount { frames: usize, transforms: usize },
    #[error("non-finite metric {0}")]
    NonFinite(String),
}

/// Intensity and canvas-space gradient magnitude of frame `k` at canvas point `p`.
fn canvas_sample(frame: &Raster, t: &SimTransform4, p: PixelCoord) -> Option<(f64, f64)> {
    let q = t.apply_inverse(p)?;
    let at = |dx: f64, dy: f64| frame.sample_channel(PixelCoord::new(q.x + dx, q.y + dy), 0);
    // central differences; the bilinear derivative is one-sided at pixel centres
    let v = at(0.0, 0.0)?;
    let gx = 0.5 * (at(1.0, 0.0)? - at(-1.0, 0.0)?);
    let gy = 0.5 * (at(0.0, 1.0)? - at(0.0, -1.0)?);
    // frame = A^-1 (canvas - t), so the canvas gradient is A^-T times the frame gradient
    let (a, b) = (1.0 + t.r1, t.r2);
    let det = a * a + b * b;
    let cx = (a * gx + b * gy) / det;
    let cy = (-b * gx + a * gy) / det;
    Some((v, (cx * cx + cy * cy).sqrt()))
}

/// Mean over seam pixels of `(0.5 |dI| + 0.5 |d|grad I||) / 255`, each pixel
/// averaging over its contributor pairs and capped at 1.
pub fn texture_metric_error(
    canvas: &Canvas,
    frames: &[Raster],
    transforms: &[SimTransform4],
) -> Result<f64, EvalError> {
    if frames.len() != transforms.len() {
        return Err(EvalError::TransformCount {
            frames: frames.len(),
            transforms: transforms.len(),
        });
    }
    let gray: Vec<Raster> = frames
        .iter()
        .map(|f| if f.channels() == 1 { f.clone() } else { to_gray(f) })
        .collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, y) in canvas.seam_pixels() {
        let p = canvas.canvas_coord(x, y);
        let samples: Vec<(f64, f64)> = canvas.contributors[y * canvas.width() + x]
            .iter()
            .filter_map(|&k| canvas_sample(gray.get(k)?, transforms.get(k)?, p))
            .collect();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &(vi, gi)) in samples.iter().enumerate() {
            for &(vj, gj) in &samples[a + 1..] {
                sum += 0.5 * (vi - vj).abs() / 255.0 + 0.5 * (gi - gj).abs() / 255.0;
                pairs += 1;
            }
        }
        if pairs > 0 {
            total += (sum / pairs as f64).min(1.0);
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoSeams);
    }
    Ok(total / n as f64)
}

/// `|src - backward(forward(src))|`.
pub fn fb_error(m: &Match, forward: &Homography, backward: &Homography) -> f64 {
    m.src.dist(backward.apply(forward.apply(m.src)))
}

/// Round trip through the match itself: `|src - backward(dst)|`.
pub fn match_fb_error(m: &Match, backward: &Homography) -> f64 {
    m.src.dist(backward.apply(m.dst))
}

/// Number of errors strictly below each threshold.
pub fn fb_curve(errors: &[f64], thresholds: &[f64]) -> Vec<usize> {
    thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub regions: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn insert(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    pub fn insert_region(&mut self, region: &str, key: &str, value: f64) {
        self.regions
            .entry(region.to_string())
            .or_default()
            .insert(key.to_string(), value);
    }

    pub fn merge(&mut self, other: EvalReport) {
        self.metrics.extend(other.metrics);
        for (r, m) in other.regions {
            self.regions.entry(r).or_default().extend(m);
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let all = self.metrics.iter().chain(self.regions.values().flat_map(|m| m.iter()));
        for (k, v) in all {
            if !v.is_finite() {
                return Err(EvalError::NonFinite(k.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite report") + "\n"
    }

    /// Aligned two-column table, then one block per region.
    pub fn to_table(&self) -> String {
        let width = self
            .metrics
            .keys()
            .chain(self.regions.values().flat_map(|m| m.keys()))
            .map(String::len)
            .max()
            .unwrap_or(6)
            .max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  value", "metric");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k:<width$}  {}", format_value(k, *v));
        }
        for (r, m) in &self.regions {
            let _ = writeln!(s, "\n[{r}]");
            for (k, v) in m {
                let _ = writeln!(s, "{k:<width$}  {}", format_value(k, *v));
            }
        }
        s
    }
}

fn format_value(key: &str, v: f64) -> String {
    if key.ends_with("recall") || key.ends_with("accuracy") {
        format_percent(v)
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.6}")
    }
}

/// Percentage rounded to one decimal.
pub fn format_percent(rate: f64) -> String {
    format!("{:.1}%", rate * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionCounts {
    pub gts: usize,
    pub detections: usize,
    pub matched: usize,
}

impl DetectionCounts {
    pub fn recall(&self) -> f64 {
        if self.gts == 0 {
            1.0
        } else {
            self.matched as f64 / self.gts as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.detections == 0 {
            0.0
        } else {
            self.matched as f64 / self.detections as f64
        }
    }
}

/// Greedy one-to-one matching for one image: detections by descending
/// confidence (ties by index), each to the unmatched gt of highest IOU above
/// `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&dets[i].bbox, gt);
            if o > iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

pub fn detection_counts(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> DetectionCounts {
    let mut c = DetectionCounts::default();
    for (d, g) in dets.iter().zip(gts) {
        c.gts += g.len();
        c.detections += d.len();
        c.matched += match_detections(d, g, 0.5).iter().flatten().count();
    }
    // images without a detection list still count their ground truth
    c.gts += gts.iter().skip(dets.len()).map(Vec::len).sum::<usize>();
    c
}

/// Recall and accuracy at IOU > 0.5, pooled over images.
pub fn detection_report(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> EvalReport {
    let c = detection_counts(dets, gts);
    let mut r = EvalReport::default();
    r.insert("detect.gt", c.gts as f64);
    r.insert("detect.detections", c.detections as f64);
    r.insert("detect.matched", c.matched as f64);
    r.insert("detect.recall", c.recall());
    r.insert("detect.accuracy", c.accuracy());
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{composite, CompositeConfig};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize, offset: f64) -> Raster {
        Raster::from_fn_gray(w, h, |x, y| 40.0 + 2.0 * x as f64 + 1.5 * y as f64 + offset)
    }

    fn pair(offset_b: f64) -> (Canvas, Vec<Raster>, Vec<SimTransform4>) {
        // frame b placed 20 px right of a; the ramp lines up exactly in canvas space
        let a = ramp(40, 30, 0.0);
        let b = Raster::from_fn_gray(40, 30, |x, y| a.get(x, y, 0) + 40.0 + offset_b);
        let frames = vec![a, b];
        let ts = vec![SimTransform4::IDENTITY, SimTransform4::translation(20.0, 0.0)];
        let c = composite(&frames, &ts, &CompositeConfig::default()).unwrap();
        (c, frames, ts)
    }

    #[test]
    fn consistent_mosaic_scores_zero() {
        let (c, f, t) = pair(0.0);
        assert_eq!(texture_metric_error(&c, &f, &t).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_half_normalized_offset() {
        let (c, f, t) = pair(25.5);
        let e = texture_metric_error(&c, &f, &t).unwrap();
        assert!((e - 0.05).abs() < 1e-12, "{e}");
    }

    #[test]
    fn offset_strictly_increases_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = noise(30, 30, &mut rng);
        let b = a.crop(10, 0, 20, 30);
        let ts = vec![SimTransform4::IDENTITY, SimTransform4::translation(10.0, 0.0)];
        let cfg = CompositeConfig::default();
        let score = |off: f64| {
            let mut bb = b.clone();
            bb.data_mut().iter_mut().for_each(|v| *v += off);
            let frames = vec![a.clone(), bb];
            let c = composite(&frames, &ts, &cfg).unwrap();
            texture_metric_error(&c, &frames, &ts).unwrap()
        };
        let (e0, e1, e2) = (score(0.0), score(10.0), score(20.0));
        assert_eq!(e0, 0.0);
        assert!(e1 > e0 && e2 > e1);
        assert!(e2 <= 1.0);
    }

    fn tme_oracle(c: &Canvas, frames: &[Raster], ts: &[SimTransform4]) -> f64 {
        let mut total = 0.0;
        let mut n = 0.0;
        for y in 0..c.height() {
            for x in 0..c.width() {
                if !c.seam_map[y * c.width() + x] {
                    continue;
                }
                let p = c.canvas_coord(x, y);
                let mut vals = Vec::new();
                'frames: for &k in &c.contributors[y * c.width() + x] {
                    let t = ts[k];
                    let m = Matrix3::new(1.0 + t.r1, -t.r2, t.t1, t.r2, 1.0 + t.r1, t.t2, 0.0, 0.0, 1.0);
                    let q = m.try_inverse().unwrap() * nalgebra::Vector3::new(p.x, p.y, 1.0);
                    let mut st = [0.0; 5];
                    for (s, (dx, dy)) in
                        st.iter_mut()
                            .zip([(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)])
                    {
                        match frames[k].sample_channel(PixelCoord::new(q.x + dx, q.y + dy), 0) {
                            Some(v) => *s = v,
                            None => continue 'frames,
                        }
                    }
                    let (v, gx, gy) = (st[0], (st[1] - st[2]) / 2.0, (st[3] - st[4]) / 2.0);
                    let a = nalgebra::Matrix2::new(1.0 + t.r1, -t.r2, t.r2, 1.0 + t.r1);
                    let g = a.try_inverse().unwrap().transpose() * nalgebra::Vector2::new(gx, gy);
                    vals.push((v, g.norm()));
                }
                let mut s = 0.0;
                let mut m = 0.0;
                for i in 0..vals.len() {
                    for j in i + 1..vals.len() {
                        s += ((vals[i].0 - vals[j].0).abs() + (vals[i].1 - vals[j].1).abs()) / 510.0;
                        m += 1.0;
                    }
                }
                if m > 0.0 {
                    total += f64::min(s / m, 1.0);
                    n += 1.0;
                }
            }
        }
        total / n
    }

    #[test]
    fn random_mosaic_matches_second_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3 {
            let frames: Vec<Raster> = (0..3).map(|_| noise(24, 20, &mut rng)).collect();
            let ts: Vec<SimTransform4> = (0..3)
                .map(|k| {
                    SimTransform4::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        k as f64 * 8.0 + rng.random_range(-1.0..1.0),
                        rng.random_range(-3.0..3.0),
                    )
                })
                .collect();
            let c = composite(&frames, &ts, &CompositeConfig::default()).unwrap();
            let e = texture_metric_error(&c, &frames, &ts).unwrap();
            assert!((e - tme_oracle(&c, &frames, &ts)).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_frames_have_no_seams() {
        let frames = vec![ramp(10, 10, 0.0), ramp(10, 10, 0.0)];
        let ts = vec![SimTransform4::IDENTITY, SimTransform4::translation(30.0, 0.0)];
        let c = composite(&frames, &ts, &CompositeConfig::default()).unwrap();
        assert_eq!(texture_metric_error(&c, &frames, &ts), Err(EvalError::NoSeams));
    }

    #[test]
    fn fb_error_examples() {
        let m = Match::new(PixelCoord::new(3.0, 4.0), PixelCoord::new(5.0, 4.0));
        let f = Homography::translation(2.0, 0.0);
        assert_eq!(fb_error(&m, &f, &f.inverse().unwrap()), 0.0);
        assert!((fb_error(&m, &f, &Homography::translation(-1.0, 0.0)) - 1.0).abs() < 1e-12);
        assert_eq!(match_fb_error(&m, &f.inverse().unwrap()), 0.0);
    }

    #[test]
    fn fb_error_matches_matrix_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut rand_h = || {
                let m = Matrix3::new(
                    1.0 + rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-0.2..0.2),
                    1.0 + rng.random_range(-0.2..0.2),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-1e-3..1e-3),
                    rng.random_range(-1e-3..1e-3),
                    1.0,
                );
                (m, Homography::from_matrix(m).unwrap())
            };
            let ((mf, hf), (mb, hb)) = (rand_h(), rand_h());
            let src = PixelCoord::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            let r = mb * mf * nalgebra::Vector3::new(src.x, src.y, 1.0);
            let expect = ((r.x / r.z - src.x).powi(2) + (r.y / r.z - src.y).powi(2)).sqrt();
            let got = fb_error(&Match::new(src, src), &hf, &hb);
            assert!((got - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn fb_curve_is_strict_and_monotone() {
        let errs = [0.0, 0.5, 1.0, 1.0, 2.5, 7.0];
        assert_eq!(
            fb_curve(&errs, &[0.0, 1.0, 1.0001, 3.0, f64::INFINITY]),
            vec![0, 2, 4, 5, 6]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let errs: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..5.0)).collect();
        let th: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let curve = fb_curve(&errs, &th);
        for (c, t) in curve.iter().zip(&th) {
            let mut n = 0;
            for e in &errs {
                if e < t {
                    n += 1;
                }
            }
            assert_eq!(*c, n);
        }
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }

    fn noise(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Raster {
        let data = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
        Raster::from_data(w, h, 1, data).unwrap()
    }

    fn det(x: f64, conf: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            confidence: conf,
        }
    }

    #[test]
    fn table_arithmetic() {
        // the printed table truncates one row and rounds the other
        for (n_det, n_match, printed) in [(58usize, 56usize, 96.5), (71, 67, 94.4)] {
            let gts: Vec<BBox> = (0..n_match)
                .map(|i| BBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0))
                .collect();
            let mut dets: Vec<Detection> = (0..n_match).map(|i| det(i as f64 * 20.0, 0.9)).collect();
            dets.extend((0..n_det - n_match).map(|i| det(5000.0 + i as f64 * 20.0, 0.8)));
            let r = detection_report(&[dets], &[gts]);
            assert_eq!(r.metrics["detect.recall"], 1.0);
            let acc = r.metrics["detect.accuracy"];
            assert_eq!(acc, n_match as f64 / n_det as f64);
            assert!((acc * 100.0 - printed).abs() < 0.1);
            assert!(r.to_table().contains(&format_percent(acc)));
        }
    }

    #[test]
    fn greedy_prefers_confidence_then_index() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![det(1.0, 0.5), det(2.0, 0.9), det(0.0, 0.9)];
        // equal confidence: the lower index wins even with smaller overlap
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![None, Some(0), None]);
    }

    #[test]
    fn report_is_order_invariant() {
        let gts = vec![
            vec![BBox::new(0.0, 0.0, 10.0, 10.0)],
            vec![BBox::new(30.0, 0.0, 40.0, 10.0)],
            vec![],
        ];
        let dets = vec![
            vec![det(1.0, 0.7)],
            vec![det(0.0, 0.6), det(29.0, 0.4)],
            vec![det(3.0, 0.2)],
        ];
        let a = detection_report(&dets, &gts);
        let mut d2 = dets.clone();
        let mut g2 = gts.clone();
        d2.reverse();
        g2.reverse();
        assert_eq!(a, detection_report(&d2, &g2));
        assert_eq!(a.metrics["detect.matched"], 2.0);
        assert_eq!(a.metrics["detect.accuracy"], 0.5);
    }

    #[test]
    fn report_serializes() {
        let mut r = detection_report(&[vec![det(0.0, 1.0)]], &[vec![BBox::new(0.0, 0.0, 10.0, 10.0)]]);
        r.insert_region("scene0", "tme", 0.125);
        r.validate().unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        r.insert("bad", f64::NAN);
        assert!(r.validate().is_err());
    }
}
