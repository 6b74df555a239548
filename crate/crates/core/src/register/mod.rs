//! Feature registration between adjacent frames: Harris keypoints, descriptor
//! matching, robust homography fitting and homographic patch refinement.

mod features;
mod homography;
mod hpft;

use std::fmt::Write as _;

use thiserror::Error;

use crate::raster::{to_gray, PixelCoord, Raster};

pub use features::{detect_keypoints, match_descriptors, DetectorConfig, Keypoint, DESCRIPTOR_SIDE};
pub use homography::{
    fit_homography, fit_homography_dlt, fit_homography_points, symmetric_transfer_error, Homography, RansacConfig,
};
pub use hpft::{hpft_refine, HpftConfig, PatchNode, PatchRect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegisterError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
}

/// One point correspondence between a source and a destination frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Match {
    pub src: PixelCoord,
    pub dst: PixelCoord,
    /// Leaf patch that verified this match, when refined.
    pub patch_id: Option<usize>,
    pub valid: bool,
}

impl Match {
    pub fn new(src: PixelCoord, dst: PixelCoord) -> Self {
        Self {
            src,
            dst,
            patch_id: None,
            valid: true,
        }
    }
}

pub type MatchSet = Vec<Match>;

pub fn count_valid(matches: &[Match]) -> usize {
    matches.iter().filter(|m| m.valid).count()
}

pub const HISTOGRAM_BINS: usize = 32;
const KL_EPSILON: f64 = 1e-6;

/// 32-bin intensity histogram over `[0, 256)`, additively smoothed and normalized.
pub fn gray_histogram(values: impl IntoIterator<Item = f64>) -> [f64; HISTOGRAM_BINS] {
    let mut hist = [0.0; HISTOGRAM_BINS];
    let mut n = 0usize;
    for v in values {
        let bin = ((v / 256.0 * HISTOGRAM_BINS as f64).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1) as usize;
        hist[bin] += 1.0;
        n += 1;
    }
    let total = n.max(1) as f64;
    let z = 1.0 + HISTOGRAM_BINS as f64 * KL_EPSILON;
    hist.iter_mut().for_each(|h| *h = (*h / total + KL_EPSILON) / z);
    hist
}

/// `0.5 * (KL(p||q) + KL(q||p))` in nats. Zero-probability bins contribute nothing.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    0.5 * (kl(p, q) + kl(q, p))
}

/// Histogram divergence between two equal-size patches.
pub fn kl_patch_similarity(a: &Raster, b: &Raster) -> f64 {
    assert_eq!(
        (a.width(), a.height()),
        (b.width(), b.height()),
        "patches must have equal size"
    );
    let (ga, gb) = (to_gray(a), to_gray(b));
    let p = gray_histogram(ga.data().iter().copied());
    let q = gray_histogram(gb.data().iter().copied());
    symmetric_kl(&p, &q)
}

/// Line-oriented dump: `src_x src_y dst_x dst_y valid`, one match per line.
pub fn format_matches(matches: &[Match]) -> String {
    let mut out = String::new();
    for m in matches {
        let _ = writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {}",
            m.src.x,
            m.src.y,
            m.dst.x,
            m.dst.y,
            u8::from(m.valid)
        );
    }
    out
}

/// Parses the format written by [`format_matches`].
pub fn parse_matches(text: &str) -> Result<MatchSet, String> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(format!("line {}: expected 5 fields, found {}", ln + 1, f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", ln + 1));
        let valid = match f[4] {
            "1" => true,
            "0" => false,
            other => return Err(format!("line {}: bad validity flag {other:?}", ln + 1)),
        };
        out.push(Match {
            src: PixelCoord::new(num(f[0])?, num(f[1])?),
            dst: PixelCoord::new(num(f[2])?, num(f[3])?),
            patch_id: None,
            valid,
        });
    }
    Ok(out)
}

/// Indented patch-tree dump: `depth x y w h accepted n_matches`.
pub fn format_patch_tree(roots: &[PatchNode]) -> String {
    fn walk(node: &PatchNode, depth: usize, out: &mut String) {
        let r = node.rect;
        let _ = writeln!(
            out,
            "{depth} {} {} {} {} {} {}",
            r.x,
            r.y,
            r.w,
            r.h,
            u8::from(node.accepted),
            node.match_count
        );
        for c in &node.children {
            walk(c, depth + 1, out);
        }
    }
    let mut out = String::new();
    for r in roots {
        walk(r, 0, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_patches_have_zero_divergence() {
        let p = Raster::from_fn_gray(16, 16, |x, y| ((x * 31 + y * 17) % 256) as f64);
        assert_eq!(kl_patch_similarity(&p, &p), 0.0);
    }

    #[test]
    fn two_bin_analytic_value() {
        let v = symmetric_kl(&[0.5, 0.5], &[0.25, 0.75]);
        let kl_pq = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let kl_qp = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((kl_pq - 0.14384).abs() < 1e-5 && (kl_qp - 0.13081).abs() < 1e-5);
        assert!((v - 0.13733).abs() < 1e-5);
    }

    #[test]
    fn smoothing_barely_moves_two_bin_case() {
        // histograms built from data, 2 occupied bins, compared with the pre-smoothing value
        let a: Vec<f64> = [5.0, 5.0, 200.0, 200.0].to_vec();
        let b: Vec<f64> = [5.0, 200.0, 200.0, 200.0].to_vec();
        let v = symmetric_kl(&gray_histogram(a), &gray_histogram(b));
        assert!((v - 0.13733).abs() < 1e-4);
    }

    #[test]
    fn brightness_shift_diverges() {
        let p = Raster::from_fn_gray(32, 32, |x, y| 20.0 + ((x * 7 + y * 3) % 100) as f64);
        let shifted = Raster::from_fn_gray(32, 32, |x, y| (p.get(x, y, 0) + 127.5).min(255.0));
        assert!(kl_patch_similarity(&p, &shifted) > 0.5);
    }

    #[test]
    fn match_dump_round_trip() {
        let m = vec![
            Match::new(PixelCoord::new(1.5, 2.25), PixelCoord::new(3.0, 4.0)),
            Match {
                valid: false,
                ..Match::new(PixelCoord::new(0.0, 0.0), PixelCoord::new(9.125, 7.5))
            },
        ];
        let text = format_matches(&m);
        assert_eq!(text.lines().next().unwrap(), "1.500000 2.250000 3.000000 4.000000 1");
        assert_eq!(parse_matches(&text).unwrap(), m);
        assert!(parse_matches("1 2 3").is_err());
    }
}
