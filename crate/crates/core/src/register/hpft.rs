//! Homographic patch refinement of an initial match set.
//!
//! The source image is tiled into root blocks. Each block is checked against
//! the homographic hypothesis (a local homography explains its matches and the
//! warped counterpart in the destination image has a similar intensity
//! distribution). Blocks that fail are split into quadrants until the minimum
//! size; matches in blocks that still fail are invalidated.

use serde::{Deserialize, Serialize};

use super::homography::{fit_homography_points, symmetric_transfer_error, Homography, RansacConfig};
use super::{gray_histogram, symmetric_kl, Match, MatchSet};
use crate::raster::{to_gray, PixelCoord, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpftConfig {
    pub root_size: usize,
    pub min_size: usize,
    /// Median symmetric transfer error bound for the hypothesis, pixels.
    pub median_tolerance: f64,
    /// Symmetric KL bound between a patch and its warped counterpart, nats.
    pub kl_threshold: f64,
    /// Matches farther than this from their leaf homography are invalidated.
    pub inlier_tolerance: f64,
    /// Minimum matches for a patch to fit its own homography; smaller patches
    /// inherit the parent's.
    pub min_fit_matches: usize,
    /// Below this fraction of warped pixels landing inside the destination the
    /// histogram check is skipped.
    pub min_overlap: f64,
    pub ransac: RansacConfig,
}

impl Default for HpftConfig {
    fn default() -> Self {
        Self {
            root_size: 64,
            min_size: 16,
            median_tolerance: 1.5,
            kl_threshold: 0.25,
            inlier_tolerance: 3.0,
            min_fit_matches: 8,
            min_overlap: 0.25,
            ransac: RansacConfig::default(),
        }
    }
}

/// Axis-aligned block `[x, x+w) x [y, y+h)` of the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PatchRect {
    pub fn contains(&self, p: PixelCoord) -> bool {
        p.x >= self.x as f64 && p.y >= self.y as f64 && p.x < (self.x + self.w) as f64 && p.y < (self.y + self.h) as f64
    }

    /// Quadrants tiling this rect exactly (left/top halves get the floor).
    pub fn quadrants(&self) -> [PatchRect; 4] {
        let (hw, hh) = (self.w / 2, self.h / 2);
        [
            PatchRect {
                x: self.x,
                y: self.y,
                w: hw,
                h: hh,
            },
            PatchRect {
                x: self.x + hw,
                y: self.y,
                w: self.w - hw,
                h: hh,
            },
            PatchRect {
                x: self.x,
                y: self.y + hh,
                w: hw,
                h: self.h - hh,
            },
            PatchRect {
                x: self.x + hw,
                y: self.y + hh,
                w: self.w - hw,
                h: self.h - hh,
            },
        ]
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchNode {
    pub rect: PatchRect,
    pub h: Homography,
    pub children: Vec<PatchNode>,
    pub accepted: bool,
    pub match_count: usize,
    /// Median transfer error of the contained matches under `h`.
    pub median_error: f64,
    pub kl: Option<f64>,
    /// Leaf index referenced by `Match::patch_id`; `None` for inner nodes.
    pub leaf_id: Option<usize>,
}

impl PatchNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn leaves(&self) -> Vec<&PatchNode> {
        if self.is_leaf() {
            vec![self]
        } else {
            self.children.iter().flat_map(|c| c.leaves()).collect()
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Histogram divergence between the source block and the destination sampled
/// through `h`. `None` when too little of the block lands inside `b`.
fn warped_patch_divergence(a: &Raster, b: &Raster, rect: PatchRect, h: &Homography, min_overlap: f64) -> Option<f64> {
    let mut va = Vec::with_capacity(rect.area());
    let mut vb = Vec::with_capacity(rect.area());
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            let q = h.apply(PixelCoord::new(x as f64, y as f64));
            if let Some(v) = b.sample_channel(q, 0) {
                va.push(a.get(x, y, 0));
                vb.push(v);
            }
        }
    }
    if (va.len() as f64) < min_overlap * rect.area() as f64 || va.is_empty() {
        return None;
    }
    Some(symmetric_kl(&gray_histogram(va), &gray_histogram(vb)))
}

struct Refiner<'a> {
    a: &'a Raster,
    b: &'a Raster,
    cfg: &'a HpftConfig,
    matches: MatchSet,
    next_leaf: usize,
}

impl Refiner<'_> {
    fn transfer_errors(&self, idx: &[usize], h: &Homography) -> Vec<f64> {
        let Some(hi) = h.inverse() else {
            return vec![f64::INFINITY; idx.len()];
        };
        idx.iter()
            .map(|&i| symmetric_transfer_error(h, &hi, self.matches[i].src, self.matches[i].dst))
            .collect()
    }

    fn hypothesis(&self, rect: PatchRect, idx: &[usize], h: &Homography) -> (Vec<f64>, f64, Option<f64>, bool) {
        let errors = self.transfer_errors(idx, h);
        let median_error = median(&mut errors.clone());
        let kl = warped_patch_divergence(self.a, self.b, rect, h, self.cfg.min_overlap);
        let holds = idx.is_empty()
            || (median_error < self.cfg.median_tolerance && kl.is_none_or(|d| d < self.cfg.kl_threshold));
        (errors, median_error, kl, holds)
    }

    fn process(&mut self, rect: PatchRect, idx: Vec<usize>, parent_h: Homography) -> PatchNode {
        // the inherited model is kept while it holds; a local fit only replaces it when it fails
        let mut h = parent_h;
        let (mut errors, mut median_error, mut kl, mut holds) = self.hypothesis(rect, &idx, &h);
        if !holds && idx.len() >= self.cfg.min_fit_matches {
            let (src, dst): (Vec<_>, Vec<_>) = idx.iter().map(|&i| (self.matches[i].src, self.matches[i].dst)).unzip();
            if let Ok(local) = fit_homography_points(&src, &dst, &self.cfg.ransac) {
                h = local;
                (errors, median_error, kl, holds) = self.hypothesis(rect, &idx, &h);
            }
        }

        let mut node = PatchNode {
            rect,
            h,
            children: Vec::new(),
            accepted: false,
            match_count: idx.len(),
            median_error,
            kl,
            leaf_id: None,
        };

        let can_split = rect.w / 2 >= self.cfg.min_size && rect.h / 2 >= self.cfg.min_size;
        if holds {
            node.accepted = true;
            let leaf = self.take_leaf_id();
            node.leaf_id = Some(leaf);
            for (&i, &e) in idx.iter().zip(&errors) {
                self.matches[i].patch_id = Some(leaf);
                if e > self.cfg.inlier_tolerance {
                    self.matches[i].valid = false;
                }
            }
        } else if can_split {
            for q in rect.quadrants() {
                let sub: Vec<usize> = idx
                    .iter()
                    .copied()
                    .filter(|&i| q.contains(self.matches[i].src))
                    .collect();
                // a fit that just failed the hypothesis is no better than the one it replaced
                node.children.push(self.process(q, sub, parent_h));
            }
        } else {
            let leaf = self.take_leaf_id();
            node.leaf_id = Some(leaf);
            for &i in &idx {
                self.matches[i].patch_id = Some(leaf);
                self.matches[i].valid = false;
            }
        }
        node
    }

    fn take_leaf_id(&mut self) -> usize {
        let id = self.next_leaf;
        self.next_leaf += 1;
        id
    }
}

/// Refines `init` between source `img_a` and destination `img_b`. Returns the
/// match set with updated validity and leaf ids, plus the patch forest.
pub fn hpft_refine(img_a: &Raster, img_b: &Raster, init: &[Match], cfg: &HpftConfig) -> (MatchSet, Vec<PatchNode>) {
    let a = to_gray(img_a);
    let b = to_gray(img_b);
    let mut refiner = Refiner {
        a: &a,
        b: &b,
        cfg,
        matches: init.to_vec(),
        next_leaf: 0,
    };
    let valid: Vec<usize> = (0..init.len()).filter(|&i| init[i].valid).collect();
    if valid.is_empty() {
        return (refiner.matches, Vec::new());
    }
    let (src, dst): (Vec<_>, Vec<_>) = valid.iter().map(|&i| (init[i].src, init[i].dst)).unzip();
    let global = fit_homography_points(&src, &dst, &cfg.ransac).unwrap_or_default();

    let root = cfg.root_size.max(1);
    let mut roots = Vec::new();
    for gy in 0..a.height().div_ceil(root) {
        for gx in 0..a.width().div_ceil(root) {
            let rect = PatchRect {
                x: gx * root,
                y: gy * root,
                w: root.min(a.width() - gx * root),
                h: root.min(a.height() - gy * root),
            };
            let idx: Vec<usize> = valid.iter().copied().filter(|&i| rect.contains(init[i].src)).collect();
            if idx.is_empty() {
                continue;
            }
            roots.push(refiner.process(rect, idx, global));
        }
    }
    // valid matches outside the source image cannot be verified
    for &i in &valid {
        if refiner.matches[i].patch_id.is_none() {
            refiner.matches[i].valid = false;
        }
    }
    (refiner.matches, roots)
}
