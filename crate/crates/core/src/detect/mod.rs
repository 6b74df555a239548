//! Single-class anchor detector trained with confidence-ranked negative
//! selection.

mod net;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{load_image, Raster, RasterError};

pub use net::{HeadOutput, TinyDetector, NET_STRIDE};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("no positive or selected negative anchors")]
    EmptyTrainingSet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Annotation { path: String, reason: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model format: {0}")]
    Format(#[from] serde_json::Error),
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorConfig {
    /// Anchor side for aspect 1, in pixels.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspects: Vec<f64>,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![16.0, 26.0],
            aspects: vec![1.0],
            stride: NET_STRIDE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index each anchor was compared best against.
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.labels[i] == AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.labels[i] == AnchorLabel::Negative)
    }
}

/// Cells at `((i + 0.5) * stride, (j + 0.5) * stride)`, row-major; within a
/// cell, scales outer and aspects inner. Boxes are clipped to the image.
pub fn make_anchors(width: usize, height: usize, cfg: &AnchorConfig) -> AnchorSet {
    let s = cfg.stride as f64;
    let (cols, rows) = (width.div_ceil(cfg.stride), height.div_ceil(cfg.stride));
    let mut boxes = Vec::with_capacity(cols * rows * cfg.scales.len() * cfg.aspects.len());
    for j in 0..rows {
        for i in 0..cols {
            let (cx, cy) = ((i as f64 + 0.5) * s, (j as f64 + 0.5) * s);
            for &scale in &cfg.scales {
                for &aspect in &cfg.aspects {
                    let r = aspect.sqrt();
                    boxes.push(BBox::from_center(cx, cy, scale * r, scale / r).clip(width as f64, height as f64));
                }
            }
        }
    }
    let n = boxes.len();
    AnchorSet {
        boxes,
        labels: vec![AnchorLabel::Negative; n],
        matched: vec![None; n],
        max_iou: vec![0.0; n],
    }
}

/// Positive above `pos_iou`, negative below `neg_iou`, ignored in between;
/// the best anchor of every ground truth is forced positive.
pub fn match_anchors(anchors: &AnchorSet, gts: &[BBox], pos_iou: f64, neg_iou: f64) -> AnchorSet {
    let mut out = anchors.clone();
    let n = out.len();
    let mut best_for_gt = vec![(0usize, f64::NEG_INFINITY); gts.len()];
    for i in 0..n {
        let mut best = (None, 0.0);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&out.boxes[i], gt);
            if best.0.is_none() || v > best.1 {
                best = (Some(g), v);
            }
            if v > best_for_gt[g].1 {
                best_for_gt[g] = (i, v);
            }
        }
        out.matched[i] = best.0;
        out.max_iou[i] = best.1;
        out.labels[i] = if best.1 > pos_iou {
            AnchorLabel::Positive
        } else if best.1 < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
    }
    for (g, &(i, v)) in best_for_gt.iter().enumerate() {
        if v > 0.0 {
            out.labels[i] = AnchorLabel::Positive;
            out.matched[i] = Some(g);
            out.max_iou[i] = v;
        }
    }
    out
}

/// Keeps the `ratio * max(n_pos, 1)` most confident negatives; ties go to
/// the lower anchor index. An infinite ratio keeps everything.
pub fn selective_negatives(negatives: &[(usize, f64)], n_pos: usize, ratio: f64) -> Vec<usize> {
    assert!(ratio > 0.0, "ratio must be positive");
    let quota = ratio * n_pos.max(1) as f64;
    let keep = if quota >= negatives.len() as f64 {
        negatives.len()
    } else {
        quota.floor() as usize
    };
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(keep).map(|(i, _)| i).collect()
}

pub const BCE_EPS: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Scales of the center and log-size targets, so typical offsets are O(1).
pub const BOX_VARIANCE: [f64; 2] = [0.1, 0.2];

/// Regression target of `gt` relative to `anchor`.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let [vc, vs] = BOX_VARIANCE;
    [
        (gcx - acx) / aw / vc,
        (gcy - acy) / ah / vc,
        (gt.width() / aw).ln() / vs,
        (gt.height() / ah).ln() / vs,
    ]
}

pub fn decode(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    // clamp the log-size deltas so a wild output cannot overflow
    let [vc, vs] = BOX_VARIANCE;
    BBox::from_center(
        acx + d[0] * vc * aw,
        acy + d[1] * vc * ah,
        aw * (d[2] * vs).clamp(-6.0, 6.0).exp(),
        ah * (d[3] * vs).clamp(-6.0, 6.0).exp(),
    )
}

/// Loss value with its gradient w.r.t. the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub dlogits: Vec<f64>,
    pub doffsets: Vec<[f64; 4]>,
}

/// Mean clamped binary cross-entropy over positives and the selected
/// negatives plus `lambda` times the mean smooth-L1 box error of positives.
/// Terms are accumulated in anchor order, so the result does not depend on
/// the order of `selected_negatives`.
pub fn detector_loss(
    out: &HeadOutput,
    anchors: &AnchorSet,
    gts: &[BBox],
    selected_negatives: &[usize],
    lambda: f64,
) -> Result<LossGrad, DetectError> {
    let n = anchors.len();
    assert_eq!(out.logits.len(), n, "head output does not match the anchor set");
    let mut in_set = vec![false; n];
    for i in anchors.positives() {
        in_set[i] = true;
    }
    for &i in selected_negatives {
        in_set[i] = true;
    }
    let n_cls = in_set.iter().filter(|b| **b).count();
    if n_cls == 0 {
        return Err(DetectError::EmptyTrainingSet);
    }
    let n_pos = anchors.positives().count();
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut dlogits = vec![0.0; n];
    let mut doffsets = vec![[0.0; 4]; n];
    for i in 0..n {
        if !in_set[i] {
            continue;
        }
        let positive = anchors.labels[i] == AnchorLabel::Positive;
        let y = if positive { 1.0 } else { 0.0 };
        let raw = sigmoid(out.logits[i]);
        let p = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        cls += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        if p == raw {
            dlogits[i] = (p - y) / n_cls as f64;
        }
        if positive {
            let gt = &gts[anchors.matched[i].expect("positive anchors have a match")];
            let t = encode(&anchors.boxes[i], gt);
            for k in 0..4 {
                let (v, d) = smooth_l1(out.offsets[i][k] - t[k]);
                reg += v;
                doffsets[i][k] = lambda * d / n_pos as f64;
            }
        }
    }
    let classification = cls / n_cls as f64;
    let regression = if n_pos > 0 { reg / n_pos as f64 } else { 0.0 };
    Ok(LossGrad {
        loss: classification + lambda * regression,
        classification,
        regression,
        dlogits,
        doffsets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Negatives kept per positive; `f64::INFINITY` trains on every negative.
    pub neg_ratio: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub lambda: f64,
    /// Global gradient-norm clip; non-positive disables it.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 7,
            neg_ratio: 3.0,
            pos_iou: 0.5,
            neg_iou: 0.4,
            lambda: 1.0,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.neg_ratio > 0.0) {
            return bad("neg_ratio must be positive");
        }
        if !(0.0..=1.0).contains(&self.neg_iou) || !(0.0..=1.0).contains(&self.pos_iou) || self.neg_iou > self.pos_iou {
            return bad("IOU thresholds must satisfy 0 <= neg_iou <= pos_iou <= 1");
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be >= 0 and momentum in [0, 1)");
        }
        Ok(())
    }
}

/// One training image with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Raster,
    pub boxes: Vec<BBox>,
}

/// Loss and parameter gradient for one image.
pub fn image_loss_grad(
    model: &TinyDetector,
    sample: &Sample,
    matched: &AnchorSet,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>), DetectError> {
    let (out, cache) = model.forward_cached(&sample.image);
    let negs: Vec<(usize, f64)> = matched.negatives().map(|i| (i, sigmoid(out.logits[i]))).collect();
    let n_pos = matched.positives().count();
    let selected = selective_negatives(&negs, n_pos, cfg.neg_ratio);
    let lg = detector_loss(&out, matched, &sample.boxes, &selected, cfg.lambda)?;
    let grad = model.backward(&cache, &lg.dlogits, &lg.doffsets);
    Ok((lg.loss, grad))
}

/// Minibatch SGD with momentum. Returns the mean batch loss of every step.
pub fn train(model: &mut TinyDetector, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<f64>, DetectError> {
    if data.is_empty() {
        return Err(DetectError::EmptyDataset);
    }
    cfg.validate()?;
    let matched: Vec<AnchorSet> = data
        .iter()
        .map(|s| {
            let a = make_anchors(s.image.width(), s.image.height(), &model.anchors);
            match_anchors(&a, &s.boxes, cfg.pos_iou, cfg.neg_iou)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut velocity = vec![0.0; model.params.len()];
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<Result<(f64, Vec<f64>), DetectError>> = batch
            .par_iter()
            .map(|&i| image_loss_grad(model, &data[i], &matched[i], cfg))
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; model.params.len()];
        for r in results {
            let (l, g) = r?;
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        if cfg.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *p += *v;
        }
        curve.push(loss * scale);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

/// Greedy suppression, highest confidence first, ties by input order.
pub fn nms(candidates: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .confidence
            .total_cmp(&candidates[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let c = candidates[i];
        if kept.iter().all(|k| iou(&k.bbox, &c.bbox) <= nms_iou) {
            kept.push(c);
        }
    }
    kept
}

pub fn infer(model: &TinyDetector, img: &Raster, conf_thresh: f64, nms_iou: f64) -> Vec<Detection> {
    let out = model.forward(img);
    let anchors = make_anchors(img.width(), img.height(), &model.anchors);
    let (w, h) = (img.width() as f64, img.height() as f64);
    let candidates: Vec<Detection> = (0..anchors.len())
        .filter_map(|i| {
            let confidence = sigmoid(out.logits[i]);
            if confidence <= conf_thresh {
                return None;
            }
            let bbox = decode(&anchors.boxes[i], &out.offsets[i]).clip(w, h);
            bbox.is_valid().then_some(Detection { bbox, confidence })
        })
        .collect();
    nms(&candidates, nms_iou)
}

pub fn model_to_json(model: &TinyDetector) -> String {
    serde_json::to_string_pretty(model).expect("model is serializable")
}

pub fn model_from_json(text: &str) -> Result<TinyDetector, DetectError> {
    let m: TinyDetector = serde_json::from_str(text)?;
    if m.params.len() != m.param_count() {
        return Err(DetectError::Config(format!(
            "expected {} parameters, found {}",
            m.param_count(),
            m.params.len()
        )));
    }
    if m.anchors.stride != NET_STRIDE {
        return Err(DetectError::Config(format!("anchor stride must be {NET_STRIDE}")));
    }
    Ok(m)
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    serde_json::to_string_pretty(dets).expect("detections are serializable")
}

pub fn detections_from_json(text: &str) -> Result<Vec<Detection>, DetectError> {
    Ok(serde_json::from_str(text)?)
}

/// One box per line: `x_min y_min x_max y_max`.
pub fn format_annotations(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{:.3} {:.3} {:.3} {:.3}\n", b.x_min, b.y_min, b.x_max, b.y_max))
        .collect()
}

pub fn parse_annotations(text: &str) -> Result<Vec<BBox>, String> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| format!("line {}: {e}", ln + 1)))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 {
            return Err(format!("line {}: expected 4 numbers, found {}", ln + 1, v.len()));
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]);
        if !b.is_valid() {
            return Err(format!("line {}: degenerate box", ln + 1));
        }
        out.push(b);
    }
    Ok(out)
}

/// Reads every `NAME.png` with its `NAME.txt` annotation, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Sample)>, DetectError> {
    let io = |source| DetectError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let image = load_image(dir.join(format!("{name}.png")))?;
        let ann = dir.join(format!("{name}.txt"));
        let text = fs::read_to_string(&ann).map_err(|source| DetectError::Io {
            path: ann.display().to_string(),
            source,
        })?;
        let boxes = parse_annotations(&text).map_err(|reason| DetectError::Annotation {
            path: ann.display().to_string(),
            reason,
        })?;
        out.push((name, Sample { image, boxes }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn pixel_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
        let (x0, y0) = (a.x_min.min(b.x_min), a.y_min.min(b.y_min));
        let (x1, y1) = (a.x_max.max(b.x_max), a.y_max.max(b.y_max));
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max;
        let (mut i, mut u) = (0usize, 0usize);
        let mut y = y0 + 0.5 * step;
        while y < y1 {
            let mut x = x0 + 0.5 * step;
            while x < x1 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                i += usize::from(ia && ib);
                u += usize::from(ia || ib);
                x += step;
            }
            y += step;
        }
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 30.0, 10.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
        assert!((pixel_iou(&a, &b, 0.05) - 1.0 / 3.0).abs() < 1e-3);
    }

    /// Boxes with corners on a 1/8 px lattice, counted cell by cell.
    fn lattice_pair(rng: &mut ChaCha8Rng) -> (BBox, BBox) {
        let mut rb = || {
            let (x, y) = (rng.random_range(0..160), rng.random_range(0..160));
            let (w, h) = (rng.random_range(8..120), rng.random_range(8..120));
            BBox::new(
                x as f64 / 8.0,
                y as f64 / 8.0,
                (x + w) as f64 / 8.0,
                (y + h) as f64 / 8.0,
            )
        };
        (rb(), rb())
    }

    #[test]
    fn iou_against_pixel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let (a, b) = lattice_pair(&mut rng);
            let v = iou(&a, &b);
            assert!((v - iou(&b, &a)).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&v));
            assert!((v - pixel_iou(&a, &b, 0.125)).abs() < 1e-3, "{a:?} {b:?}");
        }
    }

    #[test]
    fn anchor_examples() {
        let one = make_anchors(
            32,
            32,
            &AnchorConfig {
                scales: vec![16.0],
                aspects: vec![1.0],
                stride: 32,
            },
        );
        assert_eq!(one.boxes, vec![BBox::new(8.0, 8.0, 24.0, 24.0)]);
        let cfg = AnchorConfig {
            scales: vec![16.0, 24.0],
            aspects: vec![1.0, 2.0],
            stride: 32,
        };
        let many = make_anchors(64, 64, &cfg);
        assert_eq!(many.len(), 16);
        assert_eq!(many, make_anchors(64, 64, &cfg));
        assert!(many.boxes.iter().all(|b| b.x_min >= 0.0 && b.y_max <= 64.0));
    }

    #[test]
    fn matching_rules() {
        let cfg = AnchorConfig {
            scales: vec![16.0],
            aspects: vec![1.0],
            stride: 16,
        };
        let a = make_anchors(64, 64, &cfg);
        let m = match_anchors(&a, &[a.boxes[5]], 0.5, 0.4);
        assert_eq!(m.labels[5], AnchorLabel::Positive);
        assert_eq!(m.max_iou[5], 1.0);
        assert_eq!(m.positives().count(), 1);

        let none = match_anchors(&a, &[], 0.5, 0.4);
        assert!(none.labels.iter().all(|l| *l == AnchorLabel::Negative));

        // a gt overlapping anchor 0 by 0.45 and nothing else by more
        let base = a.boxes[0];
        let w = base.width();
        // shift right by s: iou = (w - s) / (w + s) = 0.45
        let s = w * (1.0 - 0.45) / 1.45;
        let gt = BBox::new(base.x_min + s, base.y_min, base.x_max + s, base.y_max);
        let m = match_anchors(&a, &[gt], 0.5, 0.4);
        let ious: Vec<f64> = a.boxes.iter().map(|b| iou(b, &gt)).collect();
        let best = (0..a.len())
            .max_by(|&i, &j| ious[i].total_cmp(&ious[j]).then(j.cmp(&i)))
            .unwrap();
        assert!((ious[best] - 0.45).abs() < 1e-9);
        assert_eq!(m.positives().collect::<Vec<_>>(), vec![best]);
        for i in 0..a.len() {
            if i == best {
                continue;
            }
            let expect = if ious[i] < 0.4 {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            };
            assert_eq!(m.labels[i], expect);
        }
    }

    #[test]
    fn selective_examples() {
        let negs = [(0, 0.9), (1, 0.1), (2, 0.8), (3, 0.2)];
        assert_eq!(selective_negatives(&negs, 0, 2.0), vec![0, 2]);
        assert_eq!(selective_negatives(&negs, 5, 3.0).len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let many: Vec<(usize, f64)> = (0..100).map(|i| (i, rng.random::<f64>())).collect();
        let kept = selective_negatives(&many, 2, 3.0);
        assert_eq!(kept.len(), 6);
        let mut all = many.clone();
        all.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top: Vec<usize> = all[..6].iter().map(|x| x.0).collect();
        assert_eq!(kept, top);
        assert_eq!(selective_negatives(&[(3, 0.5), (1, 0.5)], 1, 1.0), vec![1]);
        assert_eq!(selective_negatives(&many, 1, f64::INFINITY).len(), 100);
    }

    fn small_model() -> TinyDetector {
        TinyDetector::new(
            [8, 16, 32],
            AnchorConfig {
                scales: vec![8.0, 12.0],
                aspects: vec![1.0],
                stride: NET_STRIDE,
            },
            3,
        )
    }

    #[test]
    fn loss_optimum_and_uniform_cases() {
        let cfg = AnchorConfig {
            scales: vec![8.0],
            aspects: vec![1.0],
            stride: NET_STRIDE,
        };
        let a = make_anchors(16, 16, &cfg);
        let gt = BBox::new(1.0, 1.0, 9.0, 9.5);
        let m = match_anchors(&a, &[gt], 0.5, 0.4);
        let negs: Vec<usize> = m.negatives().collect();
        let mut out = HeadOutput {
            grid: (2, 2),
            logits: vec![0.0; 4],
            offsets: vec![[0.0; 4]; 4],
        };
        for i in 0..4 {
            if m.labels[i] == AnchorLabel::Positive {
                out.logits[i] = 40.0;
                out.offsets[i] = encode(&a.boxes[i], &gt);
            } else {
                out.logits[i] = -40.0;
            }
        }
        let lg = detector_loss(&out, &m, &[gt], &negs, 1.0).unwrap();
        assert!(lg.loss < 2.0 * BCE_EPS, "{}", lg.loss);

        let none = match_anchors(&a, &[], 0.5, 0.4);
        let flat = HeadOutput {
            grid: (2, 2),
            logits: vec![0.0; 4],
            offsets: vec![[0.0; 4]; 4],
        };
        let lg = detector_loss(&flat, &none, &[], &[0, 2, 3], 1.0).unwrap();
        assert!((lg.classification - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            detector_loss(&flat, &none, &[], &[], 1.0),
            Err(DetectError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn infinite_ratio_equals_plain_loss() {
        let m = small_model();
        let img = Raster::from_fn_gray(32, 24, |x, y| ((x * 13 + y * 7) % 200) as f64);
        let gt = BBox::new(4.0, 5.0, 14.0, 15.0);
        let a = match_anchors(&make_anchors(32, 24, &m.anchors), &[gt], 0.5, 0.4);
        let out = m.forward(&img);
        let negs: Vec<(usize, f64)> = a.negatives().map(|i| (i, sigmoid(out.logits[i]))).collect();
        let selected = selective_negatives(&negs, a.positives().count(), f64::INFINITY);
        let plain: Vec<usize> = a.negatives().collect();
        let x = detector_loss(&out, &a, &[gt], &selected, 1.0).unwrap();
        let y = detector_loss(&out, &a, &[gt], &plain, 1.0).unwrap();
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        assert_eq!(x.dlogits, y.dlogits);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = small_model();
        // keep biases off zero so no ReLU sits exactly on its kink
        for (i, p) in m.params.iter_mut().enumerate() {
            *p += 0.01 * ((i as f64) * 0.7).sin();
        }
        let img = Raster::from_fn_gray(16, 16, |x, y| {
            128.0 + 100.0 * ((x as f64 * 0.9).sin() * (y as f64 * 0.6 + 0.3).cos())
        });
        let gt = BBox::new(2.0, 3.0, 11.0, 12.0);
        let a = match_anchors(&make_anchors(16, 16, &m.anchors), &[gt], 0.5, 0.4);
        let out = m.forward(&img);
        let negs: Vec<(usize, f64)> = a.negatives().map(|i| (i, sigmoid(out.logits[i]))).collect();
        let selected = selective_negatives(&negs, a.positives().count(), 3.0);
        let (out, cache) = m.forward_cached(&img);
        let lg = detector_loss(&out, &a, &[gt], &selected, 1.0).unwrap();
        let grad = m.backward(&cache, &lg.dlogits, &lg.doffsets);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..m.params.len() {
            let base = m.params[k];
            let mut eval = |v: f64| {
                m.params[k] = v;
                detector_loss(&m.forward(&img), &a, &[gt], &selected, 1.0).unwrap().loss
            };
            let fd = (eval(base + h) - eval(base - h)) / (2.0 * h);
            m.params[k] = base;
            let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    fn blob_sample(cx: f64, cy: f64, r: f64) -> Sample {
        let image = Raster::from_fn_gray(48, 32, |x, y| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            60.0 + 150.0 / (1.0 + ((d - r) * 1.5).exp())
        });
        Sample {
            image,
            boxes: vec![BBox::new(cx - r, cy - r, cx + r, cy + r)],
        }
    }

    #[test]
    fn overfits_one_image() {
        let mut m = small_model();
        let data = [blob_sample(20.0, 14.0, 6.0)];
        let cfg = TrainConfig {
            steps: 500,
            batch_size: 1,
            learning_rate: 0.01,
            ..Default::default()
        };
        let curve = train(&mut m, &data, &cfg).unwrap();
        assert!(
            curve[curve.len() - 1] < 0.1 * curve[0],
            "{} -> {}",
            curve[0],
            curve[curve.len() - 1]
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = small_model();
        let before = m.params.clone();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 1,
            learning_rate: 0.0,
            ..Default::default()
        };
        train(&mut m, &[blob_sample(20.0, 14.0, 6.0)], &cfg).unwrap();
        assert!(m.params.iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn training_is_deterministic() {
        let data = [blob_sample(20.0, 14.0, 6.0), blob_sample(30.0, 12.0, 5.0)];
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 2,
            ..Default::default()
        };
        let (mut a, mut b) = (small_model(), small_model());
        assert_eq!(train(&mut a, &data, &cfg).unwrap(), train(&mut b, &data, &cfg).unwrap());
        assert_eq!(a, b);
        assert!(matches!(train(&mut a, &[], &cfg), Err(DetectError::EmptyDataset)));
    }

    #[test]
    fn nms_and_threshold() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(
            &[
                Detection {
                    bbox: b,
                    confidence: 0.8,
                },
                Detection {
                    bbox: b,
                    confidence: 0.9,
                },
            ],
            0.45,
        );
        assert_eq!(
            kept,
            vec![Detection {
                bbox: b,
                confidence: 0.9
            }]
        );
        let m = small_model();
        let img = Raster::filled(32, 32, 1, 100.0);
        assert!(infer(&m, &img, 1.0, 0.45).is_empty());
        let dets = infer(&m, &img, 0.0, 0.45);
        for (i, x) in dets.iter().enumerate() {
            for y in &dets[i + 1..] {
                assert!(iou(&x.bbox, &y.bbox) <= 0.45);
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let a = BBox::new(4.0, 4.0, 20.0, 20.0);
        let g = BBox::new(6.5, 3.0, 19.0, 25.0);
        let d = decode(&a, &encode(&a, &g));
        for (x, y) in [
            (d.x_min, g.x_min),
            (d.y_min, g.y_min),
            (d.x_max, g.x_max),
            (d.y_max, g.y_max),
        ] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn serialization_round_trips() {
        let m = small_model();
        assert_eq!(model_from_json(&model_to_json(&m)).unwrap(), m);
        let d = vec![Detection {
            bbox: BBox::new(1.0, 2.0, 3.5, 4.25),
            confidence: 0.75,
        }];
        let text = detections_to_json(&d);
        assert!(text.contains("\"box\""));
        assert_eq!(detections_from_json(&text).unwrap(), d);
        let boxes = vec![BBox::new(1.0, 2.0, 3.0, 4.0)];
        assert_eq!(parse_annotations(&format_annotations(&boxes)).unwrap(), boxes);
        assert!(parse_annotations("1 2 3").is_err());
    }
}
