//! Flat `section.key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;

use thiserror::Error;

use crate::calib::DistortionModel;
use crate::chain::ChainConfig;
use crate::detect::{AnchorConfig, TrainConfig};
use crate::fusion::{CompositeConfig, FusionConfig, WeightMode};
use crate::register::{DetectorConfig, HpftConfig};
use crate::synth::{DatasetSpec, SceneSpec, SpotSpec, TextureKind};
use crate::unfold::DoubleCube;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub calib: DistortionModel,
    pub max_keypoints: usize,
    pub ratio: f64,
    pub features: DetectorConfig,
    pub hpft: HpftConfig,
    pub chain: ChainConfig,
    pub beta: f64,
    pub composite: CompositeConfig,
    pub fusion: FusionConfig,
    pub geometry: DoubleCube,
    pub face_px: usize,
    pub channels: [usize; 3],
    pub anchors: AnchorConfig,
    pub train: TrainConfig,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub scene: SceneSpec,
    pub frames: usize,
    pub path_radius: f64,
    pub path_height: f64,
    pub dataset: DatasetSpec,
    pub fb_thresholds: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            seed: 7,
            calib: scene.intrinsics,
            max_keypoints: 200,
            ratio: 0.8,
            features: DetectorConfig::default(),
            hpft: HpftConfig::default(),
            chain: ChainConfig::default(),
            beta: 1.0,
            composite: CompositeConfig::default(),
            fusion: FusionConfig::default(),
            geometry: DoubleCube::default(),
            face_px: 64,
            channels: [8, 16, 32],
            anchors: AnchorConfig::default(),
            train: TrainConfig::default(),
            conf_threshold: 0.5,
            nms_iou: 0.3,
            frames: scene.camera_path.len(),
            path_radius: 0.1,
            path_height: -0.2,
            scene,
            dataset: DatasetSpec::default(),
            fb_thresholds: vec![0.5, 1.0, 2.0, 3.0, 5.0, 10.0],
        }
    }
}

/// `(key, kind, description)`; kind is `fixed` for values that define the
/// method and `tunable` for everything else.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "tunable", "root seed; stage seeds are derived from it"),
    ("calib.fx", "tunable", "focal length x, px"),
    ("calib.fy", "tunable", "focal length y, px"),
    ("calib.cx", "tunable", "principal point x, px"),
    ("calib.cy", "tunable", "principal point y, px"),
    ("calib.k1", "tunable", "radial coefficient r^2"),
    ("calib.k2", "tunable", "radial coefficient r^4"),
    ("register.max_keypoints", "tunable", "corners kept per frame"),
    ("register.ratio", "tunable", "nearest/second-nearest distance ratio"),
    ("register.harris_k", "tunable", "Harris trace weight"),
    ("register.nms_radius", "tunable", "corner suppression radius, px"),
    (
        "register.relative_threshold",
        "tunable",
        "corner response floor relative to the maximum",
    ),
    (
        "register.descriptor_sigma",
        "tunable",
        "blur before sampling descriptor patches",
    ),
    (
        "register.refine_radius",
        "tunable",
        "half-width of the sub-pixel corner window",
    ),
    ("register.ransac_iterations", "tunable", "RANSAC hypotheses"),
    ("register.ransac_threshold", "tunable", "RANSAC inlier bound, px"),
    ("hpft.root_size", "tunable", "initial patch side, px"),
    ("hpft.min_size", "tunable", "smallest patch side, px"),
    (
        "hpft.median_tolerance",
        "tunable",
        "median transfer error accepted by the patch hypothesis, px",
    ),
    (
        "hpft.kl_threshold",
        "tunable",
        "symmetric KL bound between warped patches, nats",
    ),
    (
        "hpft.inlier_tolerance",
        "tunable",
        "per-match bound against the leaf homography, px",
    ),
    (
        "hpft.min_fit_matches",
        "tunable",
        "matches needed for a patch to fit its own homography",
    ),
    ("chain.loop_tolerance", "tunable", "closed-loop residual target"),
    ("chain.min_matches", "tunable", "matches a link must keep"),
    (
        "chain.candidate_min_error",
        "tunable",
        "matches closer than this to the robust link estimate are kept, px",
    ),
    ("fusion.beta", "tunable", "regularizer weight on the placement change"),
    ("fusion.weight_mode", "tunable", "seam weights: uniform | feather"),
    (
        "fusion.feather_px",
        "tunable",
        "distance at which feathered weights reach 1, px",
    ),
    ("fusion.seam_band", "tunable", "seam dilation, px"),
    ("fusion.max_rounds", "tunable", "alternation rounds"),
    ("fusion.tol", "tunable", "relative loss decrease that ends the rounds"),
    ("fusion.initial_damping", "tunable", "starting Marquardt damping"),
    ("unfold.edge_a", "tunable", "edge of cube A"),
    ("unfold.edge_b", "tunable", "edge of cube B"),
    ("unfold.offset", "tunable", "center distance of cube B above cube A"),
    ("unfold.face_px", "tunable", "atlas tile side, px"),
    (
        "detect.channels",
        "tunable",
        "backbone widths, three comma-separated values",
    ),
    ("detect.scales", "tunable", "anchor sides, px"),
    ("detect.aspects", "tunable", "anchor width/height ratios"),
    ("detect.steps", "tunable", "SGD steps"),
    ("detect.batch_size", "tunable", "images per step"),
    ("detect.learning_rate", "tunable", "SGD step size"),
    ("detect.momentum", "tunable", "SGD momentum"),
    (
        "detect.neg_ratio",
        "tunable",
        "kept negatives per positive; inf keeps all",
    ),
    ("detect.pos_iou", "fixed", "IOU above which an anchor is positive"),
    ("detect.neg_iou", "tunable", "IOU below which an anchor is negative"),
    ("detect.lambda", "tunable", "box regression weight"),
    ("detect.clip_norm", "tunable", "gradient norm clip; 0 disables"),
    ("detect.conf_threshold", "tunable", "minimum confidence at inference"),
    ("detect.nms_iou", "tunable", "suppression overlap at inference"),
    ("synth.frames", "tunable", "poses on the circular camera path"),
    ("synth.path_radius", "tunable", "camera circle radius"),
    ("synth.path_height", "tunable", "camera height"),
    ("synth.width", "tunable", "frame width, px"),
    ("synth.height", "tunable", "frame height, px"),
    (
        "synth.noise_sigma",
        "fixed",
        "noise std as a fraction of 255; useful range 0.01 to 0.5",
    ),
    ("synth.spots", "tunable", "specular spots per frame"),
    ("synth.spot_min_radius", "tunable", "smallest spot radius, px"),
    ("synth.spot_max_radius", "tunable", "largest spot radius, px"),
    ("synth.supersample", "tunable", "samples per pixel side"),
    ("synth.texture", "tunable", "mottled | checker:N"),
    ("synth.texture_contrast", "tunable", "texture amplitude"),
    ("synth.texture_scale", "tunable", "world units per noise cell"),
    ("dataset.scenes", "tunable", "panoramas before augmentation"),
    ("dataset.train_fraction", "tunable", "share of panoramas in train/"),
    ("dataset.augment_sigmas", "tunable", "blur scales; 0 is the original"),
    ("dataset.width", "tunable", "panorama width, px"),
    ("dataset.height", "tunable", "panorama height, px"),
    ("eval.fb_thresholds", "tunable", "forward-backward error thresholds, px"),
];

fn list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(",")
}

fn fmt_f(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x}")
    }
}

fn parse_f(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_nan() {
        return Err("NaN is not allowed".into());
    }
    Ok(v)
}

fn parse_u(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| parse_f(p.trim())).collect()
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set_at(i + 1, k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let wrap = |reason: String| ConfigError::Value {
            line,
            key: key.to_string(),
            reason,
        };
        let f = || parse_f(value).map_err(wrap);
        let u = || parse_u(value).map_err(wrap);
        match key {
            "seed" => self.seed = value.parse().map_err(|_| wrap(format!("`{value}` is not a seed")))?,
            "calib.fx" => self.calib.fx = f()?,
            "calib.fy" => self.calib.fy = f()?,
            "calib.cx" => self.calib.cx = f()?,
            "calib.cy" => self.calib.cy = f()?,
            "calib.k1" => self.calib.k1 = f()?,
            "calib.k2" => self.calib.k2 = f()?,
            "register.max_keypoints" => self.max_keypoints = u()?,
            "register.ratio" => self.ratio = f()?,
            "register.harris_k" => self.features.harris_k = f()?,
            "register.nms_radius" => self.features.nms_radius = u()?,
            "register.relative_threshold" => self.features.relative_threshold = f()?,
            "register.descriptor_sigma" => self.features.descriptor_sigma = f()?,
            "register.refine_radius" => self.features.refine_radius = u()?,
            "register.ransac_iterations" => {
                self.hpft.ransac.iterations = u()?;
                self.chain.ransac.iterations = self.hpft.ransac.iterations;
            }
            "register.ransac_threshold" => {
                self.hpft.ransac.inlier_threshold = f()?;
                self.chain.ransac.inlier_threshold = self.hpft.ransac.inlier_threshold;
            }
            "hpft.root_size" => self.hpft.root_size = u()?,
            "hpft.min_size" => self.hpft.min_size = u()?,
            "hpft.median_tolerance" => self.hpft.median_tolerance = f()?,
            "hpft.kl_threshold" => self.hpft.kl_threshold = f()?,
            "hpft.inlier_tolerance" => self.hpft.inlier_tolerance = f()?,
            "hpft.min_fit_matches" => self.hpft.min_fit_matches = u()?,
            "chain.loop_tolerance" => self.chain.loop_tolerance = f()?,
            "chain.min_matches" => self.chain.min_matches = u()?,
            "chain.candidate_min_error" => self.chain.candidate_min_error = f()?,
            "fusion.beta" => self.beta = f()?,
            "fusion.weight_mode" => {
                self.composite.weight_mode = match value {
                    "uniform" => WeightMode::Uniform,
                    "feather" => WeightMode::Feather,
                    _ => return Err(wrap("expected uniform or feather".into())),
                }
            }
            "fusion.feather_px" => self.composite.feather_px = f()?,
            "fusion.seam_band" => self.composite.seam_band = u()?,
            "fusion.max_rounds" => self.fusion.max_rounds = u()?,
            "fusion.tol" => self.fusion.tol = f()?,
            "fusion.initial_damping" => self.fusion.initial_damping = f()?,
            "unfold.edge_a" => self.geometry.edge_a = f()?,
            "unfold.edge_b" => self.geometry.edge_b = f()?,
            "unfold.offset" => self.geometry.offset = f()?,
            "unfold.face_px" => self.face_px = u()?,
            "detect.channels" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|p| parse_u(p.trim()))
                    .collect::<Result<_, _>>()
                    .map_err(wrap)?;
                self.channels = v.try_into().map_err(|_| wrap("expected three widths".into()))?;
            }
            "detect.scales" => self.anchors.scales = parse_list(value).map_err(wrap)?,
            "detect.aspects" => self.anchors.aspects = parse_list(value).map_err(wrap)?,
            "detect.steps" => self.train.steps = u()?,
            "detect.batch_size" => self.train.batch_size = u()?,
            "detect.learning_rate" => self.train.learning_rate = f()?,
            "detect.momentum" => self.train.momentum = f()?,
            "detect.neg_ratio" => self.train.neg_ratio = f()?,
            "detect.pos_iou" => self.train.pos_iou = f()?,
            "detect.neg_iou" => self.train.neg_iou = f()?,
            "detect.lambda" => self.train.lambda = f()?,
            "detect.clip_norm" => self.train.clip_norm = f()?,
            "detect.conf_threshold" => self.conf_threshold = f()?,
            "detect.nms_iou" => self.nms_iou = f()?,
            "synth.frames" => self.frames = u()?,
            "synth.path_radius" => self.path_radius = f()?,
            "synth.path_height" => self.path_height = f()?,
            "synth.width" => self.scene.width = u()?,
            "synth.height" => self.scene.height = u()?,
            "synth.noise_sigma" => self.scene.noise_sigma = f()?,
            "synth.spots" => self.scene.spots.count = u()?,
            "synth.spot_min_radius" => self.scene.spots.min_radius = f()?,
            "synth.spot_max_radius" => self.scene.spots.max_radius = f()?,
            "synth.supersample" => self.scene.supersample = u()?,
            "synth.texture" => {
                self.scene.texture.kind = match value.split_once(':') {
                    None if value == "mottled" => TextureKind::Mottled,
                    Some(("checker", n)) => TextureKind::Checker {
                        squares: n.parse().map_err(|_| wrap(format!("`{n}` is not a square count")))?,
                    },
                    _ => return Err(wrap("expected mottled or checker:N".into())),
                }
            }
            "synth.texture_contrast" => self.scene.texture.contrast = f()?,
            "synth.texture_scale" => self.scene.texture.scale = f()?,
            "dataset.scenes" => self.dataset.n_scenes = u()?,
            "dataset.train_fraction" => self.dataset.train_fraction = f()?,
            "dataset.augment_sigmas" => self.dataset.augment_sigmas = parse_list(value).map_err(wrap)?,
            "dataset.width" => self.dataset.panorama.width = u()?,
            "dataset.height" => self.dataset.panorama.height = u()?,
            "eval.fb_thresholds" => self.fb_thresholds = parse_list(value).map_err(wrap)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "calib.fx" => fmt_f(self.calib.fx),
            "calib.fy" => fmt_f(self.calib.fy),
            "calib.cx" => fmt_f(self.calib.cx),
            "calib.cy" => fmt_f(self.calib.cy),
            "calib.k1" => fmt_f(self.calib.k1),
            "calib.k2" => fmt_f(self.calib.k2),
            "register.max_keypoints" => self.max_keypoints.to_string(),
            "register.ratio" => fmt_f(self.ratio),
            "register.harris_k" => fmt_f(self.features.harris_k),
            "register.nms_radius" => self.features.nms_radius.to_string(),
            "register.relative_threshold" => fmt_f(self.features.relative_threshold),
            "register.descriptor_sigma" => fmt_f(self.features.descriptor_sigma),
            "register.refine_radius" => self.features.refine_radius.to_string(),
            "register.ransac_iterations" => self.hpft.ransac.iterations.to_string(),
            "register.ransac_threshold" => fmt_f(self.hpft.ransac.inlier_threshold),
            "hpft.root_size" => self.hpft.root_size.to_string(),
            "hpft.min_size" => self.hpft.min_size.to_string(),
            "hpft.median_tolerance" => fmt_f(self.hpft.median_tolerance),
            "hpft.kl_threshold" => fmt_f(self.hpft.kl_threshold),
            "hpft.inlier_tolerance" => fmt_f(self.hpft.inlier_tolerance),
            "hpft.min_fit_matches" => self.hpft.min_fit_matches.to_string(),
            "chain.loop_tolerance" => fmt_f(self.chain.loop_tolerance),
            "chain.min_matches" => self.chain.min_matches.to_string(),
            "chain.candidate_min_error" => fmt_f(self.chain.candidate_min_error),
            "fusion.beta" => fmt_f(self.beta),
            "fusion.weight_mode" => match self.composite.weight_mode {
                WeightMode::Uniform => "uniform".into(),
                WeightMode::Feather => "feather".into(),
            },
            "fusion.feather_px" => fmt_f(self.composite.feather_px),
            "fusion.seam_band" => self.composite.seam_band.to_string(),
            "fusion.max_rounds" => self.fusion.max_rounds.to_string(),
            "fusion.tol" => fmt_f(self.fusion.tol),
            "fusion.initial_damping" => fmt_f(self.fusion.initial_damping),
            "unfold.edge_a" => fmt_f(self.geometry.edge_a),
            "unfold.edge_b" => fmt_f(self.geometry.edge_b),
            "unfold.offset" => fmt_f(self.geometry.offset),
            "unfold.face_px" => self.face_px.to_string(),
            "detect.channels" => self.channels.map(|c| c.to_string()).join(","),
            "detect.scales" => list(&self.anchors.scales),
            "detect.aspects" => list(&self.anchors.aspects),
            "detect.steps" => self.train.steps.to_string(),
            "detect.batch_size" => self.train.batch_size.to_string(),
            "detect.learning_rate" => fmt_f(self.train.learning_rate),
            "detect.momentum" => fmt_f(self.train.momentum),
            "detect.neg_ratio" => fmt_f(self.train.neg_ratio),
            "detect.pos_iou" => fmt_f(self.train.pos_iou),
            "detect.neg_iou" => fmt_f(self.train.neg_iou),
            "detect.lambda" => fmt_f(self.train.lambda),
            "detect.clip_norm" => fmt_f(self.train.clip_norm),
            "detect.conf_threshold" => fmt_f(self.conf_threshold),
            "detect.nms_iou" => fmt_f(self.nms_iou),
            "synth.frames" => self.frames.to_string(),
            "synth.path_radius" => fmt_f(self.path_radius),
            "synth.path_height" => fmt_f(self.path_height),
            "synth.width" => self.scene.width.to_string(),
            "synth.height" => self.scene.height.to_string(),
            "synth.noise_sigma" => fmt_f(self.scene.noise_sigma),
            "synth.spots" => self.scene.spots.count.to_string(),
            "synth.spot_min_radius" => fmt_f(self.scene.spots.min_radius),
            "synth.spot_max_radius" => fmt_f(self.scene.spots.max_radius),
            "synth.supersample" => self.scene.supersample.to_string(),
            "synth.texture" => match self.scene.texture.kind {
                TextureKind::Mottled => "mottled".into(),
                TextureKind::Checker { squares } => format!("checker:{squares}"),
            },
            "synth.texture_contrast" => fmt_f(self.scene.texture.contrast),
            "synth.texture_scale" => fmt_f(self.scene.texture.scale),
            "dataset.scenes" => self.dataset.n_scenes.to_string(),
            "dataset.train_fraction" => fmt_f(self.dataset.train_fraction),
            "dataset.augment_sigmas" => list(&self.dataset.augment_sigmas),
            "dataset.width" => self.dataset.panorama.width.to_string(),
            "dataset.height" => self.dataset.panorama.height.to_string(),
            "eval.fb_thresholds" => list(&self.fb_thresholds),
            _ => unreachable!("key table and getters out of sync: {key}"),
        }
    }

    /// Every key with its current value, preceded by a comment describing it.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, kind, doc) in KEYS {
            let _ = writeln!(s, "# {doc} ({kind})\n{k} = {}", self.get(k));
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.geometry
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.calib.validate(None).map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.max_keypoints < 4 || !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad("register.max_keypoints >= 4 and register.ratio in (0, 1] required");
        }
        if self.hpft.min_size == 0 || self.hpft.min_size > self.hpft.root_size {
            return bad("hpft sizes must satisfy 0 < min_size <= root_size");
        }
        if !(self.beta >= 0.0) || !(self.fusion.tol >= 0.0) || !(self.chain.loop_tolerance > 0.0) {
            return bad("fusion.beta, fusion.tol must be >= 0 and chain.loop_tolerance > 0");
        }
        if self.face_px < 2 || self.frames == 0 {
            return bad("unfold.face_px >= 2 and synth.frames >= 1 required");
        }
        if self.channels.contains(&0) || self.anchors.scales.is_empty() || self.anchors.aspects.is_empty() {
            return bad("detect widths, scales and aspects must be non-empty and positive");
        }
        if self
            .anchors
            .scales
            .iter()
            .chain(&self.anchors.aspects)
            .any(|v| !(*v > 0.0) || v.is_infinite())
        {
            return bad("anchor scales and aspects must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("detect.conf_threshold and detect.nms_iou must lie in [0, 1]");
        }
        if self
            .dataset
            .augment_sigmas
            .iter()
            .any(|s| !(*s >= 0.0) || s.is_infinite())
        {
            return bad("dataset.augment_sigmas must be finite and >= 0");
        }
        self.scene_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Scene with the camera path and seeds filled in from this config.
    pub fn scene_spec(&self) -> SceneSpec {
        let mut s = self.scene.clone();
        s.intrinsics = self.calib;
        s.geometry = self.geometry;
        s.camera_path = crate::synth::circle_path(
            self.frames,
            self.path_radius,
            self.path_height,
            -self.geometry.half(crate::unfold::Cube::A),
        );
        s.seed = self.seed;
        s.texture.seed = self.seed.wrapping_mul(31).wrapping_add(17);
        s.spots = SpotSpec { ..s.spots };
        s
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed.wrapping_add(11),
            ..self.dataset.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn hpft_config(&self) -> HpftConfig {
        let mut h = self.hpft;
        h.ransac.seed = self.seed ^ 0x5eed;
        h
    }

    pub fn chain_config(&self) -> ChainConfig {
        let mut c = self.chain;
        c.ransac.seed = self.seed ^ 0x5eed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = PipelineConfig::default();
        d.validate().unwrap();
        assert_eq!(PipelineConfig::parse(&d.render()).unwrap(), d);
    }

    #[test]
    fn every_documented_key_is_settable() {
        let d = PipelineConfig::default();
        for (k, kind, _) in KEYS {
            assert!(matches!(*kind, "fixed" | "tunable"));
            let mut c = d.clone();
            c.set(k, &d.get(k)).unwrap();
            assert_eq!(c, d, "{k}");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::parse("seed = 3\nfusion.betta = 2\n").unwrap_err();
        assert!(err.to_string().contains("fusion.betta"), "{err}");
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, .. }));
    }

    #[test]
    fn values_and_comments() {
        let c = PipelineConfig::parse(
            "# comment\n\ndetect.neg_ratio = inf\nsynth.texture = checker:8  # trailing\ndetect.channels = 4,8,16\n",
        )
        .unwrap();
        assert!(c.train.neg_ratio.is_infinite());
        assert_eq!(c.scene.texture.kind, TextureKind::Checker { squares: 8 });
        assert_eq!(c.channels, [4, 8, 16]);
        assert!(matches!(
            PipelineConfig::parse("seed 3"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            PipelineConfig::parse("fusion.beta = x"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("fusion.beta = -1"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
