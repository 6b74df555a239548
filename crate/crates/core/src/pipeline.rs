//! Stage drivers shared by the command-line front end and the tests.
//!
//! Every stage reads and writes plain files, so stages can be re-run
//! independently.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::calib::undistort_image;
use crate::chain::{filter_matches_closed_chain_traced, loop_residual, ChainLink, TransformChain};
use crate::config::{ConfigError, PipelineConfig};
use crate::detect::{
    detections_to_json, format_annotations, infer, load_dataset, model_from_json, model_to_json, train, BBox,
    Detection, Sample, TinyDetector,
};
use crate::evalx::{detection_report, fb_curve, match_fb_error, texture_metric_error, EvalReport};
use crate::fusion::{
    composite, format_loss_trace, optimize_alternating, Canvas, FusionError, FusionProblem, SimTransform4,
};
use crate::raster::{load_image, save_image, to_gray, PixelCoord, Raster};
use crate::register::{
    detect_keypoints, fit_homography, fit_homography_dlt, format_matches, hpft_refine, match_descriptors,
    parse_matches, Homography, Keypoint, MatchSet,
};
use crate::synth::{make_dataset, render_frame, FaceHomography};
use crate::unfold::{bake_atlas, format_layout, AtlasLayout, CameraPose};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl PipelineError {
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Io { .. } | PipelineError::Data(_) => 2,
            PipelineError::Numeric(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path, e: impl ToString) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn data<E: ToString>(e: E) -> PipelineError {
    PipelineError::Data(e.to_string())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn save(img: &Raster, path: &Path) -> Result<()> {
    save_image(img, path).map_err(data)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn from_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| io_err(path, e))
}

/// Sorted `*.png` files of a directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(PipelineError::Data(format!("{}: no PNG frames", dir.display())));
    }
    Ok(out)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Raster>> {
    let frames = list_frames(dir)?
        .iter()
        .map(|p| load_image(p).map_err(data))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (frames[0].width(), frames[0].height());
    if frames.iter().any(|f| f.width() != w || f.height() != h) {
        return Err(PipelineError::Data(format!("{}: frames differ in size", dir.display())));
    }
    Ok(frames)
}

/// Ground truth written next to the synthetic frames.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneTruth {
    pub intrinsics: crate::calib::DistortionModel,
    pub poses: Vec<CameraPose>,
    pub boxes: Vec<Vec<BBox>>,
    /// Per frame, face-induced homographies in ideal pixels to the next pose.
    pub homographies: Vec<Vec<TruthHomography>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TruthHomography {
    pub face: String,
    pub to: usize,
    pub h: Homography,
}

impl From<&FaceHomography> for TruthHomography {
    fn from(f: &FaceHomography) -> Self {
        Self {
            face: format!("{:?} {}", f.cube, f.face.label()),
            to: f.to_pose,
            h: f.h,
        }
    }
}

/// Renders the scene into `out/frames`, writes `out/truth.json` and the
/// detector dataset under `out/dataset`.
pub fn run_synth(cfg: &PipelineConfig, out: &Path) -> Result<SceneTruth> {
    let spec = cfg.scene_spec();
    spec.validate().map_err(data)?;
    let frames_dir = out.join("frames");
    mkdir(&frames_dir)?;
    let mut truth = SceneTruth {
        intrinsics: spec.intrinsics,
        poses: spec.camera_path.clone(),
        boxes: Vec::new(),
        homographies: Vec::new(),
    };
    for i in 0..spec.camera_path.len() {
        let f = render_frame(&spec, i).map_err(data)?;
        save(&f.image, &frames_dir.join(format!("frame_{i:03}.png")))?;
        write(
            &frames_dir.join(format!("frame_{i:03}.txt")),
            &format_annotations(&f.boxes),
        )?;
        truth.boxes.push(f.boxes);
        truth.homographies.push(f.homographies.iter().map(Into::into).collect());
    }
    write(&out.join("truth.json"), &to_json(&truth))?;
    write(&out.join("poses.json"), &to_json(&truth.poses))?;
    make_dataset(&cfg.dataset_spec(), &out.join("dataset")).map_err(data)?;
    write(&out.join("config.txt"), &cfg.render())?;
    Ok(truth)
}

#[derive(Debug, Clone)]
pub struct StitchOutput {
    /// Undistorted input frames.
    pub frames: Vec<Raster>,
    pub initial: Vec<SimTransform4>,
    pub transforms: Vec<SimTransform4>,
    pub canvas: Canvas,
    pub loss_trace: Vec<f64>,
    /// Refined and chain-filtered matches of link `i -> i+1 (mod n)`.
    pub links: Vec<MatchSet>,
    pub chain_residuals: Vec<f64>,
}

fn register_pair(cfg: &PipelineConfig, a: &Raster, b: &Raster, ka: &[Keypoint], kb: &[Keypoint]) -> MatchSet {
    let raw = match_descriptors(ka, kb, cfg.ratio);
    let mut seeded = raw.clone();
    if let Ok(h) = fit_homography(&raw, &cfg.hpft_config().ransac) {
        // gross outliers of the global fit never reach the patch tree
        let t = 4.0 * cfg.hpft.ransac.inlier_threshold;
        for m in &mut seeded {
            m.valid = h.apply(m.src).dist(m.dst) < t;
        }
    }
    hpft_refine(a, b, &seeded, &cfg.hpft_config()).0
}

fn link_homography(matches: &MatchSet) -> Option<Homography> {
    let (src, dst): (Vec<PixelCoord>, Vec<PixelCoord>) =
        matches.iter().filter(|m| m.valid).map(|m| (m.src, m.dst)).unzip();
    fit_homography_dlt(&src, &dst).ok()
}

/// Similarity closest to a homography over a grid spanning the frame.
fn similarity_of(h: &Homography, w: usize, h_px: usize) -> Option<SimTransform4> {
    let mut pairs = Vec::with_capacity(25);
    for i in 0..5 {
        for j in 0..5 {
            let p = PixelCoord::new(i as f64 * (w - 1) as f64 / 4.0, j as f64 * (h_px - 1) as f64 / 4.0);
            pairs.push((p, h.apply(p)));
        }
    }
    SimTransform4::fit(&pairs)
}

/// Undistort, register consecutive frames as a closed loop, filter the loop,
/// place every frame in frame 0's plane and refine the placements on the seams.
pub fn stitch(cfg: &PipelineConfig, raw: &[Raster]) -> Result<StitchOutput> {
    if raw.is_empty() {
        return Err(PipelineError::Data("no frames".into()));
    }
    let (w, h) = (raw[0].width(), raw[0].height());
    cfg.calib.validate(Some((w, h))).map_err(PipelineError::Data)?;
    let frames: Vec<Raster> = raw.iter().map(|f| undistort_image(f, &cfg.calib)).collect();
    let n = frames.len();
    if n == 1 {
        let t = vec![SimTransform4::IDENTITY];
        let canvas = composite(&frames, &t, &cfg.composite).map_err(numeric)?;
        return Ok(StitchOutput {
            frames,
            initial: t.clone(),
            transforms: t,
            canvas,
            loss_trace: Vec::new(),
            links: Vec::new(),
            chain_residuals: Vec::new(),
        });
    }
    let gray: Vec<Raster> = frames.iter().map(to_gray).collect();
    let kps: Vec<Vec<Keypoint>> = gray
        .iter()
        .map(|g| detect_keypoints(g, cfg.max_keypoints, &cfg.features))
        .collect();
    let mut links = Vec::with_capacity(n);
    for i in 0..n {
        let j = (i + 1) % n;
        let m = register_pair(cfg, &gray[i], &gray[j], &kps[i], &kps[j]);
        let hm = link_homography(&m)
            .ok_or_else(|| PipelineError::Data(format!("frames {i} and {j} share too few features")))?;
        links.push(ChainLink { h: hm, matches: m });
    }
    let chain = TransformChain { links };
    let (chain, trace) = filter_matches_closed_chain_traced(&chain, &cfg.chain_config()).map_err(numeric)?;
    let residual = loop_residual(&chain).map_err(numeric)?;
    log::info!("loop residual {residual:.3e} after {} removals", trace.removed);

    // frame k -> frame 0 is the inverse of the forward composition 0 -> k
    let mut initial = vec![SimTransform4::IDENTITY];
    let mut forward = Homography::identity();
    for k in 1..n {
        forward = forward
            .then(&chain.links[k - 1].h)
            .ok_or_else(|| PipelineError::Numeric(format!("link {} is singular", k - 1)))?;
        let back = forward
            .inverse()
            .ok_or_else(|| PipelineError::Numeric(format!("placement of frame {k} is singular")))?;
        initial.push(similarity_of(&back, w, h).ok_or_else(|| PipelineError::Numeric(format!("frame {k} placement")))?);
    }
    let mut problem = FusionProblem::new(gray, initial.clone(), cfg.beta, &cfg.composite).map_err(numeric)?;
    let (transforms, loss_trace) = match optimize_alternating(&mut problem, &cfg.fusion) {
        Ok(r) => (r.transforms, r.loss_trace),
        Err(FusionError::NoSeams) => (initial.clone(), Vec::new()),
        Err(e) => return Err(numeric(e)),
    };
    if transforms.iter().any(|t| !t.is_finite()) {
        return Err(PipelineError::Numeric("fusion produced non-finite placements".into()));
    }
    let canvas = composite(&frames, &transforms, &cfg.composite).map_err(numeric)?;
    Ok(StitchOutput {
        frames,
        initial,
        transforms,
        canvas,
        loss_trace,
        links: chain.links.into_iter().map(|l| l.matches).collect(),
        chain_residuals: trace.residuals,
    })
}

fn numeric(e: impl ToString) -> PipelineError {
    PipelineError::Numeric(e.to_string())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Placements {
    pub initial: Vec<SimTransform4>,
    pub refined: Vec<SimTransform4>,
}

/// Writes `panorama.png`, `transforms.json`, `loss_trace.txt`,
/// `chain_trace.txt` and `matches/link_XXX.txt`.
pub fn run_stitch(cfg: &PipelineConfig, frames_dir: &Path, out: &Path) -> Result<StitchOutput> {
    let raw = load_frames(frames_dir)?;
    let s = stitch(cfg, &raw)?;
    mkdir(out)?;
    save(&s.canvas.grid, &out.join("panorama.png"))?;
    write(
        &out.join("transforms.json"),
        &to_json(&Placements {
            initial: s.initial.clone(),
            refined: s.transforms.clone(),
        }),
    )?;
    write(&out.join("loss_trace.txt"), &format_loss_trace(&s.loss_trace))?;
    write(&out.join("chain_trace.txt"), &format_loss_trace(&s.chain_residuals))?;
    let mdir = out.join("matches");
    mkdir(&mdir)?;
    for (i, m) in s.links.iter().enumerate() {
        write(&mdir.join(format!("link_{i:03}.txt")), &format_matches(m))?;
    }
    Ok(s)
}

/// Bakes frames with known poses into the double-cube atlas; writes
/// `atlas.png` and `layout.txt`.
pub fn run_unfold(cfg: &PipelineConfig, frames_dir: &Path, poses: &Path, out: &Path) -> Result<()> {
    let frames = load_frames(frames_dir)?;
    let poses: Vec<CameraPose> = from_json(poses)?;
    if poses.len() != frames.len() {
        return Err(PipelineError::Data(format!(
            "{} poses for {} frames",
            poses.len(),
            frames.len()
        )));
    }
    for (i, p) in poses.iter().enumerate() {
        if !cfg.geometry.contains_strict(&p.position) {
            return Err(PipelineError::Data(format!("pose {i} lies outside the cavity")));
        }
    }
    let layout = AtlasLayout::cross(&cfg.geometry, cfg.face_px);
    let atlas = bake_atlas(&cfg.geometry, &layout, &poses, &frames, &cfg.calib);
    mkdir(out)?;
    save(&atlas.raster, &out.join("atlas.png"))?;
    write(&out.join("layout.txt"), &format_layout(&layout))?;
    Ok(())
}

/// Accepts either a split directory or its parent containing `train/`.
fn split_dir(dir: &Path, split: &str) -> PathBuf {
    let sub = dir.join(split);
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    Ok(load_dataset(dir).map_err(data)?.into_iter().map(|(_, s)| s).collect())
}

/// Trains a detector on `dataset/train`; writes the model JSON and `train_loss.txt` beside it.
pub fn run_train(cfg: &PipelineConfig, dataset: &Path, model_out: &Path) -> Result<TinyDetector> {
    let samples = load_samples(&split_dir(dataset, "train"))?;
    let mut model = TinyDetector::new(cfg.channels, cfg.anchors.clone(), cfg.seed);
    let curve = train(&mut model, &samples, &cfg.train_config()).map_err(data)?;
    if curve.iter().any(|l| !l.is_finite()) || model.params.iter().any(|p| !p.is_finite()) {
        return Err(PipelineError::Numeric("training diverged".into()));
    }
    if let Some(parent) = model_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write(model_out, &model_to_json(&model))?;
    write(&model_out.with_extension("loss.txt"), &format_loss_trace(&curve))?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<TinyDetector> {
    model_from_json(&read(path)?).map_err(|e| io_err(path, e))
}

pub fn run_detect(cfg: &PipelineConfig, model: &Path, image: &Path, out_json: &Path) -> Result<Vec<Detection>> {
    let model = load_model(model)?;
    let img = load_image(image).map_err(data)?;
    let dets = infer(&model, &img, cfg.conf_threshold, cfg.nms_iou);
    write(out_json, &detections_to_json(&dets))?;
    Ok(dets)
}

/// Inputs of the evaluation; absent parts are skipped.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub synth: Option<PathBuf>,
    pub stitch: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

/// Panorama TME before and after fusion, FB curve of the stitched matches
/// against the true homographies, and detection recall/accuracy on the test split.
pub fn evaluate(cfg: &PipelineConfig, inputs: &EvalInputs) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    if let Some(st) = &inputs.stitch {
        let synth = inputs
            .synth
            .as_ref()
            .ok_or_else(|| PipelineError::Data("stitch evaluation needs the synthetic scene directory".into()))?;
        let placements: Placements = from_json(&st.join("transforms.json"))?;
        let frames: Vec<Raster> = load_frames(&synth.join("frames"))?
            .iter()
            .map(|f| undistort_image(f, &cfg.calib))
            .collect();
        if placements.refined.len() != frames.len() {
            return Err(PipelineError::Data(
                "transforms.json does not match the frame count".into(),
            ));
        }
        for (key, t) in [
            ("tme.initial", &placements.initial),
            ("tme.refined", &placements.refined),
        ] {
            let canvas = composite(&frames, t, &cfg.composite).map_err(numeric)?;
            match texture_metric_error(&canvas, &frames, t) {
                Ok(v) => report.insert(key, v),
                Err(crate::evalx::EvalError::NoSeams) => {}
                Err(e) => return Err(numeric(e)),
            }
        }
        let truth: SceneTruth = from_json(&synth.join("truth.json"))?;
        let mut errors = Vec::new();
        let mut total = 0usize;
        for (i, hs) in truth.homographies.iter().enumerate() {
            let path = st.join("matches").join(format!("link_{i:03}.txt"));
            if !path.exists() {
                continue;
            }
            let matches = parse_matches(&read(&path)?).map_err(|e| io_err(&path, e))?;
            // the first face seen by both poses carries the link
            let Some(back) = hs.first().and_then(|t| t.h.inverse()) else {
                continue;
            };
            total += matches.len();
            errors.extend(matches.iter().filter(|m| m.valid).map(|m| match_fb_error(m, &back)));
        }
        if total > 0 {
            report.insert("fb.matches", total as f64);
            report.insert("fb.valid", errors.len() as f64);
            for (t, c) in cfg.fb_thresholds.iter().zip(fb_curve(&errors, &cfg.fb_thresholds)) {
                report.insert_region("fb_curve", &format!("below_{t}px"), c as f64);
            }
        }
    }
    if let Some(model) = &inputs.model {
        let base = inputs
            .synth
            .as_ref()
            .map(|s| s.join("dataset"))
            .ok_or_else(|| PipelineError::Data("detector evaluation needs the synthetic scene directory".into()))?;
        let model = load_model(model)?;
        let samples = load_samples(&split_dir(&base, "test"))?;
        let dets: Vec<Vec<Detection>> = samples
            .iter()
            .map(|s| infer(&model, &s.image, cfg.conf_threshold, cfg.nms_iou))
            .collect();
        let gts: Vec<Vec<BBox>> = samples.into_iter().map(|s| s.boxes).collect();
        report.merge(detection_report(&dets, &gts));
    }
    report.validate().map_err(numeric)?;
    Ok(report)
}

/// Writes `report.json` and `report.txt`.
pub fn run_eval(cfg: &PipelineConfig, inputs: &EvalInputs, out: &Path) -> Result<EvalReport> {
    let report = evaluate(cfg, inputs)?;
    mkdir(out)?;
    write(&out.join("report.json"), &report.to_json())?;
    write(&out.join("report.txt"), &report.to_table())?;
    Ok(report)
}
