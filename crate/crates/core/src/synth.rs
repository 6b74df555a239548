//! Ground-truthed synthetic scenes: a textured double-cube cavity seen by a
//! moving lens camera, and flat lesion panoramas for the detector.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::{distort_point, undistort_point, DistortionModel};
use crate::detect::{format_annotations, BBox, Sample};
use crate::raster::{gaussian_smooth, save_image, PixelCoord, Raster, RasterError};
use crate::register::{fit_homography_dlt, Homography};
use crate::unfold::{ray_hit, CameraPose, Cube, DoubleCube, Face, SurfacePoint};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn hash3(a: i64, b: i64, seed: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a as u64, b as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(31).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    h
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    (hash3(ix, iy, seed) >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in `[0, 1)`; only integer hashing and polynomials, so results
/// are identical on every platform.
pub fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smoothstep(x - fx), smoothstep(y - fy));
    let top = lattice(ix, iy, seed) * (1.0 - tx) + lattice(ix + 1, iy, seed) * tx;
    let bottom = lattice(ix, iy + 1, seed) * (1.0 - tx) + lattice(ix + 1, iy + 1, seed) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Octave sum normalized back to `[0, 1)`.
pub fn fbm(x: f64, y: f64, octaves: u32, seed: u64) -> f64 {
    let (mut sum, mut amp, mut norm, mut f) = (0.0, 1.0, 0.0, 1.0);
    for o in 0..octaves.max(1) {
        sum += amp * value_noise(x * f, y * f, seed.wrapping_add(o as u64 * 7919));
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    sum / norm
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum TextureKind {
    Mottled,
    /// `squares` per face side, alternating `base ± contrast`.
    Checker {
        squares: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    pub base: f64,
    pub contrast: f64,
    /// World units per noise cell.
    pub scale: f64,
    pub octaves: u32,
    pub seed: u64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            kind: TextureKind::Mottled,
            base: 120.0,
            contrast: 90.0,
            scale: 0.025,
            octaves: 4,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Polyp {
    pub center: SurfacePoint,
    /// Semi-axes along the face's u and v directions, world units.
    pub radii: (f64, f64),
    pub brightness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpotSpec {
    pub count: usize,
    pub min_radius: f64,
    pub max_radius: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub geometry: DoubleCube,
    pub texture: TextureSpec,
    pub polyps: Vec<Polyp>,
    pub camera_path: Vec<CameraPose>,
    pub intrinsics: DistortionModel,
    pub width: usize,
    pub height: usize,
    /// Gaussian noise standard deviation as a fraction of 255.
    pub noise_sigma: f64,
    pub spots: SpotSpec,
    /// Samples per pixel side.
    pub supersample: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// Eight views circling above the floor of cube A.
    fn default() -> Self {
        let geometry = DoubleCube::default();
        Self {
            camera_path: circle_path(8, 0.1, -0.2, -0.5),
            polyps: vec![Polyp {
                center: SurfacePoint {
                    cube: Cube::A,
                    face: Face::NegZ,
                    u: 0.56,
                    v: 0.47,
                },
                radii: (0.03, 0.022),
                brightness: 60.0,
            }],
            geometry,
            texture: TextureSpec::default(),
            intrinsics: DistortionModel {
                k1: -0.08,
                ..DistortionModel::pinhole(200.0, 200.0, 79.5, 59.5)
            },
            width: 160,
            height: 120,
            noise_sigma: 0.01,
            spots: SpotSpec {
                count: 2,
                min_radius: 1.5,
                max_radius: 3.5,
            },
            supersample: 2,
            seed: 5,
        }
    }
}

/// `n` poses on a horizontal circle at height `z`, all looking straight
/// down at the plane `z = floor`.
pub fn circle_path(n: usize, radius: f64, z: f64, floor: f64) -> Vec<CameraPose> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let p = Vector3::new(radius * a.cos(), radius * a.sin(), z);
            CameraPose::look_at(p, Vector3::new(p.x, p.y, floor), Vector3::y())
        })
        .collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        self.geometry
            .validate()
            .map_err(|e| SynthError::Invalid(e.to_string()))?;
        self.intrinsics
            .validate(Some((self.width, self.height)))
            .map_err(SynthError::Invalid)?;
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        if self.width < 2 || self.height < 2 || self.supersample == 0 {
            return bad("frame must be at least 2x2 with supersample >= 1".into());
        }
        if self.spots.min_radius > self.spots.max_radius || self.spots.min_radius < 0.0 {
            return bad("spot radii must satisfy 0 <= min <= max".into());
        }
        for (i, p) in self.polyps.iter().enumerate() {
            if self.geometry.is_excluded(p.center.cube, p.center.face) {
                return bad(format!("polyp {i} lies on a junction face"));
            }
        }
        for (i, pose) in self.camera_path.iter().enumerate() {
            if !self.geometry.contains_strict(&pose.position) {
                return bad(format!("camera {i} is outside the cavity"));
            }
        }
        Ok(())
    }

    /// Surface intensity before noise and specular spots.
    pub fn shade(&self, sp: &SurfacePoint, world: &Vector3<f64>) -> f64 {
        let t = &self.texture;
        let (ua, va) = sp.face.uv_axes();
        let base = match t.kind {
            TextureKind::Mottled => {
                // seeded by face direction so coplanar walls of both cubes agree
                let seed = t.seed.wrapping_add(sp.face as u64 * 1_000_003);
                let n = fbm(world[ua] / t.scale, world[va] / t.scale, t.octaves, seed);
                t.base + t.contrast * (2.0 * n - 1.0)
            }
            TextureKind::Checker { squares } => {
                let (i, j) = (
                    (sp.u * squares as f64).floor() as i64,
                    (sp.v * squares as f64).floor() as i64,
                );
                if (i + j).rem_euclid(2) == 0 {
                    t.base + t.contrast
                } else {
                    t.base - t.contrast
                }
            }
        };
        let mut v = base;
        for p in &self.polyps {
            if (p.center.cube, p.center.face) != (sp.cube, sp.face) && !same_plane(&self.geometry, p, sp) {
                continue;
            }
            let c = self.geometry.surface_to_world(&p.center);
            let du = (world[ua] - c[ua]) / p.radii.0;
            let dv = (world[va] - c[va]) / p.radii.1;
            let d = (du * du + dv * dv).sqrt();
            // flat-topped dome with a soft rim
            v += p.brightness * (1.0 - smoothstep((d - 0.75) / 0.25)) * (1.0 - 0.25 * d * d);
        }
        v
    }
}

fn same_plane(g: &DoubleCube, p: &Polyp, sp: &SurfacePoint) -> bool {
    if p.center.face != sp.face {
        return false;
    }
    let a = g.surface_to_world(&p.center)[sp.face.axis()];
    let b = g.surface_to_world(sp)[sp.face.axis()];
    (a - b).abs() < 1e-12
}

/// Homography between the ideal pixel coordinates of two poses, valid for
/// points on one planar face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceHomography {
    pub cube: Cube,
    pub face: Face,
    pub to_pose: usize,
    pub h: Homography,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Raster,
    /// Polyp extents in distorted pixel coordinates, clipped to the frame.
    pub boxes: Vec<BBox>,
    /// Face-induced homographies to the next pose on the path.
    pub homographies: Vec<FaceHomography>,
}

/// Plane-induced homography from pose `a` to pose `b` for one face, or `None`
/// when either camera does not face it.
pub fn face_homography(spec: &SceneSpec, a: usize, b: usize, cube: Cube, face: Face) -> Option<Homography> {
    let (pa, pb) = (&spec.camera_path[a], &spec.camera_path[b]);
    let k = &spec.intrinsics;
    let mut src = Vec::with_capacity(4);
    let mut dst = Vec::with_capacity(4);
    for (u, v) in [(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75)] {
        let w = spec.geometry.surface_to_world(&SurfacePoint { cube, face, u, v });
        src.push(pa.project(k, &w)?);
        dst.push(pb.project(k, &w)?);
    }
    fit_homography_dlt(&src, &dst).ok()
}

fn visible_faces(spec: &SceneSpec, pose: &CameraPose) -> Vec<(Cube, Face)> {
    let k = &spec.intrinsics;
    let mut faces = Vec::new();
    for (gx, gy) in [(0.5, 0.5), (0.1, 0.1), (0.9, 0.1), (0.1, 0.9), (0.9, 0.9)] {
        let ideal = PixelCoord::new(gx * (spec.width - 1) as f64, gy * (spec.height - 1) as f64);
        if let Ok(hit) = ray_hit(&spec.geometry, &pose.position, &pose.ray(k, ideal)) {
            let key = (hit.surface.cube, hit.surface.face);
            if !faces.contains(&key) {
                faces.push(key);
            }
        }
    }
    faces
}

fn polyp_box(spec: &SceneSpec, pose: &CameraPose, p: &Polyp) -> Option<BBox> {
    let g = &spec.geometry;
    let c = g.surface_to_world(&p.center);
    let (ua, va) = p.center.face.uv_axes();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for i in 0..72 {
        let a = std::f64::consts::TAU * i as f64 / 72.0;
        let mut w = c;
        w[ua] += p.radii.0 * a.cos();
        w[va] += p.radii.1 * a.sin();
        let ideal = pose.project(&spec.intrinsics, &w)?;
        let d = (w - pose.position).normalize();
        let hit = ray_hit(g, &pose.position, &d).ok()?;
        if (hit.world - w).norm() > 1e-6 {
            return None;
        }
        let q = distort_point(&spec.intrinsics, ideal);
        x0 = x0.min(q.x);
        y0 = y0.min(q.y);
        x1 = x1.max(q.x);
        y1 = y1.max(q.y);
    }
    let b = BBox::new(x0, y0, x1, y1).clip((spec.width - 1) as f64, (spec.height - 1) as f64);
    (b.is_valid() && b.width() >= 2.0 && b.height() >= 2.0).then_some(b)
}

fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Saturated discs with a one-pixel soft rim.
pub fn add_spots(img: &mut Raster, spots: &SpotSpec, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width(), img.height());
    for _ in 0..spots.count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = if spots.max_radius > spots.min_radius {
            rng.random_range(spots.min_radius..spots.max_radius)
        } else {
            spots.min_radius
        };
        let (xa, xb) = (
            (cx - r - 2.0).floor().max(0.0) as usize,
            ((cx + r + 2.0).ceil() as usize).min(w),
        );
        let (ya, yb) = (
            (cy - r - 2.0).floor().max(0.0) as usize,
            ((cy + r + 2.0).ceil() as usize).min(h),
        );
        for y in ya..yb {
            for x in xa..xb {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let a = 1.0 - smoothstep(d - r);
                if a > 0.0 {
                    for c in 0..img.channels() {
                        let v = img.get(x, y, c);
                        img.set(x, y, c, v + a * (255.0 - v));
                    }
                }
            }
        }
    }
}

/// Adds `N(0, (sigma * 255)^2)` and clamps to `[0, 255]`.
pub fn add_noise(img: &mut Raster, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma * 255.0).expect("finite sigma");
    for v in img.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 255.0);
    }
}

/// Renders pose `index` of the camera path through the lens model.
pub fn render_frame(spec: &SceneSpec, index: usize) -> Result<RenderedFrame, SynthError> {
    spec.validate()?;
    let pose = spec
        .camera_path
        .get(index)
        .ok_or_else(|| SynthError::Invalid(format!("pose {index} out of range")))?;
    let (w, h) = (spec.width, spec.height);
    let ss = spec.supersample;
    let k = &spec.intrinsics;
    let data: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let mut sum = 0.0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let p = PixelCoord::new(
                            x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5,
                            y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5,
                        );
                        // outside the lens fold stays black
                        let Some(ideal) = undistort_point(k, p) else {
                            continue;
                        };
                        if let Ok(hit) = ray_hit(&spec.geometry, &pose.position, &pose.ray(k, ideal)) {
                            sum += spec.shade(&hit.surface, &hit.world).clamp(0.0, 255.0);
                        }
                    }
                }
                sum / (ss * ss) as f64
            })
        })
        .collect();
    let mut image = Raster::from_data(w, h, 1, data)?;
    let mut rng = frame_rng(spec.seed, index);
    add_spots(&mut image, &spec.spots, &mut rng);
    add_noise(&mut image, spec.noise_sigma, &mut rng);

    let boxes = spec.polyps.iter().filter_map(|p| polyp_box(spec, pose, p)).collect();
    let n = spec.camera_path.len();
    let mut homographies = Vec::new();
    if n > 1 {
        let next = (index + 1) % n;
        let here = visible_faces(spec, pose);
        let there = visible_faces(spec, &spec.camera_path[next]);
        for (cube, face) in here.into_iter().filter(|f| there.contains(f)) {
            if let Some(h) = face_homography(spec, index, next, cube, face) {
                homographies.push(FaceHomography {
                    cube,
                    face,
                    to_pose: next,
                    h,
                });
            }
        }
    }
    Ok(RenderedFrame {
        image,
        boxes,
        homographies,
    })
}

/// Flat lesion panoramas for detector training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PanoramaSpec {
    pub width: usize,
    pub height: usize,
    pub texture: TextureSpec,
    /// Inclusive range of lesions per panorama.
    pub polyps: (usize, usize),
    /// Semi-axis range in pixels.
    pub polyp_radius: (f64, f64),
    pub polyp_brightness: (f64, f64),
    pub spots: SpotSpec,
    pub noise_sigma: f64,
}

impl Default for PanoramaSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 96,
            // mottling finer than the smallest lesion
            texture: TextureSpec {
                scale: 5.0,
                contrast: 35.0,
                ..TextureSpec::default()
            },
            polyps: (1, 2),
            polyp_radius: (7.0, 12.0),
            polyp_brightness: (55.0, 85.0),
            spots: SpotSpec {
                count: 4,
                min_radius: 1.5,
                max_radius: 4.0,
            },
            noise_sigma: 0.02,
        }
    }
}

/// One panorama with its lesion boxes, fully determined by `seed`.
pub fn render_panorama(spec: &PanoramaSpec, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let n = rng.random_range(spec.polyps.0..=spec.polyps.1);
    let mut lesions: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while lesions.len() < n && attempts < 200 {
        attempts += 1;
        let rx = rng.random_range(spec.polyp_radius.0..=spec.polyp_radius.1);
        let ry = (rx * rng.random_range(0.75..1.25)).clamp(spec.polyp_radius.0, spec.polyp_radius.1);
        let cx = rng.random_range(rx + 1.0..w - rx - 1.0);
        let cy = rng.random_range(ry + 1.0..h - ry - 1.0);
        let b = rng.random_range(spec.polyp_brightness.0..=spec.polyp_brightness.1);
        let apart = lesions
            .iter()
            .all(|l| ((l.0 - cx).powi(2) + (l.1 - cy).powi(2)).sqrt() > l.2.max(l.3) + rx.max(ry) + 4.0);
        if apart {
            lesions.push((cx, cy, rx, ry, b));
        }
    }
    let t = spec.texture;
    let tex_seed = t.seed ^ seed.wrapping_mul(0x9e37_79b9);
    let mut image = Raster::from_fn_gray(spec.width, spec.height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let mut v = t.base + t.contrast * (2.0 * fbm(fx / t.scale, fy / t.scale, t.octaves, tex_seed) - 1.0);
        for &(cx, cy, rx, ry, b) in &lesions {
            let (du, dv) = ((fx - cx) / rx, (fy - cy) / ry);
            let d = (du * du + dv * dv).sqrt();
            v += b * (1.0 - smoothstep((d - 0.75) / 0.25)) * (1.0 - 0.25 * d * d);
        }
        v.clamp(0.0, 255.0)
    });
    add_spots(&mut image, &spec.spots, &mut rng);
    add_noise(&mut image, spec.noise_sigma, &mut rng);
    let boxes = lesions
        .iter()
        .map(|&(cx, cy, rx, ry, _)| BBox::new(cx - rx, cy - ry, cx + rx, cy + ry).clip(w, h))
        .collect();
    Sample { image, boxes }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub panorama: PanoramaSpec,
    pub n_scenes: usize,
    pub train_fraction: f64,
    /// Every panorama is also written blurred at each of these sigmas; 0 is
    /// the unblurred copy.
    pub augment_sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            panorama: PanoramaSpec::default(),
            n_scenes: 160,
            train_fraction: 0.5,
            augment_sigmas: vec![0.0, 1.0],
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitSets {
    pub train: Vec<(String, Sample)>,
    pub test: Vec<(String, Sample)>,
}

/// Builds the dataset in memory: seed-shuffled split, then one copy of each
/// panorama per augmentation sigma.
pub fn build_dataset(spec: &DatasetSpec) -> Result<SplitSets, SynthError> {
    if spec.n_scenes < 2 {
        return Err(SynthError::Invalid("need at least 2 scenes".into()));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) || spec.augment_sigmas.is_empty() {
        return Err(SynthError::Invalid(
            "train_fraction in [0, 1] and at least one sigma required".into(),
        ));
    }
    let mut ids: Vec<usize> = (0..spec.n_scenes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((spec.n_scenes as f64 * spec.train_fraction).round() as usize).clamp(1, spec.n_scenes - 1);
    let render = |ids: &[usize]| -> Vec<(String, Sample)> {
        let mut sorted = ids.to_vec();
        sorted.sort();
        sorted
            .par_iter()
            .flat_map_iter(|&id| {
                let base = render_panorama(
                    &spec.panorama,
                    spec.seed.wrapping_mul(1_000_003).wrapping_add(id as u64),
                );
                spec.augment_sigmas
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| {
                        let image = if s > 0.0 {
                            gaussian_smooth(&base.image, s)
                        } else {
                            base.image.clone()
                        };
                        (
                            format!("scene{id:04}_a{k}"),
                            Sample {
                                image,
                                boxes: base.boxes.clone(),
                            },
                        )
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    Ok(SplitSets {
        train: render(&ids[..n_train]),
        test: render(&ids[n_train..]),
    })
}

/// Writes `train/` and `test/` directories in the detector dataset layout.
pub fn make_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<SplitSets, SynthError> {
    let sets = build_dataset(spec)?;
    for (sub, items) in [("train", &sets.train), ("test", &sets.test)] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|source| SynthError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for (name, s) in items.iter() {
            save_image(&s.image, dir.join(format!("{name}.png")))?;
            let ann = dir.join(format!("{name}.txt"));
            fs::write(&ann, format_annotations(&s.boxes)).map_err(|source| SynthError::Io {
                path: ann.display().to_string(),
                source,
            })?;
        }
    }
    Ok(sets)
}
