//! Double-cube cavity model and its flat texture atlas.
//!
//! Two axis-aligned cubes share the Z axis; cube B sits `offset` above cube A
//! and the two faces that meet inside the junction (A's +Z, B's -Z) are not
//! part of the cavity wall.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::{distort_point, DistortionModel};
use crate::raster::{PixelCoord, Raster};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnfoldError {
    #[error("face {0:?} of cube {1:?} is a junction face")]
    ExcludedFace(Face, Cube),
    #[error("ray direction is zero or not finite")]
    DegenerateRay,
    #[error("ray origin is not strictly inside the cavity")]
    OriginOutside,
    #[error("ray leaves through the exposed part of a junction face")]
    JunctionHit,
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Cube {
    A,
    B,
}

/// Declaration order is the tie-break priority for rays through edges and
/// corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Face {
    PosX,
    PosY,
    PosZ,
    NegX,
    NegY,
    NegZ,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::PosX, Face::PosY, Face::PosZ, Face::NegX, Face::NegY, Face::NegZ];

    pub fn axis(self) -> usize {
        match self {
            Face::PosX | Face::NegX => 0,
            Face::PosY | Face::NegY => 1,
            Face::PosZ | Face::NegZ => 2,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Face::PosX | Face::PosY | Face::PosZ => 1.0,
            _ => -1.0,
        }
    }

    /// World axes carrying `u` and `v` on this face.
    pub fn uv_axes(self) -> (usize, usize) {
        match self.axis() {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    fn from_axis(axis: usize, positive: bool) -> Face {
        match (axis, positive) {
            (0, true) => Face::PosX,
            (1, true) => Face::PosY,
            (2, true) => Face::PosZ,
            (0, false) => Face::NegX,
            (1, false) => Face::NegY,
            _ => Face::NegZ,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Face::PosX => "+X",
            Face::PosY => "+Y",
            Face::PosZ => "+Z",
            Face::NegX => "-X",
            Face::NegY => "-Y",
            Face::NegZ => "-Z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DoubleCube {
    pub edge_a: f64,
    pub edge_b: f64,
    /// Distance between the two cube centres along Z.
    pub offset: f64,
}

impl Default for DoubleCube {
    fn default() -> Self {
        Self {
            edge_a: 1.0,
            edge_b: 1.0,
            offset: 0.8,
        }
    }
}

impl DoubleCube {
    pub fn validate(&self) -> Result<(), UnfoldError> {
        let finite = [self.edge_a, self.edge_b, self.offset].iter().all(|v| v.is_finite());
        if !finite || self.edge_a <= 0.0 || self.edge_b <= 0.0 {
            return Err(UnfoldError::InvalidGeometry("edge lengths must be positive".into()));
        }
        if self.offset < 0.0 || self.offset >= 0.5 * (self.edge_a + self.edge_b) {
            return Err(UnfoldError::InvalidGeometry(
                "offset must be in [0, (edge_a + edge_b) / 2)".into(),
            ));
        }
        Ok(())
    }

    pub fn center(&self, cube: Cube) -> Vector3<f64> {
        match cube {
            Cube::A => Vector3::zeros(),
            Cube::B => Vector3::new(0.0, 0.0, self.offset),
        }
    }

    pub fn half(&self, cube: Cube) -> f64 {
        0.5 * match cube {
            Cube::A => self.edge_a,
            Cube::B => self.edge_b,
        }
    }

    pub fn is_excluded(&self, cube: Cube, face: Face) -> bool {
        matches!((cube, face), (Cube::A, Face::PosZ) | (Cube::B, Face::NegZ))
    }

    fn strictly_inside_cube(&self, cube: Cube, p: &Vector3<f64>) -> bool {
        let (c, h) = (self.center(cube), self.half(cube));
        (0..3).all(|k| (p[k] - c[k]).abs() < h)
    }

    /// Strictly inside the merged cavity (not on its wall).
    pub fn contains_strict(&self, p: &Vector3<f64>) -> bool {
        if self.strictly_inside_cube(Cube::A, p) || self.strictly_inside_cube(Cube::B, p) {
            return true;
        }
        // points on the internal junction planes are still interior
        let inside_closed = |cube: Cube| {
            let (c, h) = (self.center(cube), self.half(cube));
            (0..3).all(|k| (p[k] - c[k]).abs() <= h)
        };
        let lateral = |cube: Cube| {
            let (c, h) = (self.center(cube), self.half(cube));
            (0..2).all(|k| (p[k] - c[k]).abs() < h)
        };
        inside_closed(Cube::A) && inside_closed(Cube::B) && lateral(Cube::A) && lateral(Cube::B)
    }

    /// World position of a surface point.
    pub fn surface_to_world(&self, sp: &SurfacePoint) -> Vector3<f64> {
        let (c, h) = (self.center(sp.cube), self.half(sp.cube));
        let (ua, va) = sp.face.uv_axes();
        let mut p = c;
        p[sp.face.axis()] = c[sp.face.axis()] + sp.face.sign() * h;
        p[ua] = c[ua] - h + 2.0 * h * sp.u;
        p[va] = c[va] - h + 2.0 * h * sp.v;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurfacePoint {
    pub cube: Cube,
    pub face: Face,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AtlasLayout {
    pub face_px: usize,
    pub width: usize,
    pub height: usize,
    pub tiles: Vec<(Cube, Face, TileRect)>,
}

impl AtlasLayout {
    /// Two cross unfoldings side by side, cube A on the left:
    ///
    /// ```text
    ///  .  +Y  .   .     .  +Y  .   .
    /// -X  +Z +X  -Z    -X  +Z +X  -Z
    ///  .  -Y  .   .     .  -Y  .   .
    /// ```
    /// Junction faces leave their slot empty.
    pub fn cross(geom: &DoubleCube, face_px: usize) -> Self {
        assert!(face_px >= 2, "tiles need at least 2 px");
        let slots = [
            (Face::PosY, 1, 0),
            (Face::NegX, 0, 1),
            (Face::PosZ, 1, 1),
            (Face::PosX, 2, 1),
            (Face::NegZ, 3, 1),
            (Face::NegY, 1, 2),
        ];
        let mut tiles = Vec::new();
        for (ci, cube) in [Cube::A, Cube::B].into_iter().enumerate() {
            for &(face, col, row) in &slots {
                if geom.is_excluded(cube, face) {
                    continue;
                }
                tiles.push((
                    cube,
                    face,
                    TileRect {
                        x: (ci * 4 + col) * face_px,
                        y: row * face_px,
                        size: face_px,
                    },
                ));
            }
        }
        Self {
            face_px,
            width: 8 * face_px,
            height: 3 * face_px,
            tiles,
        }
    }

    pub fn tile(&self, cube: Cube, face: Face) -> Option<TileRect> {
        self.tiles
            .iter()
            .find(|(c, f, _)| *c == cube && *f == face)
            .map(|t| t.2)
    }

    /// Atlas pixels per world unit on the tiles of `cube`.
    pub fn pixels_per_unit(&self, geom: &DoubleCube, cube: Cube) -> f64 {
        (self.face_px - 1) as f64 / (2.0 * geom.half(cube))
    }
}

/// Sidecar manifest: `cube face x y size`, one tile per line.
pub fn format_layout(layout: &AtlasLayout) -> String {
    let mut out = String::new();
    for (cube, face, r) in &layout.tiles {
        let _ = writeln!(out, "{cube:?} {} {} {} {}", face.label(), r.x, r.y, r.size);
    }
    out
}

pub fn surface_to_atlas(geom: &DoubleCube, layout: &AtlasLayout, sp: &SurfacePoint) -> Result<PixelCoord, UnfoldError> {
    if geom.is_excluded(sp.cube, sp.face) {
        return Err(UnfoldError::ExcludedFace(sp.face, sp.cube));
    }
    let r = layout
        .tile(sp.cube, sp.face)
        .ok_or(UnfoldError::ExcludedFace(sp.face, sp.cube))?;
    let span = (r.size - 1) as f64;
    Ok(PixelCoord::new(r.x as f64 + sp.u * span, r.y as f64 + sp.v * span))
}

/// Inverse of [`surface_to_atlas`]; `None` marks background.
pub fn atlas_to_surface(geom: &DoubleCube, layout: &AtlasLayout, p: PixelCoord) -> Option<SurfacePoint> {
    layout.tiles.iter().find_map(|&(cube, face, r)| {
        let span = (r.size - 1) as f64;
        let (u, v) = ((p.x - r.x as f64) / span, (p.y - r.y as f64) / span);
        ((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && !geom.is_excluded(cube, face))
            .then_some(SurfacePoint { cube, face, u, v })
    })
}

/// Exit parameter of a ray leaving an axis-aligned cube, with every face
/// that attains it, plus the entry parameter.
fn slab_interval(c: &Vector3<f64>, h: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, Vec<Face>)> {
    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    let mut exits: Vec<(f64, Face)> = Vec::with_capacity(3);
    for k in 0..3 {
        let (lo, hi) = (c[k] - h, c[k] + h);
        if d[k] == 0.0 {
            if o[k] < lo || o[k] > hi {
                return None;
            }
            continue;
        }
        let (t_lo, t_hi) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
        let (near, far, far_face) = if d[k] > 0.0 {
            (t_lo, t_hi, Face::from_axis(k, true))
        } else {
            (t_hi, t_lo, Face::from_axis(k, false))
        };
        t_in = t_in.max(near);
        t_out = t_out.min(far);
        exits.push((far, far_face));
    }
    if t_in > t_out {
        return None;
    }
    let mut faces: Vec<Face> = exits.iter().filter(|e| e.0 == t_out).map(|e| e.1).collect();
    faces.sort();
    Some((t_in, t_out, faces))
}

/// Where a ray from inside the cavity first meets its wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub surface: SurfacePoint,
    pub t: f64,
    pub world: Vector3<f64>,
}

pub fn ray_hit(geom: &DoubleCube, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Result<RayHit, UnfoldError> {
    let norm = dir.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(UnfoldError::DegenerateRay);
    }
    if !geom.contains_strict(origin) {
        return Err(UnfoldError::OriginOutside);
    }
    let intervals: Vec<(Cube, f64, f64, Vec<Face>)> = [Cube::A, Cube::B]
        .into_iter()
        .filter_map(|cube| {
            slab_interval(&geom.center(cube), geom.half(cube), origin, dir).map(|(a, b, f)| (cube, a, b, f))
        })
        .collect();
    // grow the connected run of intervals that contains t = 0
    let mut end = f64::NEG_INFINITY;
    let mut owner = None;
    loop {
        let mut grown = false;
        for (i, (_, t0, t1, _)) in intervals.iter().enumerate() {
            let reachable = *t0 <= 0.0 || *t0 <= end;
            if reachable && *t1 >= 0.0 && *t1 > end {
                end = *t1;
                owner = Some(i);
                grown = true;
            }
        }
        if !grown {
            break;
        }
    }
    let oi = owner.ok_or(UnfoldError::OriginOutside)?;
    // equal exits favour cube A (first in the list)
    let oi = intervals.iter().position(|iv| iv.2 == end).unwrap_or(oi);
    let (cube, _, t, faces) = &intervals[oi];
    let face = faces[0];
    if geom.is_excluded(*cube, face) {
        return Err(UnfoldError::JunctionHit);
    }
    let world = origin + dir * *t;
    let (c, h) = (geom.center(*cube), geom.half(*cube));
    let (ua, va) = face.uv_axes();
    let uv = |a: usize| ((world[a] - (c[a] - h)) / (2.0 * h)).clamp(0.0, 1.0);
    Ok(RayHit {
        surface: SurfacePoint {
            cube: *cube,
            face,
            u: uv(ua),
            v: uv(va),
        },
        t: *t,
        world,
    })
}

pub fn ray_to_surface(
    geom: &DoubleCube,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Result<SurfacePoint, UnfoldError> {
    ray_hit(geom, origin, dir).map(|h| h.surface)
}

/// Camera placement. `rotation` maps world directions into the camera frame,
/// whose optical axis is +z.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl CameraPose {
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - position).normalize();
        let mut x = up.cross(&z);
        if x.norm() < 1e-12 {
            x = Vector3::x().cross(&z);
            if x.norm() < 1e-12 {
                x = Vector3::y().cross(&z);
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            position,
            rotation: Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]),
        }
    }

    /// World point to ideal (undistorted) pixel; `None` behind the camera.
    pub fn project(&self, k: &DistortionModel, w: &Vector3<f64>) -> Option<PixelCoord> {
        let c = self.rotation * (w - self.position);
        (c.z > 1e-9).then(|| k.denormalize(c.x / c.z, c.y / c.z))
    }

    /// Unit world direction through an ideal pixel.
    pub fn ray(&self, k: &DistortionModel, p: PixelCoord) -> Vector3<f64> {
        let (u, v) = k.normalize(p);
        (self.rotation.transpose() * Vector3::new(u, v, 1.0)).normalize()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub raster: Raster,
    pub layout: AtlasLayout,
    pub coverage: Vec<bool>,
}

/// Projects every atlas pixel into each camera that sees it and averages the
/// samples. Frames are distorted images described by `intrinsics`.
pub fn bake_atlas(
    geom: &DoubleCube,
    layout: &AtlasLayout,
    poses: &[CameraPose],
    frames: &[Raster],
    intrinsics: &DistortionModel,
) -> Atlas {
    let channels = frames.first().map_or(1, |f| f.channels());
    let (w, h) = (layout.width, layout.height);
    let cams: Vec<(&CameraPose, &Raster)> = poses.iter().zip(frames).collect();
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut values = vec![0.0; w * channels];
            let mut covered = vec![false; w];
            let mut samples: Vec<Vec<f64>> = vec![Vec::new(); channels];
            for x in 0..w {
                let Some(sp) = atlas_to_surface(geom, layout, PixelCoord::new(x as f64, y as f64)) else {
                    continue;
                };
                let world = geom.surface_to_world(&sp);
                samples.iter_mut().for_each(Vec::clear);
                for (pose, frame) in &cams {
                    let Some(ideal) = pose.project(intrinsics, &world) else {
                        continue;
                    };
                    let q = distort_point(intrinsics, ideal);
                    let Some(texel) = frame.sample_bilinear(q) else {
                        continue;
                    };
                    if !visible(geom, pose, &world) {
                        continue;
                    }
                    for (c, s) in samples.iter_mut().enumerate() {
                        s.push(texel.as_slice()[c]);
                    }
                }
                if samples[0].is_empty() {
                    continue;
                }
                covered[x] = true;
                for (c, s) in samples.iter_mut().enumerate() {
                    // sorted sum keeps the result independent of frame order
                    s.sort_by(f64::total_cmp);
                    values[x * channels + c] = s.iter().sum::<f64>() / s.len() as f64;
                }
            }
            (values, covered)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * channels);
    let mut coverage = Vec::with_capacity(w * h);
    for (v, c) in rows {
        data.extend(v);
        coverage.extend(c);
    }
    Atlas {
        raster: Raster::from_data(w, h, channels, data).expect("sized by construction"),
        layout: layout.clone(),
        coverage,
    }
}

fn visible(geom: &DoubleCube, pose: &CameraPose, world: &Vector3<f64>) -> bool {
    let d = world - pose.position;
    match ray_hit(geom, &pose.position, &d.normalize()) {
        Ok(hit) => (hit.world - world).norm() < 1e-6 * (1.0 + d.norm()),
        Err(_) => false,
    }
}
