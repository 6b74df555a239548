//! Seam-aware compositing of registered frames onto a flat panorama canvas.
//!
//! Each frame is placed by a linearized similarity; the placement is refined
//! by alternating a canvas-mean step with per-frame damped Gauss-Newton steps
//! that shrink pixel disagreement along seams.

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{PixelCoord, Raster};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no seam samples to optimize")]
    NoSeams,
    #[error("no frames to composite")]
    EmptyInput,
    #[error("sample falls outside frame {0}")]
    OutOfFrame(usize),
    #[error("{frames} frames but {transforms} transforms")]
    TransformCount { frames: usize, transforms: usize },
    #[error("transform of frame {0} is not invertible or not finite")]
    BadTransform(usize),
}

/// `(x, y) -> (x + r1 x - r2 y + t1, y + r2 x + r1 y + t2)`.
///
/// Parameters are additive: a refinement `d` of an initial placement `t` is
/// simply `t + d`, and `d` is what the regularizer penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SimTransform4 {
    pub r1: f64,
    pub r2: f64,
    pub t1: f64,
    pub t2: f64,
}

impl SimTransform4 {
    pub const IDENTITY: Self = Self {
        r1: 0.0,
        r2: 0.0,
        t1: 0.0,
        t2: 0.0,
    };

    pub const fn new(r1: f64, r2: f64, t1: f64, t2: f64) -> Self {
        Self { r1, r2, t1, t2 }
    }

    pub const fn translation(t1: f64, t2: f64) -> Self {
        Self::new(0.0, 0.0, t1, t2)
    }

    pub fn params(&self) -> [f64; 4] {
        [self.r1, self.r2, self.t1, self.t2]
    }

    pub fn from_params(p: [f64; 4]) -> Self {
        Self::new(p[0], p[1], p[2], p[3])
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.params().iter().map(|v| v * v).sum()
    }

    pub fn offset_by(&self, d: &SimTransform4) -> Self {
        Self::new(self.r1 + d.r1, self.r2 + d.r2, self.t1 + d.t1, self.t2 + d.t2)
    }

    pub fn minus(&self, other: &SimTransform4) -> Self {
        Self::new(
            self.r1 - other.r1,
            self.r2 - other.r2,
            self.t1 - other.t1,
            self.t2 - other.t2,
        )
    }

    pub fn apply(&self, p: PixelCoord) -> PixelCoord {
        apply_sim4(self, p)
    }

    /// Canvas position back to frame coordinates.
    pub fn apply_inverse(&self, p: PixelCoord) -> Option<PixelCoord> {
        let a = 1.0 + self.r1;
        let b = self.r2;
        let det = a * a + b * b;
        if det < 1e-12 || !det.is_finite() {
            return None;
        }
        let (dx, dy) = (p.x - self.t1, p.y - self.t2);
        Some(PixelCoord::new((a * dx + b * dy) / det, (-b * dx + a * dy) / det))
    }

    /// Least-squares fit to point pairs `frame -> canvas` (at least two).
    pub fn fit(pairs: &[(PixelCoord, PixelCoord)]) -> Option<Self> {
        if pairs.len() < 2 {
            return None;
        }
        let mut ata = Matrix4::<f64>::zeros();
        let mut atb = Vector4::<f64>::zeros();
        for (s, d) in pairs {
            // unknowns (1 + r1, r2, t1, t2)
            let rows = [
                (Vector4::new(s.x, -s.y, 1.0, 0.0), d.x),
                (Vector4::new(s.y, s.x, 0.0, 1.0), d.y),
            ];
            for (row, rhs) in rows {
                ata += row * row.transpose();
                atb += row * rhs;
            }
        }
        let x = ata.lu().solve(&atb)?;
        let t = Self::new(x[0] - 1.0, x[1], x[2], x[3]);
        t.is_finite().then_some(t)
    }
}

pub fn apply_sim4(t: &SimTransform4, p: PixelCoord) -> PixelCoord {
    PixelCoord::new(
        p.x + t.r1 * p.x - t.r2 * p.y + t.t1,
        p.y + t.r2 * p.x + t.r1 * p.y + t.t2,
    )
}

/// One seam evaluation site shared by two frames.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeamSample {
    pub canvas_pos: PixelCoord,
    pub frame_i: usize,
    pub frame_j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    Uniform,
    /// Weight grows with distance to the nearer frame border, saturating at
    /// `feather_px`.
    Feather,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeConfig {
    /// Dilation (in pixels) of the seam map into the overlap region.
    pub seam_band: usize,
    pub weight_mode: WeightMode,
    pub feather_px: f64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self {
            seam_band: 2,
            weight_mode: WeightMode::Uniform,
            feather_px: 8.0,
        }
    }
}

/// Panorama grid. Canvas pixel `(x, y)` sits at canvas coordinate
/// `(origin.0 + x, origin.1 + y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub origin: (i64, i64),
    pub grid: Raster,
    pub contributors: Vec<Vec<usize>>,
    pub seam_map: Vec<bool>,
}

impl Canvas {
    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn canvas_coord(&self, x: usize, y: usize) -> PixelCoord {
        PixelCoord::new((self.origin.0 + x as i64) as f64, (self.origin.1 + y as i64) as f64)
    }

    pub fn covered(&self, x: usize, y: usize) -> bool {
        !self.contributors[y * self.width() + x].is_empty()
    }

    pub fn seam_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width();
        self.seam_map
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(move |(i, _)| (i % w, i / w))
    }
}

fn check_counts(frames: &[Raster], transforms: &[SimTransform4]) -> Result<(), FusionError> {
    if frames.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    if frames.len() != transforms.len() {
        return Err(FusionError::TransformCount {
            frames: frames.len(),
            transforms: transforms.len(),
        });
    }
    for (i, t) in transforms.iter().enumerate() {
        if !t.is_finite() || t.apply_inverse(PixelCoord::new(0.0, 0.0)).is_none() {
            return Err(FusionError::BadTransform(i));
        }
    }
    Ok(())
}

fn frame_point(frame: &Raster, t: &SimTransform4, p: PixelCoord) -> Option<PixelCoord> {
    let q = t.apply_inverse(p)?;
    frame.contains(q).then_some(q)
}

/// Places every frame on a common canvas and averages overlapping samples.
pub fn composite(
    frames: &[Raster],
    transforms: &[SimTransform4],
    cfg: &CompositeConfig,
) -> Result<Canvas, FusionError> {
    check_counts(frames, transforms)?;
    let channels = frames[0].channels();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (f, t) in frames.iter().zip(transforms) {
        let (w, h) = ((f.width() - 1) as f64, (f.height() - 1) as f64);
        for c in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let p = t.apply(PixelCoord::new(c.0, c.1));
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
    }
    // snap to the integer lattice; tolerate round-off on exact placements
    let snap_lo = |v: f64| (v - 1e-9).ceil() as i64;
    let snap_hi = |v: f64| (v + 1e-9).floor() as i64;
    let origin = (snap_lo(x0), snap_lo(y0));
    let width = (snap_hi(x1) - origin.0 + 1).max(1) as usize;
    let height = (snap_hi(y1) - origin.1 + 1).max(1) as usize;

    let rows: Vec<(Vec<f64>, Vec<Vec<usize>>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut values = vec![0.0; width * channels];
            let mut contrib = vec![Vec::new(); width];
            for x in 0..width {
                let p = PixelCoord::new((origin.0 + x as i64) as f64, (origin.1 + y as i64) as f64);
                let mut acc = [0.0; 3];
                for (k, (f, t)) in frames.iter().zip(transforms).enumerate() {
                    if let Some(q) = frame_point(f, t, p) {
                        for (c, a) in acc.iter_mut().enumerate().take(channels) {
                            *a += f.sample_channel(q, c).unwrap_or(0.0);
                        }
                        contrib[x].push(k);
                    }
                }
                let n = contrib[x].len();
                if n > 0 {
                    for c in 0..channels {
                        values[x * channels + c] = acc[c] / n as f64;
                    }
                }
            }
            (values, contrib)
        })
        .collect();
    let mut data = Vec::with_capacity(width * height * channels);
    let mut contributors = Vec::with_capacity(width * height);
    for (v, c) in rows {
        data.extend(v);
        contributors.extend(c);
    }
    let grid = Raster::from_data(width, height, channels, data).expect("sized by construction");
    let seam_map = seam_map(width, height, &contributors, cfg.seam_band);
    Ok(Canvas {
        origin,
        grid,
        contributors,
        seam_map,
    })
}

/// Overlap pixels where the contributor count changes, dilated by `band`
/// inside the overlap.
fn seam_map(width: usize, height: usize, contributors: &[Vec<usize>], band: usize) -> Vec<bool> {
    let count = |x: isize, y: isize| -> usize {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            0
        } else {
            contributors[y as usize * width + x as usize].len()
        }
    };
    let mut seam = vec![false; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let n = count(x, y);
            if n < 2 {
                continue;
            }
            let differs = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| count(x + dx, y + dy) != n);
            seam[y as usize * width + x as usize] = differs;
        }
    }
    for _ in 0..band {
        let prev = seam.clone();
        for y in 0..height as isize {
            for x in 0..width as isize {
                let i = y as usize * width + x as usize;
                if prev[i] || count(x, y) < 2 {
                    continue;
                }
                seam[i] = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0
                        && ny >= 0
                        && nx < width as isize
                        && ny < height as isize
                        && prev[ny as usize * width + nx as usize]
                });
            }
        }
    }
    seam
}

fn border_distance(frame: &Raster, q: PixelCoord) -> f64 {
    let (w, h) = ((frame.width() - 1) as f64, (frame.height() - 1) as f64);
    q.x.min(q.y).min(w - q.x).min(h - q.y).max(0.0)
}

/// Seam samples for every contributor pair on the canvas seam map.
pub fn seam_samples(
    canvas: &Canvas,
    frames: &[Raster],
    transforms: &[SimTransform4],
    cfg: &CompositeConfig,
) -> Vec<SeamSample> {
    let mut out = Vec::new();
    for (x, y) in canvas.seam_pixels() {
        let list = &canvas.contributors[y * canvas.width() + x];
        let p = canvas.canvas_coord(x, y);
        for (a, &i) in list.iter().enumerate() {
            for &j in &list[a + 1..] {
                let weight = match cfg.weight_mode {
                    WeightMode::Uniform => 1.0,
                    WeightMode::Feather => {
                        let d = |k: usize| {
                            transforms[k]
                                .apply_inverse(p)
                                .map_or(0.0, |q| border_distance(&frames[k], q))
                        };
                        (d(i).min(d(j)) / cfg.feather_px.max(1e-9)).min(1.0)
                    }
                };
                out.push(SeamSample {
                    canvas_pos: p,
                    frame_i: i,
                    frame_j: j,
                    weight,
                });
            }
        }
    }
    out
}

/// Seam objective together with its variables.
#[derive(Debug, Clone)]
pub struct FusionProblem {
    /// Grayscale frames.
    pub frames: Vec<Raster>,
    pub init_transforms: Vec<SimTransform4>,
    /// Current placements; start equal to `init_transforms`.
    pub transforms: Vec<SimTransform4>,
    pub seams: Vec<SeamSample>,
    pub beta: f64,
    pub canvas_origin: (i64, i64),
    /// Per-canvas-pixel consensus values `c`.
    pub canvas_values: Raster,
}

impl FusionProblem {
    /// Builds the problem from a composite of grayscale `frames` at `init`.
    pub fn new(
        frames: Vec<Raster>,
        init: Vec<SimTransform4>,
        beta: f64,
        cfg: &CompositeConfig,
    ) -> Result<Self, FusionError> {
        let canvas = composite(&frames, &init, cfg)?;
        let seams = seam_samples(&canvas, &frames, &init, cfg);
        Ok(Self {
            transforms: init.clone(),
            init_transforms: init,
            seams,
            beta: beta.max(0.0),
            canvas_origin: canvas.origin,
            canvas_values: canvas.grid,
            frames,
        })
    }

    fn sample(&self, k: usize, t: &SimTransform4, p: PixelCoord) -> Option<(f64, PixelCoord, f64, f64)> {
        let q = frame_point(&self.frames[k], t, p)?;
        let (v, gx, gy) = self.frames[k].sample_with_gradient(q, 0)?;
        Some((v, q, gx, gy))
    }

    fn seam_residual_with(&self, s: &SeamSample, ti: &SimTransform4, tj: &SimTransform4) -> Option<f64> {
        let (gi, ..) = self.sample(s.frame_i, ti, s.canvas_pos)?;
        let (gj, ..) = self.sample(s.frame_j, tj, s.canvas_pos)?;
        Some(gi - gj)
    }
}

/// `|g_i - g_j|` at a seam sample under the current placements.
pub fn seam_error(problem: &FusionProblem, s: &SeamSample) -> Result<f64, FusionError> {
    let t = &problem.transforms;
    problem
        .sample(s.frame_i, &t[s.frame_i], s.canvas_pos)
        .ok_or(FusionError::OutOfFrame(s.frame_i))
        .and_then(|(gi, ..)| {
            problem
                .sample(s.frame_j, &t[s.frame_j], s.canvas_pos)
                .ok_or(FusionError::OutOfFrame(s.frame_j))
                .map(|(gj, ..)| (gi - gj).abs())
        })
}

/// Derivative of a frame sample w.r.t. that frame's `(r1, r2, t1, t2)`.
///
/// With `A = [[1 + r1, -r2], [r2, 1 + r1]]` and `q = A^-1 (p - t)`:
/// `dq/dt = -A^-1`, `dq/dr1 = -A^-1 q`, `dq/dr2 = -A^-1 J q` where `J` is the
/// quarter turn.
fn sample_jacobian(t: &SimTransform4, q: PixelCoord, gx: f64, gy: f64) -> [f64; 4] {
    let a = 1.0 + t.r1;
    let b = t.r2;
    let det = a * a + b * b;
    let inv = |vx: f64, vy: f64| ((a * vx + b * vy) / det, (-b * vx + a * vy) / det);
    let dr1 = inv(q.x, q.y);
    let dr2 = inv(-q.y, q.x);
    let dt1 = inv(1.0, 0.0);
    let dt2 = inv(0.0, 1.0);
    [dr1, dr2, dt1, dt2].map(|(dx, dy)| -(gx * dx + gy * dy))
}

/// Signed seam residual `g_i - g_j` and its gradients w.r.t. the parameters
/// of frame i and frame j.
pub fn seam_residual_jacobian(problem: &FusionProblem, s: &SeamSample) -> Option<(f64, [f64; 4], [f64; 4])> {
    let ti = &problem.transforms[s.frame_i];
    let tj = &problem.transforms[s.frame_j];
    let (gi, qi, gxi, gyi) = problem.sample(s.frame_i, ti, s.canvas_pos)?;
    let (gj, qj, gxj, gyj) = problem.sample(s.frame_j, tj, s.canvas_pos)?;
    let ji = sample_jacobian(ti, qi, gxi, gyi);
    let jj = sample_jacobian(tj, qj, gxj, gyj).map(|v| -v);
    Some((gi - gj, ji, jj))
}

fn seam_term(problem: &FusionProblem, s: &SeamSample, ti: &SimTransform4, tj: &SimTransform4) -> f64 {
    problem.seam_residual_with(s, ti, tj).map_or(0.0, |r| s.weight * r * r)
}

/// `sum w e^2 + beta * sum |T_k - T_k^init|^2`; out-of-frame samples count 0.
pub fn eloss(problem: &FusionProblem) -> f64 {
    let t = &problem.transforms;
    let seam: f64 = problem
        .seams
        .iter()
        .map(|s| seam_term(problem, s, &t[s.frame_i], &t[s.frame_j]))
        .sum();
    seam + problem.beta * regularizer(problem)
}

/// Weighted squared seam error alone.
pub fn seam_loss(problem: &FusionProblem) -> f64 {
    eloss(problem) - problem.beta * regularizer(problem)
}

fn regularizer(problem: &FusionProblem) -> f64 {
    problem
        .transforms
        .iter()
        .zip(&problem.init_transforms)
        .map(|(t, i)| t.minus(i).norm_sq())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub max_rounds: usize,
    /// Relative loss decrease below which the rounds stop.
    pub tol: f64,
    pub initial_damping: f64,
    pub max_retries: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            tol: 1e-4,
            initial_damping: 1e-3,
            max_retries: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub transforms: Vec<SimTransform4>,
    pub canvas_origin: (i64, i64),
    pub canvas_values: Raster,
    /// `eloss` before the first round and after each round.
    pub loss_trace: Vec<f64>,
    pub accepted_steps: usize,
}

/// Recomputes `c` as the mean of every covering frame's sample.
fn c_step(problem: &mut FusionProblem) {
    let (w, h) = (problem.canvas_values.width(), problem.canvas_values.height());
    let origin = problem.canvas_origin;
    let p = &*problem;
    let data: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let pos = PixelCoord::new((origin.0 + x as i64) as f64, (origin.1 + y as i64) as f64);
                let (mut sum, mut n) = (0.0, 0usize);
                for (k, t) in p.transforms.iter().enumerate() {
                    if let Some((v, ..)) = p.sample(k, t, pos) {
                        sum += v;
                        n += 1;
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            })
        })
        .collect();
    problem.canvas_values = Raster::from_data(w, h, 1, data).expect("same shape");
}

/// Loss terms that depend on frame `k` when it takes placement `tk`.
fn local_loss(problem: &FusionProblem, k: usize, seams: &[usize], tk: &SimTransform4) -> f64 {
    let t = &problem.transforms;
    let pick = |f: usize| if f == k { tk } else { &t[f] };
    let seam: f64 = seams
        .iter()
        .map(|&si| {
            let s = &problem.seams[si];
            seam_term(problem, s, pick(s.frame_i), pick(s.frame_j))
        })
        .sum();
    seam + problem.beta * tk.minus(&problem.init_transforms[k]).norm_sq()
}

fn normal_equations(problem: &FusionProblem, k: usize, seams: &[usize]) -> (Matrix4<f64>, Vector4<f64>) {
    let mut jtj = Matrix4::zeros();
    let mut jtr = Vector4::zeros();
    for &si in seams {
        let s = &problem.seams[si];
        let Some((r, ji, jj)) = seam_residual_jacobian(problem, s) else {
            continue;
        };
        let j = Vector4::from(if s.frame_i == k { ji } else { jj });
        jtj += s.weight * j * j.transpose();
        jtr += s.weight * r * j;
    }
    let d = Vector4::from(problem.transforms[k].minus(&problem.init_transforms[k]).params());
    jtj += Matrix4::identity() * problem.beta;
    jtr += d * problem.beta;
    (jtj, jtr)
}

/// Alternates the canvas-mean step with one damped Gauss-Newton update per
/// frame until the relative loss decrease falls below `cfg.tol`.
pub fn optimize_alternating(problem: &mut FusionProblem, cfg: &FusionConfig) -> Result<FusionResult, FusionError> {
    if problem.seams.is_empty() {
        return Err(FusionError::NoSeams);
    }
    let n = problem.frames.len();
    let mut by_frame: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (si, s) in problem.seams.iter().enumerate() {
        by_frame[s.frame_i].push(si);
        by_frame[s.frame_j].push(si);
    }
    let mut damping = vec![cfg.initial_damping; n];
    let mut loss = eloss(problem);
    let mut trace = vec![loss];
    let mut accepted_steps = 0;

    for _ in 0..cfg.max_rounds {
        if loss == 0.0 {
            break;
        }
        c_step(problem);
        for k in 0..n {
            let (jtj, jtr) = normal_equations(problem, k, &by_frame[k]);
            let current = local_loss(problem, k, &by_frame[k], &problem.transforms[k]);
            let diag_floor = 1e-12 * (1.0 + jtj.trace());
            for _ in 0..=cfg.max_retries {
                let mut lhs = jtj;
                for d in 0..4 {
                    lhs[(d, d)] += damping[k] * jtj[(d, d)].max(diag_floor);
                }
                let step = lhs.cholesky().map(|c| c.solve(&(-jtr)));
                if let Some(step) = step.filter(|s| s.iter().all(|v| v.is_finite())) {
                    let cand = problem.transforms[k]
                        .offset_by(&SimTransform4::from_params([step[0], step[1], step[2], step[3]]));
                    if cand.apply_inverse(PixelCoord::new(0.0, 0.0)).is_some()
                        && local_loss(problem, k, &by_frame[k], &cand) < current
                    {
                        problem.transforms[k] = cand;
                        damping[k] = (damping[k] * 0.5).max(1e-9);
                        accepted_steps += 1;
                        break;
                    }
                }
                damping[k] *= 2.0;
            }
        }
        let next = eloss(problem);
        trace.push(next);
        let rel = (loss - next) / loss;
        loss = next;
        if rel < cfg.tol {
            break;
        }
    }
    c_step(problem);
    Ok(FusionResult {
        transforms: problem.transforms.clone(),
        canvas_origin: problem.canvas_origin,
        canvas_values: problem.canvas_values.clone(),
        loss_trace: trace,
        accepted_steps,
    })
}

/// Loss trace as plain text, one value per line.
pub fn format_loss_trace(trace: &[f64]) -> String {
    trace.iter().map(|v| format!("{v:.12e}\n")).collect()
}


#[cfg(test)]
mod tests {
    use super::test_scenes::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn apply_examples() {
        let p = PixelCoord::new(3.0, 4.0);
        assert_eq!(apply_sim4(&SimTransform4::IDENTITY, p), p);
        assert_eq!(
            apply_sim4(&SimTransform4::translation(2.0, -1.0), PixelCoord::new(0.0, 0.0)),
            PixelCoord::new(2.0, -1.0)
        );
        let q = apply_sim4(&SimTransform4::new(0.1, 0.2, 0.0, 0.0), PixelCoord::new(10.0, 0.0));
        assert!((q.x - 11.0).abs() < 1e-12 && (q.y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        let t = SimTransform4::new(0.05, -0.12, 7.5, -3.25);
        let p = PixelCoord::new(13.0, -8.5);
        let back = t.apply_inverse(t.apply(p)).unwrap();
        assert!(back.dist(p) < 1e-12);
        assert!(SimTransform4::new(-1.0, 0.0, 0.0, 0.0).apply_inverse(p).is_none());
    }

    #[test]
    fn fit_recovers_exact_similarity() {
        let t = SimTransform4::new(-0.03, 0.08, 12.0, -4.0);
        let pairs: Vec<_> = [(0.0, 0.0), (50.0, 3.0), (7.0, 40.0)]
            .iter()
            .map(|&(x, y)| {
                let p = PixelCoord::new(x, y);
                (p, t.apply(p))
            })
            .collect();
        let f = SimTransform4::fit(&pairs).unwrap();
        for (a, b) in f.params().iter().zip(t.params()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn two_frame_problem(w: usize, h: usize, true_dx: f64, true_dy: f64, model_dx: f64, beta: f64) -> FusionProblem {
        let f0 = frame_at(w, h, 0.0, 0.0);
        let f1 = frame_at(w, h, true_dx, true_dy);
        FusionProblem::new(
            vec![f0, f1],
            vec![SimTransform4::IDENTITY, SimTransform4::translation(model_dx, 0.0)],
            beta,
            &CompositeConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn constant_frames_have_zero_seam_error() {
        let a = Raster::filled(20, 20, 1, 100.0);
        let b = Raster::filled(20, 20, 1, 90.0);
        let p = FusionProblem::new(
            vec![a.clone(), a.clone()],
            vec![SimTransform4::IDENTITY, SimTransform4::translation(10.0, 0.0)],
            0.0,
            &CompositeConfig::default(),
        )
        .unwrap();
        assert!(!p.seams.is_empty());
        assert!(p.seams.iter().all(|s| seam_error(&p, s).unwrap() == 0.0));
        let q = FusionProblem::new(
            vec![a, b],
            vec![SimTransform4::IDENTITY, SimTransform4::translation(10.0, 0.0)],
            0.0,
            &CompositeConfig::default(),
        )
        .unwrap();
        assert!(q
            .seams
            .iter()
            .all(|s| (seam_error(&q, s).unwrap() - 10.0).abs() < 1e-12));
    }

    #[test]
    fn gradient_frames_under_one_pixel_shift() {
        // I(x, y) = 3x + 2y + 0.5xy is reproduced exactly by bilinear sampling
        let g = |x: f64, y: f64| 3.0 * x + 2.0 * y + 0.5 * x * y;
        let f0 = Raster::from_fn_gray(30, 20, |x, y| g(x as f64, y as f64));
        let f1 = Raster::from_fn_gray(30, 20, |x, y| g(x as f64 + 1.0, y as f64));
        let p = FusionProblem::new(
            vec![f0, f1],
            vec![SimTransform4::IDENTITY, SimTransform4::translation(10.0, 0.0)],
            0.0,
            &CompositeConfig::default(),
        )
        .unwrap();
        for s in &p.seams {
            let (x, y) = (s.canvas_pos.x, s.canvas_pos.y);
            // frame 1 sample at canvas x sees texture x - 10 + 1
            let expect = (g(x, y) - g(x - 9.0, y)).abs();
            assert!((seam_error(&p, s).unwrap() - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_frame_is_reported() {
        let mut p = two_frame_problem(20, 20, 10.0, 0.0, 10.0, 0.0);
        p.transforms[1] = SimTransform4::translation(100.0, 0.0);
        let s = p.seams[0];
        assert_eq!(seam_error(&p, &s), Err(FusionError::OutOfFrame(1)));
    }

    #[test]
    fn eloss_examples() {
        let a = Raster::filled(8, 8, 1, 100.0);
        let mut p = FusionProblem::new(
            vec![a.clone()],
            vec![SimTransform4::IDENTITY],
            0.1,
            &CompositeConfig::default(),
        )
        .unwrap();
        assert!(p.seams.is_empty());
        assert_eq!(eloss(&p), 0.0);

        p.frames.push(Raster::filled(8, 8, 1, 102.0));
        p.init_transforms.push(SimTransform4::IDENTITY);
        p.transforms = vec![SimTransform4::translation(1.0, 0.0), SimTransform4::IDENTITY];
        p.seams = vec![SeamSample {
            canvas_pos: PixelCoord::new(3.0, 3.0),
            frame_i: 0,
            frame_j: 1,
            weight: 1.0,
        }];
        assert!((eloss(&p) - 4.1).abs() < 1e-12);
    }

    #[test]
    fn eloss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = two_frame_problem(40, 30, 17.0, 0.4, 17.0, 0.37);
        for s in p.seams.iter_mut() {
            s.weight = rng.random_range(0.0..2.0);
        }
        p.transforms[0] = SimTransform4::new(0.001, -0.002, 0.3, -0.1);
        p.transforms[1] = p.init_transforms[1].offset_by(&SimTransform4::new(0.0, 0.001, -0.2, 0.25));

        // independent evaluation: invert the 2x2 explicitly
        let mut expect = 0.0;
        for s in &p.seams {
            let mut g = [0.0; 2];
            let mut ok = true;
            for (slot, k) in [s.frame_i, s.frame_j].into_iter().enumerate() {
                let t = p.transforms[k];
                let m = nalgebra::Matrix2::new(1.0 + t.r1, -t.r2, t.r2, 1.0 + t.r1);
                let q = m.try_inverse().unwrap() * nalgebra::Vector2::new(s.canvas_pos.x - t.t1, s.canvas_pos.y - t.t2);
                match p.frames[k].sample_channel(PixelCoord::new(q.x, q.y), 0) {
                    Some(v) => g[slot] = v,
                    None => ok = false,
                }
            }
            if ok {
                expect += s.weight * (g[0] - g[1]).powi(2);
            }
        }
        for (t, i) in p.transforms.iter().zip(&p.init_transforms) {
            let d = [t.r1 - i.r1, t.r2 - i.r2, t.t1 - i.t1, t.t2 - i.t2];
            expect += 0.37 * d.iter().map(|v| v * v).sum::<f64>();
        }
        assert!((eloss(&p) - expect).abs() < 1e-12 * (1.0 + expect));
    }

    #[test]
    fn jacobian_matches_finite_differences_on_bilinear_exact_frames() {
        let g0 = |x: f64, y: f64| 40.0 + 2.0 * x + 1.5 * y + 0.05 * x * y;
        let g1 = |x: f64, y: f64| 200.0 - 1.0 * x + 2.5 * y - 0.03 * x * y;
        let f0 = Raster::from_fn_gray(60, 50, |x, y| g0(x as f64, y as f64));
        let f1 = Raster::from_fn_gray(60, 50, |x, y| g1(x as f64, y as f64));
        let mut p = FusionProblem::new(
            vec![f0, f1],
            vec![SimTransform4::IDENTITY, SimTransform4::translation(20.0, 5.0)],
            0.0,
            &CompositeConfig {
                seam_band: 6,
                ..Default::default()
            },
        )
        .unwrap();
        p.transforms[0] = SimTransform4::new(0.01, 0.02, 0.5, -0.25);
        p.transforms[1] = SimTransform4::new(-0.015, 0.01, 20.3, 5.1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < 50 {
            let s = p.seams[rng.random_range(0..p.seams.len())];
            let Some((r, ji, jj)) = seam_residual_jacobian(&p, &s) else {
                continue;
            };
            if r.abs() < 1e-3 {
                continue;
            }
            for (k, jac) in [(s.frame_i, ji), (s.frame_j, jj)] {
                for d in 0..4 {
                    let eval = |delta: f64| {
                        let mut q = p.clone();
                        let mut prm = q.transforms[k].params();
                        prm[d] += delta;
                        q.transforms[k] = SimTransform4::from_params(prm);
                        seam_error(&q, &s).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = r.signum() * jac[d];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
            checked += 1;
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn perfect_mosaic_stays_put() {
        let mut p = two_frame_problem(40, 30, 20.0, 0.0, 20.0, 0.1);
        let res = optimize_alternating(&mut p, &FusionConfig::default()).unwrap();
        assert_eq!(res.loss_trace, vec![0.0]);
        assert_eq!(res.accepted_steps, 0);
        assert_eq!(res.transforms, p.init_transforms);
    }

    #[test]
    fn recovers_unmodeled_offset() {
        let (dx, dy) = (1.5, -0.75);
        let mut p = two_frame_problem(64, 48, 30.0 + dx, dy, 30.0, 1e-3);
        let seam0 = seam_loss(&p);
        let res = optimize_alternating(&mut p, &FusionConfig::default()).unwrap();
        assert!(res.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        // where frame 1's centre lands in frame 0 coordinates
        let c = PixelCoord::new(32.0, 24.0);
        let in0 = res.transforms[0].apply_inverse(res.transforms[1].apply(c)).unwrap();
        let (ex, ey) = (c.x + 30.0 + dx, c.y + dy);
        assert!((in0.x - ex).abs() < 0.05 && (in0.y - ey).abs() < 0.05, "{in0:?}");
        assert!(seam_loss(&p) <= 0.01 * seam0, "{} vs {seam0}", seam_loss(&p));
    }

    #[test]
    fn no_seams_is_an_error() {
        let mut p = FusionProblem::new(
            vec![Raster::filled(5, 5, 1, 1.0)],
            vec![SimTransform4::IDENTITY],
            0.0,
            &CompositeConfig::default(),
        )
        .unwrap();
        assert!(matches!(
            optimize_alternating(&mut p, &FusionConfig::default()),
            Err(FusionError::NoSeams)
        ));
    }

    #[test]
    fn single_frame_canvas_equals_frame() {
        let f = frame_at(23, 17, 3.0, 1.0);
        let c = composite(
            std::slice::from_ref(&f),
            &[SimTransform4::IDENTITY],
            &CompositeConfig::default(),
        )
        .unwrap();
        assert_eq!(c.origin, (0, 0));
        assert_eq!(c.grid, f);
        assert!(c.seam_map.iter().all(|s| !s));
    }

    #[test]
    fn half_overlap_constant_frames() {
        let f = Raster::filled(20, 10, 1, 77.0);
        let c = composite(
            &[f.clone(), f],
            &[SimTransform4::IDENTITY, SimTransform4::translation(10.0, 0.0)],
            &CompositeConfig {
                seam_band: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((c.width(), c.height()), (30, 10));
        assert!(c.grid.data().iter().all(|&v| v == 77.0));
        for y in 0..10 {
            for x in 0..30 {
                let expect = (x == 10 || x == 19) || ((10..20).contains(&x) && (y == 0 || y == 9));
                assert_eq!(c.seam_map[y * 30 + x], expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn cylinder_loop_reproduces_texture() {
        // eight views around an unrolled cylinder, placed at their true offsets
        let (w, h, step) = (48, 40, 30.25);
        let frames: Vec<Raster> = (0..8).map(|i| frame_at(w, h, i as f64 * step, 0.0)).collect();
        let ts: Vec<SimTransform4> = (0..8)
            .map(|i| SimTransform4::translation(i as f64 * step, 0.0))
            .collect();
        let c = composite(&frames, &ts, &CompositeConfig::default()).unwrap();
        let (mut err, mut n) = (0.0, 0);
        for y in 0..c.height() {
            for x in 0..c.width() {
                if c.covered(x, y) {
                    let p = c.canvas_coord(x, y);
                    err += (c.grid.get(x, y, 0) - texture(p.x, p.y)).abs();
                    n += 1;
                }
            }
        }
        let mae = err / n as f64;
        assert!(mae < 3.0, "{mae}");
    }

    #[test]
    fn gauge_translation_leaves_seams_unchanged() {
        let mut p = two_frame_problem(40, 30, 20.7, 0.3, 20.0, 0.0);
        let before: Vec<f64> = p.seams.iter().map(|s| seam_error(&p, s).unwrap()).collect();
        for t in p.transforms.iter_mut() {
            *t = t.offset_by(&SimTransform4::translation(5.0, -2.0));
        }
        for s in p.seams.iter_mut() {
            s.canvas_pos = PixelCoord::new(s.canvas_pos.x + 5.0, s.canvas_pos.y - 2.0);
        }
        for (s, b) in p.seams.iter().zip(before) {
            assert!((seam_error(&p, s).unwrap() - b).abs() < 1e-9);
        }
    }
}
