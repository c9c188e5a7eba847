//! The per-frame motion representation: rotation, per-keypoint expression
//! offsets, translation and scale, flattened to `3K + 7` values (70 for
//! `K = 21`).
//!
//! Flattened field order is `expression (3K) | rotation (3) | translation (3)
//! | scale (1)`. Rotation angles are `(pitch, yaw, roll)` in radians and
//! compose as `R = Rx(pitch) · Ry(yaw) · Rz(roll)`, applied to row vectors
//! from the right (`x · R`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::binio::{read_f32s, read_header, read_u32, write_f32s, write_header};
use crate::error::{dim_err, invalid, Error, Result};
use crate::params::Matrix;

pub const DEFAULT_KEYPOINTS: usize = 21;
pub const DEFAULT_FPS: f32 = 25.0;
/// Denominator guard for every ratio metric.
pub const EPS_DIV: f64 = 1e-8;

const MSEQ_MAGIC: &[u8; 4] = b"MSEQ";
const MSEQ_VERSION: u32 = 1;

pub const fn motion_dim(keypoints: usize) -> usize {
    3 * keypoints + 7
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f64; 3]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        let set = Self { points };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(invalid("keypoint set is empty"));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("keypoint coordinates must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(3) {
            return Err(dim_err(format!("{} values do not form xyz triples", values.len())));
        }
        Self::new(values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionParams {
    /// (pitch, yaw, roll) in radians.
    pub rotation: [f64; 3],
    pub expression: Vec<[f64; 3]>,
    pub translation: [f64; 3],
    pub scale: f64,
}

impl MotionParams {
    pub fn neutral(keypoints: usize) -> Self {
        Self { rotation: [0.0; 3], expression: vec![[0.0; 3]; keypoints], translation: [0.0; 3], scale: 1.0 }
    }

    pub fn keypoints(&self) -> usize {
        self.expression.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(invalid(format!("scale must be positive, got {}", self.scale)));
        }
        let finite = self.rotation.iter().chain(&self.translation).all(|v| v.is_finite())
            && self.expression.iter().flatten().all(|v| v.is_finite())
            && self.scale.is_finite();
        if !finite {
            return Err(invalid("motion parameters must be finite"));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(motion_dim(self.keypoints()));
        out.extend(self.expression.iter().flatten());
        out.extend(self.rotation);
        out.extend(self.translation);
        out.push(self.scale);
        out
    }

    pub fn unflatten(values: &[f64], keypoints: usize) -> Result<Self> {
        let dim = motion_dim(keypoints);
        if values.len() != dim {
            return Err(dim_err(format!("expected {dim} values for K={keypoints}, got {}", values.len())));
        }
        let e = 3 * keypoints;
        Ok(Self {
            expression: values[..e].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            rotation: [values[e], values[e + 1], values[e + 2]],
            translation: [values[e + 3], values[e + 4], values[e + 5]],
            scale: values[e + 6],
        })
    }
}

/// `Rx(pitch) · Ry(yaw) · Rz(roll)` for row-vector right multiplication.
pub fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sp, cp) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sr, cr) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat3_mul(&mat3_mul(&rx, &ry), &rz)
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `x = S · (x_c · R + δ) + t`, per keypoint.
pub fn compose_keypoints(canonical: &KeypointSet, motion: &MotionParams) -> Result<KeypointSet> {
    if canonical.len() != motion.keypoints() {
        return Err(dim_err(format!(
            "{} canonical keypoints but {} expression offsets",
            canonical.len(),
            motion.keypoints()
        )));
    }
    canonical.validate()?;
    motion.validate()?;
    let r = rotation_matrix(motion.rotation);
    let points = canonical
        .points
        .iter()
        .zip(&motion.expression)
        .map(|(p, d)| {
            let mut out = [0.0; 3];
            for (j, o) in out.iter_mut().enumerate() {
                let rotated: f64 = (0..3).map(|k| p[k] * r[k][j]).sum();
                *o = motion.scale * (rotated + d[j]) + motion.translation[j];
            }
            out
        })
        .collect();
    Ok(KeypointSet { points })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<MotionParams>,
    pub fps: f32,
}

impl MotionSequence {
    pub fn new(frames: Vec<MotionParams>, fps: f32) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(invalid("motion sequence needs at least one frame"));
        };
        let k = first.keypoints();
        if frames.iter().any(|f| f.keypoints() != k) {
            return Err(dim_err("frames disagree on keypoint count"));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.frames.first().map_or(0, MotionParams::keypoints)
    }

    /// `T × (3K+7)` matrix in flatten order.
    pub fn to_matrix(&self) -> Matrix {
        let dim = motion_dim(self.keypoints());
        let mut m = Array2::zeros((self.len(), dim));
        for (mut row, f) in m.rows_mut().into_iter().zip(&self.frames) {
            for (dst, src) in row.iter_mut().zip(f.flatten()) {
                *dst = src;
            }
        }
        m
    }

    pub fn from_matrix(m: &Matrix, keypoints: usize, fps: f32) -> Result<Self> {
        let frames = m
            .rows()
            .into_iter()
            .map(|row| MotionParams::unflatten(&row.to_vec(), keypoints))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, fps)
    }

    pub fn write_mseq(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_mseq_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Little-endian: `"MSEQ"`, u32 version, u32 T, u32 K, f32 fps, then
    /// `T × (3K+7)` f32 values in flatten order.
    pub fn write_mseq_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, MSEQ_MAGIC, MSEQ_VERSION)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.keypoints() as u32).to_le_bytes())?;
        w.write_all(&self.fps.to_le_bytes())?;
        for f in &self.frames {
            write_f32s(w, &f.flatten())?;
        }
        Ok(())
    }

    pub fn read_mseq(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_mseq_from(&mut r)
    }

    pub fn read_mseq_from(r: &mut impl Read) -> Result<Self> {
        read_header(r, MSEQ_MAGIC, MSEQ_VERSION)?;
        let t = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let mut fps = [0u8; 4];
        r.read_exact(&mut fps)?;
        let fps = f32::from_le_bytes(fps);
        if k == 0 {
            return Err(Error::Format("MSEQ keypoint count is zero".into()));
        }
        let dim = motion_dim(k);
        let values = read_f32s(r, t * dim)?;
        let frames = values.chunks(dim).map(|c| MotionParams::unflatten(c, k)).collect::<Result<Vec<_>>>()?;
        Self::new(frames, fps)
    }

    /// One frame per line, space-separated values in flatten order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            out.push_str(&frame_line(&f.flatten()));
            out.push('\n');
        }
        out
    }
}

pub fn frame_line(values: &[f64]) -> String {
    values.iter().map(|v| format!("{}", *v as f32)).collect::<Vec<_>>().join(" ")
}

/// Per-dimension standardisation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(dim_err("mean and std lengths differ"));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid("std entries must be positive and finite"));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &Matrix) -> Result<()> {
        if m.ncols() != self.dim() {
            return Err(dim_err(format!("stats cover {} dims, data has {}", self.dim(), m.ncols())));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("zero std in normalisation stats"));
        }
        Ok(())
    }

    /// `(x - mean) / std` per column.
    pub fn normalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }

    /// Binary layout: `"NORM"`, u32 version 1, u32 dim, then `dim` f64 means
    /// and `dim` f64 standard deviations, little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, b"NORM", 1)?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for v in self.mean.iter().chain(&self.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        read_header(&mut r, b"NORM", 1)?;
        let dim = read_u32(&mut r)? as usize;
        let mut vals = Vec::with_capacity(2 * dim);
        let mut buf = [0u8; 8];
        for _ in 0..2 * dim {
            r.read_exact(&mut buf)?;
            vals.push(f64::from_le_bytes(buf));
        }
        let std = vals.split_off(dim);
        Self::new(vals, std)
    }
}

/// Temporal smoothness in `[0, 1]`:
/// `1 - mean‖Δ²x‖ / (mean‖Δx‖ + 1e-8)`, clamped, with per-frame Euclidean
/// norms over all dimensions.
pub fn smoothness(seq: &Matrix) -> Result<f64> {
    let t = seq.nrows();
    if t < 3 {
        return Err(invalid(format!("smoothness needs at least 3 frames, got {t}")));
    }
    let first: Vec<_> = (1..t).map(|i| &seq.row(i) - &seq.row(i - 1)).collect();
    let mean_first = first.iter().map(|d| d.dot(d).sqrt()).sum::<f64>() / first.len() as f64;
    let mean_second = (1..first.len())
        .map(|i| {
            let d = &first[i] - &first[i - 1];
            d.dot(&d).sqrt()
        })
        .sum::<f64>()
        / (first.len() - 1) as f64;
    Ok((1.0 - mean_second / (mean_first + EPS_DIV)).clamp(0.0, 1.0))
}

pub fn sequence_smoothness(seq: &MotionSequence) -> Result<f64> {
    smoothness(&seq.to_matrix())
}

/// Column means over all rows, used by normalisation statistics.
pub fn column_means(m: &Matrix) -> Vec<f64> {
    m.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default()
}
