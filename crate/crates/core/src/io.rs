//! File formats: shape models and fit parameters as JSON, cameras as JSON,
//! landmarks as CSV (`id,u,v,confidence`), point clouds and meshes as ASCII
//! PLY, trajectories and 2D line annotations as JSON.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraView, Vec3};
use crate::optimize::LandmarkObservation;
use crate::planning::{ClearanceReport, Segment2, Trajectory};
use crate::ssm::{Annotations, ShapeModel, Side, SsmError, MODEL_FORMAT_VERSION};
use nalgebra::DMatrix;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: unsupported model format version {found} (expected {MODEL_FORMAT_VERSION})")]
    Version { path: String, found: u32 },
    #[error("{path}: {source}")]
    Model {
        path: String,
        #[source]
        source: SsmError,
    },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    region_label: String,
    mean_points: Vec<Vec3>,
    /// One entry per mode, each of length `3N`.
    modes: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
    annotations: Annotations,
    faces: Vec<[usize; 3]>,
}

pub fn write_model(path: &Path, model: &ShapeModel) -> Result<(), IoError> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        region_label: model.region_label.clone(),
        mean_points: model.mean_points.clone(),
        modes: model.basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
        eigenvalues: model.eigenvalues.clone(),
        total_variance: model.total_variance,
        annotations: model.annotations.clone(),
        faces: model.faces.clone(),
    };
    write_json(path, &file)
}

pub fn read_model(path: &Path) -> Result<ShapeModel, IoError> {
    let file: ModelFile = read_json(path)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(IoError::Version {
            path: path.display().to_string(),
            found: file.format_version,
        });
    }
    let rows = 3 * file.mean_points.len();
    if let Some(bad) = file.modes.iter().position(|m| m.len() != rows) {
        return Err(parse_err(path, format!("mode {bad} has the wrong length (expected {rows})")));
    }
    let flat: Vec<f64> = file.modes.iter().flatten().copied().collect();
    let model = ShapeModel {
        region_label: file.region_label,
        basis: DMatrix::from_vec(rows, file.modes.len(), flat),
        mean_points: file.mean_points,
        eigenvalues: file.eigenvalues,
        total_variance: file.total_variance,
        annotations: file.annotations,
        faces: file.faces,
    };
    model.validate().map_err(|source| IoError::Model {
        path: path.display().to_string(),
        source,
    })?;
    Ok(model)
}

pub fn read_camera(path: &Path) -> Result<CameraView, IoError> {
    let cam: CameraView = read_json(path)?;
    cam.validate().map_err(|e| parse_err(path, e))?;
    Ok(cam)
}

pub fn write_camera(path: &Path, cam: &CameraView) -> Result<(), IoError> {
    write_json(path, cam)
}

pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkObservation>, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| parse_err(path, e)))
        .collect()
}

pub fn write_landmarks(path: &Path, landmarks: &[LandmarkObservation]) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for l in landmarks {
        writer.serialize(l).map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

/// ASCII PLY with float vertices and optional triangle faces.
pub fn write_ply(path: &Path, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<(), IoError> {
    let mut s = String::with_capacity(32 * (vertices.len() + faces.len()) + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", vertices.len()));
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if !faces.is_empty() {
        s.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\n", faces.len()));
    }
    s.push_str("end_header\n");
    for v in vertices {
        s.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for f in faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_ply(path: &Path) -> Result<(Vec<Vec3>, Vec<[usize; 3]>), IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |m: &str| parse_err(path, m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' magic"));
    }
    let (mut nv, mut nf) = (0usize, 0usize);
    let mut vertex_props = 0usize;
    let mut current = "";
    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated header"))?.trim();
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(bad("only ASCII PLY is supported")),
            ["element", "vertex", n] => {
                nv = n.parse().map_err(|_| bad("bad vertex count"))?;
                current = "vertex";
            }
            ["element", "face", n] => {
                nf = n.parse().map_err(|_| bad("bad face count"))?;
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", ..] if current == "vertex" => vertex_props += 1,
            ["end_header"] => break,
            _ => {}
        }
    }
    if nv > 0 && vertex_props < 3 {
        return Err(bad("vertices need x, y, z properties"));
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad vertex coordinate"))?;
        if v.len() < 3 {
            return Err(bad("vertex line has fewer than 3 values"));
        }
        vertices.push(Vec3::new(v[0], v[1], v[2]));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = lines.next().ok_or_else(|| bad("truncated face list"))?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad face index"))?;
        if idx.first() != Some(&3) || idx.len() != 4 {
            return Err(bad("only triangle faces are supported"));
        }
        if idx[1..].iter().any(|&i| i >= nv) {
            return Err(bad("face index out of range"));
        }
        faces.push([idx[1], idx[2], idx[3]]);
    }
    Ok((vertices, faces))
}

/// One planned trajectory with its optional clearance check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub side: Side,
    pub entry: Vec3,
    pub target: Vec3,
    pub diameter: f64,
    pub clearance_mm: Option<f64>,
    pub clearance_threshold_mm: Option<f64>,
    pub breach: Option<bool>,
}

impl TrajectoryRecord {
    pub fn new(t: &Trajectory, clearance: Option<&ClearanceReport>) -> Self {
        Self {
            side: t.side,
            entry: t.entry,
            target: t.target,
            diameter: t.diameter,
            clearance_mm: clearance.map(|c| c.min_axis_distance),
            clearance_threshold_mm: clearance.map(|c| c.threshold),
            breach: clearance.map(|c| c.breach),
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            side: self.side,
            entry: self.entry,
            target: self.target,
            diameter: self.diameter,
        }
    }
}

pub fn write_trajectories(path: &Path, records: &[TrajectoryRecord]) -> Result<(), IoError> {
    write_json(path, records)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    let records: Vec<TrajectoryRecord> = read_json(path)?;
    for r in &records {
        r.trajectory().validate().map_err(|e| parse_err(path, e))?;
    }
    Ok(records)
}

/// 2D trajectory annotations of one view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LineAnnotations {
    pub left: Option<Segment2>,
    pub right: Option<Segment2>,
}

impl LineAnnotations {
    pub fn get(&self, side: Side) -> Option<&Segment2> {
        match side {
            Side::Left => self.left.as_ref(),
            Side::Right => self.right.as_ref(),
        }
    }

    pub fn set(&mut self, side: Side, seg: Segment2) {
        match side {
            Side::Left => self.left = Some(seg),
            Side::Right => self.right = Some(seg),
        }
    }
}
