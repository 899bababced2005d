//! Differentiable additive splatting of anisotropic 3D Gaussians.
//!
//! Each Gaussian is projected with the local (EWA) linearisation of the
//! pinhole camera, `S = J Rc Σ Rcᵀ Jᵀ + δ I`, and contributes
//! `w * k(dᵀ S⁻¹ d)` to every pixel centre within its 3σ ellipse.
//! Contributions are summed (no occlusion). The kernel `k(q)` equals
//! `exp(-q/2)` up to 2.5σ and is tapered with a cubic smoothstep to reach
//! zero with zero slope at 3σ, so the image is C¹ in every parameter.
//!
//! Pixels are visited splat by splat in index order and row-major within a
//! splat, so results are bit-reproducible.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, SymmetricEigen};
use thiserror::Error;

use crate::geometry::{CameraView, GeometryError, Mat3, Vec2, Vec3, MIN_DEPTH};
use crate::image::Image;

/// Smallest allowed covariance eigenvalue (mm²).
pub const COVARIANCE_FLOOR: f64 = 1e-6;
/// Squared Mahalanobis radius where the taper starts (2.5σ).
pub const TAPER_START: f64 = 6.25;
/// Squared Mahalanobis radius of the footprint (3σ).
pub const CUTOFF: f64 = 9.0;
pub const DEFAULT_DILATION: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("need at least {needed} points for the neighbourhood size, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
    #[error("gradient image is {found:?}, rendered image is {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Camera(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub means: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub weights: Vec<f64>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        let n = self.means.len();
        if self.covariances.len() != n || self.weights.len() != n {
            return Err(SplatError::InvalidCloud("field lengths differ".into()));
        }
        for (i, c) in self.covariances.iter().enumerate() {
            if (c - c.transpose()).amax() > 1e-9 * c.amax().max(1.0) {
                return Err(SplatError::InvalidCloud(format!("covariance {i} not symmetric")));
            }
            let min = SymmetricEigen::new(*c).eigenvalues.min();
            if min < COVARIANCE_FLOOR * (1.0 - 1e-9) {
                return Err(SplatError::InvalidCloud(format!(
                    "covariance {i} has eigenvalue {min:e} below the floor"
                )));
            }
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(SplatError::InvalidCloud(format!("weight {i} is negative or non-finite")));
        }
        Ok(())
    }

    /// Cloud with means and covariances rotated by `r` and shifted by `t`.
    pub fn rigidly_moved(&self, r: &Mat3, t: &Vec3) -> Self {
        Self {
            means: self.means.iter().map(|m| r * m + t).collect(),
            covariances: self.covariances.iter().map(|c| r * c * r.transpose()).collect(),
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudParams {
    /// Neighbours used for the local frame (excluding the point itself).
    pub neighbors: usize,
    /// Out-of-plane to in-plane scale ratio for planar neighbourhoods.
    pub thickness_ratio: f64,
    /// In-plane standard deviation as a multiple of the mean neighbour distance.
    pub scale: f64,
}

impl Default for CloudParams {
    fn default() -> Self {
        Self {
            neighbors: 8,
            thickness_ratio: 0.3,
            scale: 0.5,
        }
    }
}

/// Unit-weight cloud with covariances from each point's k-nearest-neighbour
/// frame. The out-of-plane ratio is `sqrt(λmin/λmid)` clamped to
/// `[thickness_ratio, 1]`, so planar neighbourhoods give flat splats and
/// volumetric ones stay round.
pub fn cloud_from_points(points: &[Vec3], neighbors: usize, thickness_ratio: f64) -> Result<GaussianCloud, SplatError> {
    cloud_from_points_with(
        points,
        &CloudParams {
            neighbors,
            thickness_ratio,
            ..CloudParams::default()
        },
    )
}

pub fn cloud_from_points_with(points: &[Vec3], params: &CloudParams) -> Result<GaussianCloud, SplatError> {
    let k = params.neighbors;
    if k < 4 || points.len() < k + 1 {
        return Err(SplatError::TooFewPoints {
            needed: (k + 1).max(5),
            found: points.len(),
        });
    }
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    let mut covariances = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        dist.clear();
        dist.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((q - p).norm_squared(), j)),
        );
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nbrs = &dist[..k];
        let mean_dist = nbrs.iter().map(|(d, _)| d.sqrt()).sum::<f64>() / k as f64;
        let centroid = nbrs.iter().fold(*p, |acc, (_, j)| acc + points[*j]) / (k + 1) as f64;
        let mut scatter = (p - centroid) * (p - centroid).transpose();
        for (_, j) in nbrs {
            let d = points[*j] - centroid;
            scatter += d * d.transpose();
        }
        scatter /= (k + 1) as f64;
        let sigma = params.scale * mean_dist;
        let floor_var = COVARIANCE_FLOOR;
        let eig = SymmetricEigen::new(scatter);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let (lmin, lmid, lmax) = (
            eig.eigenvalues[order[0]],
            eig.eigenvalues[order[1]],
            eig.eigenvalues[order[2]],
        );
        let cov = if sigma * sigma <= floor_var || lmax <= 1e-24 {
            Mat3::identity() * floor_var
        } else if lmid <= 1e-9 * lmax {
            Mat3::identity() * (sigma * sigma).max(floor_var)
        } else {
            let ratio = (lmin.max(0.0) / lmid).sqrt().clamp(params.thickness_ratio, 1.0);
            let normal = eig.eigenvectors.column(order[0]).into_owned();
            let in_plane = (sigma * sigma).max(floor_var);
            let out_plane = (ratio * ratio * sigma * sigma).max(floor_var);
            let nnt = normal * normal.transpose();
            (Mat3::identity() - nnt) * in_plane + nnt * out_plane
        };
        covariances.push(cov);
    }
    Ok(GaussianCloud {
        means: points.to_vec(),
        covariances,
        weights: vec![1.0; points.len()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Isotropic variance (px²) added to every projected covariance.
    pub dilation: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            dilation: DEFAULT_DILATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderStatus {
    Ok,
    /// The cloud was non-empty but every splat was behind the camera.
    AllBehindCamera,
}

/// Screen-space support of one splat (inclusive pixel bounds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub center: Vec2,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    /// Maximum pixel value, used to scale into `[0, 1]`.
    pub max_value: f64,
    pub skipped_behind: usize,
    pub footprints: Vec<Option<Footprint>>,
    pub status: RenderStatus,
}

impl RenderedImage {
    pub fn normalized(&self) -> Image {
        if self.max_value > 0.0 {
            self.image.scaled(1.0 / self.max_value)
        } else {
            self.image.clone()
        }
    }
}

struct Projected {
    center: Vec2,
    pc: Vec3,
    jac: Matrix2x3<f64>,
    cov_cam: Mat3,
    inv: Matrix2<f64>,
    footprint: Option<Footprint>,
}

#[inline]
fn kernel(q: f64) -> (f64, f64) {
    if q >= CUTOFF {
        return (0.0, 0.0);
    }
    let e = (-0.5 * q).exp();
    if q <= TAPER_START {
        return (e, -0.5 * e);
    }
    let span = CUTOFF - TAPER_START;
    let t = (q - TAPER_START) / span;
    let s = 1.0 - t * t * (3.0 - 2.0 * t);
    let ds = 6.0 * t * (t - 1.0) / span;
    (e * s, e * (ds - 0.5 * s))
}

fn project_splat(mean: &Vec3, cov: &Mat3, cam: &CameraView, rc: &Mat3, dilation: f64) -> Option<Projected> {
    let pc = rc * mean + cam.translation;
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let jac = cam.camera_jacobian(&pc);
    let center = Vec2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
    let cov_cam = rc * cov * rc.transpose();
    let s = jac * cov_cam * jac.transpose() + Matrix2::identity() * dilation;
    let inv = s.try_inverse()?;
    let hx = (CUTOFF * s[(0, 0)]).sqrt();
    let hy = (CUTOFF * s[(1, 1)]).sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let fx0 = (center.x - hx).ceil().max(0.0);
    let fx1 = (center.x + hx).floor().min(w - 1.0);
    let fy0 = (center.y - hy).ceil().max(0.0);
    let fy1 = (center.y + hy).floor().min(h - 1.0);
    let footprint = (fx0 <= fx1 && fy0 <= fy1 && center.x.is_finite() && center.y.is_finite()).then(|| Footprint {
        center,
        x0: fx0 as usize,
        x1: fx1 as usize,
        y0: fy0 as usize,
        y1: fy1 as usize,
    });
    Some(Projected {
        center,
        pc,
        jac,
        cov_cam,
        inv,
        footprint,
    })
}

pub fn render(cloud: &GaussianCloud, cam: &CameraView) -> Result<RenderedImage, SplatError> {
    render_with(cloud, cam, &RenderOptions::default())
}

pub fn render_with(cloud: &GaussianCloud, cam: &CameraView, opts: &RenderOptions) -> Result<RenderedImage, SplatError> {
    cam.validate()?;
    if cloud.covariances.len() != cloud.len() || cloud.weights.len() != cloud.len() {
        return Err(SplatError::InvalidCloud("field lengths differ".into()));
    }
    let rc = cam.rotation_matrix();
    let mut image = Image::zeros(cam.width, cam.height);
    let mut skipped = 0;
    let mut footprints = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let Some(p) = project_splat(&cloud.means[i], &cloud.covariances[i], cam, &rc, opts.dilation) else {
            skipped += 1;
            footprints.push(None);
            continue;
        };
        footprints.push(p.footprint);
        let Some(fp) = p.footprint else { continue };
        let w = cloud.weights[i];
        let (a, b, c) = (p.inv[(0, 0)], p.inv[(0, 1)], p.inv[(1, 1)]);
        for y in fp.y0..=fp.y1 {
            let dy = y as f64 - p.center.y;
            let row = &mut image.data[y * cam.width..(y + 1) * cam.width];
            for (x, px) in row.iter_mut().enumerate().take(fp.x1 + 1).skip(fp.x0) {
                let dx = x as f64 - p.center.x;
                let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if q < CUTOFF {
                    *px += w * kernel(q).0;
                }
            }
        }
    }
    let status = if skipped == cloud.len() && !cloud.is_empty() {
        RenderStatus::AllBehindCamera
    } else {
        RenderStatus::Ok
    };
    let max_value = image.max().max(0.0);
    Ok(RenderedImage {
        image,
        max_value,
        skipped_behind: skipped,
        footprints,
        status,
    })
}

/// Gradients of `sum_p upstream(p) * image(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub means: Vec<Vec3>,
    pub weights: Vec<f64>,
    /// Gradient w.r.t. every entry of each 3D covariance (symmetric).
    pub covariances: Vec<Mat3>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vec3::zeros(); n],
            weights: vec![0.0; n],
            covariances: vec![Mat3::zeros(); n],
        }
    }

    pub fn add_assign(&mut self, other: &CloudGradients) {
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += b;
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.covariances.iter_mut().zip(&other.covariances) {
            *a += b;
        }
    }
}

/// Exact analytic gradient of the forward pass, including the dependence
/// of the projected covariance on each mean through the projection Jacobian.
pub fn render_backward(cloud: &GaussianCloud, cam: &CameraView, upstream: &Image) -> Result<CloudGradients, SplatError> {
    render_backward_with(cloud, cam, upstream, &RenderOptions::default())
}

pub fn render_backward_with(
    cloud: &GaussianCloud,
    cam: &CameraView,
    upstream: &Image,
    opts: &RenderOptions,
) -> Result<CloudGradients, SplatError> {
    cam.validate()?;
    if upstream.dims() != (cam.width, cam.height) {
        return Err(SplatError::ShapeMismatch {
            expected: (cam.width, cam.height),
            found: upstream.dims(),
        });
    }
    let n = cloud.len();
    let rc = cam.rotation_matrix();
    let mut grads = CloudGradients::zeros(n);
    for i in 0..n {
        let Some(p) = project_splat(&cloud.means[i], &cloud.covariances[i], cam, &rc, opts.dilation) else {
            continue;
        };
        let Some(fp) = p.footprint else { continue };
        let w = cloud.weights[i];
        let (a, b, c) = (p.inv[(0, 0)], p.inv[(0, 1)], p.inv[(1, 1)]);
        let mut g_w = 0.0;
        // Accumulators for dL/du (via -2 A d) and dL/dA = sum g' d dᵀ.
        let mut g_ax = 0.0;
        let mut g_ay = 0.0;
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        for y in fp.y0..=fp.y1 {
            let dy = y as f64 - p.center.y;
            let row = &upstream.data[y * cam.width..(y + 1) * cam.width];
            for (x, &g) in row.iter().enumerate().take(fp.x1 + 1).skip(fp.x0) {
                if g == 0.0 {
                    continue;
                }
                let dx = x as f64 - p.center.x;
                let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if q >= CUTOFF {
                    continue;
                }
                let (k, dk) = kernel(q);
                g_w += g * k;
                let gq = g * w * dk;
                g_ax += gq * dx;
                g_ay += gq * dy;
                gxx += gq * dx * dx;
                gxy += gq * dx * dy;
                gyy += gq * dy * dy;
            }
        }
        grads.weights[i] = g_w;
        // dq/du = -2 A d
        let g_u = -2.0 * (p.inv * Vec2::new(g_ax, g_ay));
        let g_a = Matrix2::new(gxx, gxy, gxy, gyy);
        // dL/dS = -A (dL/dA) A
        let g_s = -(p.inv * g_a * p.inv);
        let jt = p.jac.transpose();
        let g_cov_cam = jt * g_s * p.jac;
        grads.covariances[i] = rc.transpose() * g_cov_cam * rc;
        let g_j = 2.0 * g_s * p.jac * p.cov_cam;
        let (fx, fy) = (cam.fx, cam.fy);
        let (px, py, pz) = (p.pc.x, p.pc.y, p.pc.z);
        let z2 = pz * pz;
        let z3 = z2 * pz;
        let mut g_pc = jt * g_u;
        g_pc.x += g_j[(0, 2)] * (-fx / z2);
        g_pc.y += g_j[(1, 2)] * (-fy / z2);
        g_pc.z += g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * px / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * py / z3);
        grads.means[i] = rc.transpose() * g_pc;
    }
    Ok(grads)
}

/// Writes gradients as a flat little-endian binary file:
/// `u64 N`, then `N x 3` f64 mean gradients, `N` f64 weight gradients and
/// `N x 9` f64 covariance gradients (row-major), all point-major.
pub fn write_gradient_dump(path: &Path, grads: &CloudGradients) -> Result<(), SplatError> {
    let n = grads.means.len();
    let mut buf = Vec::with_capacity(8 + n * 13 * 8);
    buf.write_all(&(n as u64).to_le_bytes()).expect("in-memory write");
    for m in &grads.means {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for w in &grads.weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for c in &grads.covariances {
        for r in 0..3 {
            for col in 0..3 {
                buf.extend_from_slice(&c[(r, col)].to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| SplatError::Io(format!("{}: {e}", path.display())))
}

pub fn read_gradient_dump(path: &Path) -> Result<CloudGradients, SplatError> {
    let bytes = fs::read(path).map_err(|e| SplatError::Io(format!("{}: {e}", path.display())))?;
    let bad = || SplatError::Io(format!("{}: truncated gradient dump", path.display()));
    let head: [u8; 8] = bytes.get(..8).ok_or_else(bad)?.try_into().expect("8 bytes");
    let n = u64::from_le_bytes(head) as usize;
    if bytes.len() != 8 + n * 13 * 8 {
        return Err(bad());
    }
    let vals: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (m, rest) = vals.split_at(3 * n);
    let (w, c) = rest.split_at(n);
    Ok(CloudGradients {
        means: m.chunks_exact(3).map(|v| Vec3::new(v[0], v[1], v[2])).collect(),
        weights: w.to_vec(),
        covariances: c.chunks_exact(9).map(Mat3::from_row_slice).collect(),
    })
}
