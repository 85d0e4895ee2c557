//! Pinhole cameras, projection of 3D picks into each view, and the 2D
//! rasterization of the Gaussian edit mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsplat::GaussianCloud;
use crate::image::Mask;
use crate::render::{project_gaussian, FOOTPRINT_SIGMAS};

/// Points closer than this (camera-space depth) are treated as behind the camera.
pub const NEAR_PLANE: f64 = 1e-4;

/// OpenCV-convention pinhole camera: +z forward, +x right, +y down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct CameraPose {
    pub world_to_camera: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    world_to_camera: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<CameraJson> for CameraPose {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        if j.world_to_camera.len() != 16 {
            return Err(Error::InvalidArgument(format!(
                "world_to_camera needs 16 values, got {}",
                j.world_to_camera.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, v) in j.world_to_camera.iter().enumerate() {
            m[i / 4][i % 4] = *v;
        }
        CameraPose::new(m, j.fx, j.fy, j.cx, j.cy, j.width, j.height)
    }
}

impl From<CameraPose> for CameraJson {
    fn from(c: CameraPose) -> Self {
        CameraJson {
            world_to_camera: c.world_to_camera.iter().flatten().copied().collect(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl CameraPose {
    pub fn new(
        world_to_camera: [[f64; 4]; 4],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = CameraPose { world_to_camera, fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera width and height must be positive".into()));
        }
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !((dot - want).abs() <= 1e-6) {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("camera rotation must have determinant +1".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with world `up` mapping to image-up.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let r = [x, y, z];
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = -(r[i][0] * eye[0] + r[i][1] * eye[1] + r[i][2] * eye[2]);
        }
        m[3][3] = 1.0;
        CameraPose::new(m, focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.world_to_camera;
        [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]]
    }

    pub fn translation(&self) -> [f64; 3] {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.world_to_camera;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    /// World-space camera center.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = -(0..3).map(|i| r[i][k] * t[i]).sum::<f64>();
        }
        c
    }

    /// Flattened extrinsics (row-major 4x4) used as the camera conditioning.
    pub fn extrinsics_flat(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for (i, v) in self.world_to_camera.iter().flatten().enumerate() {
            out[i] = *v;
        }
        out
    }

    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.width - 1) as f64 && p[1] <= (self.height - 1) as f64
    }
}

/// The 3D drag specification: start points (Gaussian centers) and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPick {
    pub starts: Vec<[f64; 3]>,
    pub ends: Vec<[f64; 3]>,
}

impl PointPick {
    pub fn new(starts: Vec<[f64; 3]>, ends: Vec<[f64; 3]>) -> Result<Self> {
        let p = PointPick { starts, ends };
        p.validate_counts()?;
        Ok(p)
    }

    pub fn validate_counts(&self) -> Result<()> {
        if self.starts.is_empty() || self.starts.len() != self.ends.len() {
            return Err(Error::InvalidArgument(format!(
                "need n >= 1 start/end pairs, got {} starts and {} ends",
                self.starts.len(),
                self.ends.len()
            )));
        }
        Ok(())
    }

    /// Checks that every start coincides with some Gaussian center.
    pub fn validate_against(&self, cloud: &GaussianCloud) -> Result<()> {
        self.validate_counts()?;
        for (i, s) in self.starts.iter().enumerate() {
            let hit = cloud
                .gaussians
                .iter()
                .any(|g| (0..3).all(|k| (g.mu[k] - s[k]).abs() <= 1e-6 * (1.0 + s[k].abs())));
            if !hit {
                return Err(Error::InvalidArgument(format!(
                    "start point {i} is not the center of any gaussian"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Pinhole projection of each point; points at or behind the near plane
/// yield [`Error::BehindCamera`] in their slot.
pub fn project(points: &[[f64; 3]], cam: &CameraPose) -> Vec<Result<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let c = cam.to_camera(*p);
            if !(c[2] > NEAR_PLANE) {
                return Err(Error::BehindCamera { index });
            }
            Ok([cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy])
        })
        .collect()
}

/// Like [`project`], failing on the first point behind the camera.
pub fn project_all(points: &[[f64; 3]], cam: &CameraPose) -> Result<Vec<[f64; 2]>> {
    project(points, cam).into_iter().collect()
}

/// Pixels covered by the 3-sigma footprint of any masked Gaussian.
/// An absent or empty mask yields an all-zero image.
pub fn rasterize_mask(cloud: &GaussianCloud, cam: &CameraPose) -> Mask {
    let mut m = Mask::new(cam.width, cam.height);
    let Some(mask) = cloud.mask() else { return m };
    let limit = FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS;
    for &i in mask {
        let Some(prim) = project_gaussian(&cloud.gaussians[i], cam, 1.0) else { continue };
        let (x0, x1, y0, y1) = prim.pixel_rect(cam.width, cam.height);
        for y in y0..y1 {
            for x in x0..x1 {
                if prim.mahalanobis2([x as f64, y as f64]) <= limit {
                    m.data[y * cam.width + x] = true;
                }
            }
        }
    }
    m
}

/// How the four editing views are placed around the object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub width: usize,
    pub height: usize,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    /// Extra distance factor beyond the tight bounding-sphere fit.
    pub margin: f64,
    /// When set, azimuths and elevations are drawn from this seed.
    pub random_seed: Option<u64>,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { width: 32, height: 32, elevation_deg: 15.0, fov_deg: 50.0, margin: 1.15, random_seed: None }
    }
}

/// Four views around the cloud: azimuths 0/90/180/270 degrees at a fixed
/// elevation, or seeded random azimuths/elevations.
pub fn orbit_cameras(cloud: &GaussianCloud, cfg: &RigConfig) -> Result<Vec<CameraPose>> {
    let (lo, hi) = cloud
        .bounds()
        .ok_or_else(|| Error::InvalidArgument("cannot fit cameras to an empty cloud".into()))?;
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let mut radius = 0.0f64;
    for g in &cloud.gaussians {
        let extent = g.scale.iter().copied().fold(0.0, f64::max) * 2.0;
        let d = ((g.mu[0] - center[0]).powi(2) + (g.mu[1] - center[1]).powi(2) + (g.mu[2] - center[2]).powi(2)).sqrt();
        radius = radius.max(d + extent);
    }
    let radius = radius.max(1e-3);
    let half_fov = cfg.fov_deg.to_radians() / 2.0;
    let dist = radius / half_fov.sin() * cfg.margin;
    let focal = (cfg.width.min(cfg.height) as f64 / 2.0) / half_fov.tan();
    let mut rng = cfg.random_seed.map(ChaCha8Rng::seed_from_u64);
    (0..4)
        .map(|k| {
            let (az, el) = match rng.as_mut() {
                Some(r) => (r.random_range(0.0..360.0f64).to_radians(), r.random_range(0.0..30.0f64).to_radians()),
                None => ((90.0 * k as f64).to_radians(), cfg.elevation_deg.to_radians()),
            };
            let eye = [
                center[0] + dist * el.cos() * az.sin(),
                center[1] + dist * el.sin(),
                center[2] - dist * el.cos() * az.cos(),
            ];
            CameraPose::look_at(eye, center, [0.0, 1.0, 0.0], focal, cfg.width, cfg.height)
        })
        .collect()
}
