//! Differentiable Gaussian splatting.
//!
//! Each Gaussian is projected to a 2D footprint (first-order perspective
//! Jacobian, plus a 0.3 px² low-pass), sorted by camera depth, and
//! alpha-composited front to back. The backward pass is hand-derived and
//! returns gradients for the decoded parameters of every Gaussian.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::gsplat::{quat_to_mat, Gaussian, GaussianCloud, Mat3};
use crate::image::RgbImage;

/// Footprint cutoff in standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;
/// Isotropic variance added to every projected covariance (px²).
pub const LOW_PASS: f64 = 0.3;
/// Contributions with evaluated opacity below this are skipped.
pub const MIN_CONTRIBUTION: f64 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Multiplier on every Gaussian's scale; 0 draws each as a low-pass dot.
    pub splat_scale: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: [0.0; 3], splat_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplatPrimitive {
    pub index: usize,
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// Inverse covariance as (xx, xy, yy).
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl SplatPrimitive {
    pub fn mahalanobis2(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.mean2d[0];
        let dy = p[1] - self.mean2d[1];
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }

    /// Half-open pixel rectangle (x0, x1, y0, y1) enclosing the footprint.
    pub fn pixel_rect(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let [[a, b], [_, c]] = self.cov2d;
        let mid = 0.5 * (a + c);
        let lmax = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        let r = FOOTPRINT_SIGMAS * lmax.sqrt();
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        (
            clamp((self.mean2d[0] - r).floor(), width),
            clamp((self.mean2d[0] + r).ceil() + 1.0, width),
            clamp((self.mean2d[1] - r).floor(), height),
            clamp((self.mean2d[1] + r).ceil() + 1.0, height),
        )
    }
}

/// Intermediate quantities of the projection, kept for the backward pass.
struct Projection {
    t: [f64; 3],
    jw: [[f64; 3]; 2],
    sigma: Mat3,
    rot: Mat3,
    scale: [f64; 3],
    cov: [f64; 3],
}

fn mat_mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn project_inner(g: &Gaussian, cam: &CameraPose, splat_scale: f64) -> Option<Projection> {
    let t = cam.to_camera(g.mu);
    if !(t[2] > NEAR_PLANE) {
        return None;
    }
    let w = cam.rotation();
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let j = [[cam.fx / tz, 0.0, -cam.fx * tx / (tz * tz)], [0.0, cam.fy / tz, -cam.fy * ty / (tz * tz)]];
    let mut jw = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            jw[i][k] = (0..3).map(|m| j[i][m] * w[m][k]).sum();
        }
    }
    let rot = quat_to_mat(g.rot);
    let scale = [g.scale[0] * splat_scale, g.scale[1] * splat_scale, g.scale[2] * splat_scale];
    let mut m = rot;
    for row in m.iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v *= scale[k];
        }
    }
    let mut mt = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            mt[i][k] = m[k][i];
        }
    }
    let sigma = mat_mul3(&m, &mt);
    let mut cov = [0.0; 3];
    for (slot, (a, b)) in [(0usize, 0usize), (0, 1), (1, 1)].into_iter().enumerate() {
        let mut s = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                s += jw[a][p] * sigma[p][q] * jw[b][q];
            }
        }
        cov[slot] = s;
    }
    cov[0] += LOW_PASS;
    cov[2] += LOW_PASS;
    Some(Projection { t, jw, sigma, rot, scale, cov })
}

/// EWA projection of one Gaussian. `None` when it is behind the near plane.
pub fn project_gaussian(g: &Gaussian, cam: &CameraPose, splat_scale: f64) -> Option<SplatPrimitive> {
    let p = project_inner(g, cam, splat_scale)?;
    Some(primitive_from(0, g, cam, &p))
}

fn primitive_from(index: usize, g: &Gaussian, cam: &CameraPose, p: &Projection) -> SplatPrimitive {
    let [x, y, z] = p.cov;
    let det = x * z - y * y;
    SplatPrimitive {
        index,
        mean2d: [cam.fx * p.t[0] / p.t[2] + cam.cx, cam.fy * p.t[1] / p.t[2] + cam.cy],
        cov2d: [[x, y], [y, z]],
        conic: [z / det, -y / det, x / det],
        depth: p.t[2],
        color: g.color,
        opacity: g.opacity,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    /// Accumulated opacity per pixel, in [0, 1].
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        self.rgb.to_png(Some(&self.alpha))
    }
}

/// Per-Gaussian gradients with respect to the decoded parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: [f64; 3],
    pub scale: [f64; 3],
    pub rot: [f64; 4],
    pub color: [f64; 3],
    pub opacity: f64,
}

struct Contribution {
    prim: u32,
    sigma: f64,
    transmittance: f64,
}

struct Record {
    width: usize,
    height: usize,
    options: RenderOptions,
    camera: CameraPose,
    gaussians: Vec<Gaussian>,
    prims: Vec<SplatPrimitive>,
    projections: Vec<Projection>,
    pixels: Vec<Vec<Contribution>>,
}

fn depth_order(a: &SplatPrimitive, b: &SplatPrimitive, ga: &Gaussian, gb: &Gaussian) -> std::cmp::Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then_with(|| {
            let ka = ga.mu.iter().chain(&ga.color).chain(&ga.scale).chain(&ga.rot).chain(std::iter::once(&ga.opacity));
            let kb = gb.mu.iter().chain(&gb.color).chain(&gb.scale).chain(&gb.rot).chain(std::iter::once(&gb.opacity));
            ka.zip(kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
}

fn forward_record(cloud: &GaussianCloud, cam: &CameraPose, options: RenderOptions) -> Result<(RenderedImage, Record)> {
    for (index, g) in cloud.gaussians.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGaussian { index });
        }
    }
    let (w, h) = (cam.width, cam.height);
    let mut items: Vec<(SplatPrimitive, Projection)> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let p = project_inner(g, cam, options.splat_scale)?;
            let prim = primitive_from(i, g, cam, &p);
            Some((prim, p))
        })
        .collect();
    items.sort_by(|a, b| depth_order(&a.0, &b.0, &cloud.gaussians[a.0.index], &cloud.gaussians[b.0.index]));
    let (prims, projections): (Vec<_>, Vec<_>) = items.into_iter().unzip();

    let mut bins: Vec<Vec<u32>> = (0..w * h).map(|_| Vec::new()).collect();
    for (k, prim) in prims.iter().enumerate() {
        let (x0, x1, y0, y1) = prim.pixel_rect(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                bins[y * w + x].push(k as u32);
            }
        }
    }

    let limit = FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS;
    let mut rgb = RgbImage::new(w, h);
    let mut alpha = vec![0.0; w * h];
    let mut pixels = Vec::with_capacity(w * h);
    for (pix, bin) in bins.iter().enumerate() {
        let p = [(pix % w) as f64, (pix / w) as f64];
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        let mut contribs = Vec::new();
        for &k in bin {
            let prim = &prims[k as usize];
            let m2 = prim.mahalanobis2(p);
            if m2 > limit {
                continue;
            }
            let sigma = prim.opacity * (-0.5 * m2).exp();
            if sigma < MIN_CONTRIBUTION {
                continue;
            }
            for c in 0..3 {
                color[c] += prim.color[c] * sigma * trans;
            }
            contribs.push(Contribution { prim: k, sigma, transmittance: trans });
            trans *= 1.0 - sigma;
        }
        for c in 0..3 {
            rgb.data[pix * 3 + c] = color[c] + trans * options.background[c];
        }
        alpha[pix] = 1.0 - trans;
        pixels.push(contribs);
    }
    let record = Record {
        width: w,
        height: h,
        options,
        camera: cam.clone(),
        gaussians: cloud.gaussians.clone(),
        prims,
        projections,
        pixels,
    };
    Ok((RenderedImage { rgb, alpha }, record))
}

/// Renders without keeping backward state.
pub fn splat(cloud: &GaussianCloud, cam: &CameraPose, options: RenderOptions) -> Result<RenderedImage> {
    forward_record(cloud, cam, options).map(|(img, _)| img)
}

/// Forward render that retains what [`SplatTape::backward`] needs.
#[derive(Default)]
pub struct SplatTape {
    record: Option<Record>,
}

impl SplatTape {
    pub fn new() -> Self {
        SplatTape { record: None }
    }

    pub fn forward(&mut self, cloud: &GaussianCloud, cam: &CameraPose, options: RenderOptions) -> Result<RenderedImage> {
        let (img, rec) = forward_record(cloud, cam, options)?;
        self.record = Some(rec);
        Ok(img)
    }

    /// Propagates image adjoints (`d_rgb` interleaved HWC, `d_alpha` per pixel)
    /// to the Gaussians. With a `filter`, only its members receive non-zero
    /// gradients.
    pub fn backward(
        &self,
        d_rgb: &[f64],
        d_alpha: &[f64],
        filter: Option<&BTreeSet<usize>>,
    ) -> Result<Vec<GaussianGrad>> {
        let rec = self.record.as_ref().ok_or(Error::NoForwardRecord)?;
        let npix = rec.width * rec.height;
        if d_rgb.len() != npix * 3 || d_alpha.len() != npix {
            return Err(Error::Shape(format!(
                "adjoint sizes {} / {} do not match a {}x{} image",
                d_rgb.len(),
                d_alpha.len(),
                rec.width,
                rec.height
            )));
        }
        let keep = |k: usize| filter.is_none_or(|f| f.contains(&rec.prims[k].index));

        // gradients w.r.t. 2D quantities of each primitive
        let np = rec.prims.len();
        let mut g_mean = vec![[0.0; 2]; np];
        let mut g_conic = vec![[0.0; 3]; np];
        let mut g_color = vec![[0.0; 3]; np];
        let mut g_opacity = vec![0.0; np];
        for (pix, contribs) in rec.pixels.iter().enumerate() {
            let dc = [d_rgb[pix * 3], d_rgb[pix * 3 + 1], d_rgb[pix * 3 + 2]];
            let da = d_alpha[pix];
            let p = [(pix % rec.width) as f64, (pix / rec.width) as f64];
            // colour composited behind the current entry, normalised by its transmittance
            let mut behind = rec.options.background;
            let mut behind_alpha = 0.0;
            for c in contribs.iter().rev() {
                let k = c.prim as usize;
                let prim = &rec.prims[k];
                let (s, tr) = (c.sigma, c.transmittance);
                if keep(k) {
                    let mut d_sigma = da * (1.0 - behind_alpha);
                    for ch in 0..3 {
                        d_sigma += dc[ch] * (prim.color[ch] - behind[ch]);
                        g_color[k][ch] += dc[ch] * s * tr;
                    }
                    d_sigma *= tr;
                    let gauss = s / prim.opacity;
                    g_opacity[k] += d_sigma * gauss;
                    let d_power = d_sigma * s;
                    let dx = p[0] - prim.mean2d[0];
                    let dy = p[1] - prim.mean2d[1];
                    g_conic[k][0] += -0.5 * dx * dx * d_power;
                    g_conic[k][1] += -dx * dy * d_power;
                    g_conic[k][2] += -0.5 * dy * dy * d_power;
                    let [a, b, cc] = prim.conic;
                    g_mean[k][0] += (a * dx + b * dy) * d_power;
                    g_mean[k][1] += (b * dx + cc * dy) * d_power;
                }
                for ch in 0..3 {
                    behind[ch] = prim.color[ch] * s + (1.0 - s) * behind[ch];
                }
                behind_alpha = s + (1.0 - s) * behind_alpha;
            }
        }

        let mut grads = vec![GaussianGrad::default(); rec.gaussians.len()];
        for k in 0..np {
            if !keep(k) {
                continue;
            }
            let prim = &rec.prims[k];
            let g = &rec.gaussians[prim.index];
            let out = &mut grads[prim.index];
            out.color = g_color[k];
            out.opacity = g_opacity[k];
            let (dmu, dscale, drot) =
                projection_backward(g, &rec.camera, &rec.projections[k], rec.options.splat_scale, g_mean[k], g_conic[k]);
            out.mu = dmu;
            out.scale = dscale;
            out.rot = drot;
        }
        Ok(grads)
    }
}

/// Chains (mean2d, conic) adjoints back to (mu, scale, quaternion).
fn projection_backward(
    g: &Gaussian,
    cam: &CameraPose,
    p: &Projection,
    splat_scale: f64,
    g_mean: [f64; 2],
    g_conic: [f64; 3],
) -> ([f64; 3], [f64; 3], [f64; 4]) {
    let [x, y, z] = p.cov;
    let det = x * z - y * y;
    let det2 = det * det;
    let [ga, gb, gc] = g_conic;
    // d/d(cov00), d/d(cov01 as one scalar), d/d(cov11)
    let dx = (-ga * z * z + gb * y * z - gc * y * y) / det2;
    let dz = (-ga * y * y + gb * x * y - gc * x * x) / det2;
    let dy = (2.0 * ga * y * z - gb * (det + 2.0 * y * y) + 2.0 * gc * x * y) / det2;
    let gcov = [[dx, 0.5 * dy], [0.5 * dy, dz]];

    // cov2d = JW Σ (JW)ᵀ
    let jw = &p.jw;
    let mut d_sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    s += jw[a][i] * gcov[a][b] * jw[b][j];
                }
            }
            d_sigma[i][j] = s;
        }
    }
    let mut d_jw = [[0.0; 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            let mut s = 0.0;
            for b in 0..2 {
                for m in 0..3 {
                    s += gcov[a][b] * jw[b][m] * p.sigma[m][k];
                }
            }
            d_jw[a][k] = 2.0 * s;
        }
    }
    let w = cam.rotation();
    let mut d_j = [[0.0; 3]; 2];
    for a in 0..2 {
        for m in 0..3 {
            d_j[a][m] = (0..3).map(|k| d_jw[a][k] * w[m][k]).sum();
        }
    }
    let [tx, ty, tz] = p.t;
    let (fx, fy) = (cam.fx, cam.fy);
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let mut d_t = [0.0; 3];
    d_t[0] += g_mean[0] * fx / tz;
    d_t[1] += g_mean[1] * fy / tz;
    d_t[2] += -g_mean[0] * fx * tx / tz2 - g_mean[1] * fy * ty / tz2;
    d_t[2] += -d_j[0][0] * fx / tz2 - d_j[1][1] * fy / tz2;
    d_t[0] += -d_j[0][2] * fx / tz2;
    d_t[2] += d_j[0][2] * 2.0 * fx * tx / tz3;
    d_t[1] += -d_j[1][2] * fy / tz2;
    d_t[2] += d_j[1][2] * 2.0 * fy * ty / tz3;
    let mut d_mu = [0.0; 3];
    for (k, dm) in d_mu.iter_mut().enumerate() {
        *dm = (0..3).map(|i| w[i][k] * d_t[i]).sum();
    }

    // Σ = M Mᵀ, M = R S
    let r = &p.rot;
    let s = p.scale;
    let mut d_m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_m[i][j] = 2.0 * (0..3).map(|k| d_sigma[i][k] * r[k][j] * s[j]).sum::<f64>();
        }
    }
    let mut d_scale = [0.0; 3];
    for (j, ds) in d_scale.iter_mut().enumerate() {
        *ds = (0..3).map(|i| d_m[i][j] * r[i][j]).sum::<f64>() * splat_scale;
    }
    let mut d_r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_r[i][j] = d_m[i][j] * s[j];
        }
    }
    let n = g.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (qw, qx, qy, qz) = (g.rot[0] / n, g.rot[1] / n, g.rot[2] / n, g.rot[3] / n);
    let dq_hat = [
        2.0 * (-qz * d_r[0][1] + qy * d_r[0][2] + qz * d_r[1][0] - qx * d_r[1][2] - qy * d_r[2][0] + qx * d_r[2][1]),
        2.0 * (qy * d_r[0][1] + qz * d_r[0][2] + qy * d_r[1][0] - 2.0 * qx * d_r[1][1] - qw * d_r[1][2]
            + qz * d_r[2][0]
            + qw * d_r[2][1]
            - 2.0 * qx * d_r[2][2]),
        2.0 * (-2.0 * qy * d_r[0][0] + qx * d_r[0][1] + qw * d_r[0][2] + qx * d_r[1][0] + qz * d_r[1][2]
            - qw * d_r[2][0]
            + qz * d_r[2][1]
            - 2.0 * qy * d_r[2][2]),
        2.0 * (-2.0 * qz * d_r[0][0] - qw * d_r[0][1] + qx * d_r[0][2] + qw * d_r[1][0] - 2.0 * qz * d_r[1][1]
            + qy * d_r[1][2]
            + qx * d_r[2][0]
            + qy * d_r[2][1]),
    ];
    let q_hat = [qw, qx, qy, qz];
    let dot: f64 = (0..4).map(|i| q_hat[i] * dq_hat[i]).sum();
    let mut d_rot = [0.0; 4];
    for i in 0..4 {
        d_rot[i] = (dq_hat[i] - q_hat[i] * dot) / n;
    }
    (d_mu, d_scale, d_rot)
}
