//! CPU 3D Gaussian splat rasterizer: a fast forward path (tiles, skip
//! threshold, early termination) and a differentiable path that runs the
//! same math through the computation record, with the per-pixel compositor
//! as a custom kernel with an analytic VJP.
//!
//! Both paths share the projection formulas and the depth ordering, so with
//! the skip threshold disabled they agree pixel for pixel.

use std::path::Path;
use std::rc::Rc;

use nalgebra::{Isometry3, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use gavatar_tensor::{Graph, TapeOp, Tensor, ValueId};

use crate::img::Image;
use crate::Error;

pub const ZNEAR: f64 = 0.01;
/// Regularization added to the projected covariance diagonal (px^2).
pub const COV_EPS: f64 = 1e-6;
/// Footprint cutoff in standard deviations.
pub const FOOTPRINT_SIGMA: f64 = 3.0;
/// Fast-path contribution skip threshold.
pub const SKIP_ALPHA: f64 = 1.0 / 255.0;
/// Fast-path transmittance early-out.
pub const STOP_T: f64 = 1e-4;
/// Degree-1 real spherical harmonic constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
const TILE: usize = 16;

#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_cam: Isometry3<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<(), Error> {
        if self.fx <= 0.0 || self.fy <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera needs positive focals and size".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.world_to_cam.inverse().translation.vector
    }

    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let iso = Isometry3::look_at_rh(&Point3::from(eye), &Point3::from(target), &up);
        // look_at_rh gives a -z forward frame; flip to +z forward so depth
        // is positive in front of the camera.
        let flip = Isometry3::rotation(Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_cam: flip * iso,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// world-to-camera rotation as a unit quaternion [w, x, y, z]
    rot: [f64; 4],
    trans: [f64; 3],
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<(), Error> {
    let docs: Vec<CameraDoc> = cams
        .iter()
        .map(|c| {
            let q = c.world_to_cam.rotation.quaternion();
            let t = c.world_to_cam.translation.vector;
            CameraDoc {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                rot: [q.w, q.i, q.j, q.k],
                trans: [t.x, t.y, t.z],
            }
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&docs).map_err(|e| Error::Invalid(e.to_string()))?)?;
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>, Error> {
    let docs: Vec<CameraDoc> = serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(docs
        .into_iter()
        .map(|d| Camera {
            fx: d.fx,
            fy: d.fy,
            cx: d.cx,
            cy: d.cy,
            width: d.width,
            height: d.height,
            world_to_cam: Isometry3::from_parts(
                nalgebra::Translation3::new(d.trans[0], d.trans[1], d.trans[2]),
                nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    d.rot[0], d.rot[1], d.rot[2], d.rot[3],
                )),
            ),
        })
        .collect())
}

/// Posed 3D Gaussians in world space, ready for rasterization.
#[derive(Debug, Clone, Default)]
pub struct GaussianFrame {
    pub means: Vec<Vector3<f64>>,
    /// Unit quaternions (w, x, y, z).
    pub quats: Vec<[f64; 4]>,
    /// Per-axis scales, clamped to (0, 0.2] by the decoder.
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    /// Directional-constant color term in [0,1].
    pub sh0: Vec<[f64; 3]>,
    /// Degree-1 coefficients, 3 bands x 3 channels.
    pub shn: Vec<[f64; 9]>,
}

impl GaussianFrame {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn validate(&self) -> Result<(), Error> {
        let n = self.means.len();
        if [self.quats.len(), self.scales.len(), self.opacities.len(), self.sh0.len(), self.shn.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Invalid("gaussian frame arrays disagree in length".into()));
        }
        for q in &self.quats {
            let norm2: f64 = q.iter().map(|v| v * v).sum();
            if (norm2.sqrt() - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid("non-unit quaternion in frame".into()));
            }
        }
        for s in &self.scales {
            if s.iter().any(|&v| !(v > 0.0 && v <= 0.2)) {
                return Err(Error::Invalid("scale outside (0, 0.2]".into()));
            }
        }
        for &o in &self.opacities {
            if !(o > 0.0 && o < 1.0) {
                return Err(Error::Invalid("opacity outside (0,1)".into()));
            }
        }
        Ok(())
    }
}

/// A projected splat.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub mean: [f64; 2],
    /// 2D covariance (c00, c01, c11), positive definite after regularization.
    pub cov: [f64; 3],
    pub inv_cov: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub rgb: [f64; 3],
}

/// Covariance entries (s00,s01,s02,s11,s12,s22) of `R(q) diag(s)^2 R(q)^T`.
fn cov3d_entries(q: &[f64; 4], s: &[f64; 3]) -> [f64; 6] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let r = [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ];
    // M = R diag(s): column k scaled by s[k]
    let m = [
        r[0] * s[0], r[1] * s[1], r[2] * s[2],
        r[3] * s[0], r[4] * s[1], r[5] * s[2],
        r[6] * s[0], r[7] * s[1], r[8] * s[2],
    ];
    [
        m[0] * m[0] + m[1] * m[1] + m[2] * m[2],
        m[0] * m[3] + m[1] * m[4] + m[2] * m[5],
        m[0] * m[6] + m[1] * m[7] + m[2] * m[8],
        m[3] * m[3] + m[4] * m[4] + m[5] * m[5],
        m[3] * m[6] + m[4] * m[7] + m[5] * m[8],
        m[6] * m[6] + m[7] * m[7] + m[8] * m[8],
    ]
}

/// Degree <= 1 SH color along a view direction, clamped to [0,1].
fn sh_color(sh0: &[f64; 3], shn: &[f64; 9], dir: &Vector3<f64>) -> [f64; 3] {
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let v = sh0[ch]
            + SH_C1 * (-dir.y) * shn[ch]
            + SH_C1 * dir.z * shn[3 + ch]
            + SH_C1 * (-dir.x) * shn[6 + ch];
        out[ch] = v.max(0.0).min(1.0);
    }
    out
}

/// Perspective projection of a single Gaussian. Returns `None` when the mean
/// is behind the near plane (culled, not an error).
pub fn project(
    mean: &Vector3<f64>,
    quat: &[f64; 4],
    scale: &[f64; 3],
    opacity: f64,
    sh0: &[f64; 3],
    shn: &[f64; 9],
    cam: &Camera,
) -> Option<Splat2D> {
    let rc = cam.world_to_cam.rotation.to_rotation_matrix();
    let p = rc * mean + cam.world_to_cam.translation.vector;
    if p.z <= ZNEAR {
        return None;
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let u = cam.fx * (x / z) + cam.cx;
    let v = cam.fy * (y / z) + cam.cy;

    let c3 = cov3d_entries(quat, scale);
    // rotate into the camera frame: S_cam = Rc S Rc^T
    let sigma = Matrix3::new(c3[0], c3[1], c3[2], c3[1], c3[3], c3[4], c3[2], c3[4], c3[5]);
    let sc = rc.matrix() * sigma * rc.matrix().transpose();
    let (s00, s01, s02, s11, s12, s22) =
        (sc[(0, 0)], sc[(0, 1)], sc[(0, 2)], sc[(1, 1)], sc[(1, 2)], sc[(2, 2)]);

    let a = cam.fx / z;
    let b = -cam.fx * x / (z * z);
    let c = cam.fy / z;
    let d = -cam.fy * y / (z * z);
    let c00 = a * a * s00 + 2.0 * (a * b) * s02 + b * b * s22 + COV_EPS;
    let c01 = (a * c) * s01 + (b * c) * s12 + (a * d) * s02 + (b * d) * s22;
    let c11 = c * c * s11 + 2.0 * (c * d) * s12 + d * d * s22 + COV_EPS;
    let det = c00 * c11 - c01 * c01;
    let inv = [c11 / det, -c01 / det, c00 / det];

    let dirv = mean - cam.center();
    let dir = dirv / dirv.norm();
    let rgb = sh_color(sh0, shn, &dir);

    Some(Splat2D { mean: [u, v], cov: [c00, c01, c11], inv_cov: inv, depth: z, opacity, rgb })
}

pub fn project_frame(frame: &GaussianFrame, cam: &Camera) -> Vec<Option<Splat2D>> {
    (0..frame.len())
        .map(|i| {
            project(
                &frame.means[i],
                &frame.quats[i],
                &frame.scales[i],
                frame.opacities[i],
                &frame.sh0[i],
                &frame.shn[i],
                cam,
            )
        })
        .collect()
}

/// Inclusive-exclusive pixel rect covered by a splat's 3-sigma footprint.
fn footprint_rect(s: &Splat2D, width: usize, height: usize) -> [i32; 4] {
    let mid = 0.5 * (s.cov[0] + s.cov[2]);
    let half = 0.5 * (s.cov[0] - s.cov[2]);
    let lmax = mid + (half * half + s.cov[1] * s.cov[1]).sqrt();
    let r = FOOTPRINT_SIGMA * lmax.max(0.0).sqrt();
    let x0 = (s.mean[0] - r).floor().max(0.0) as i32;
    let y0 = (s.mean[1] - r).floor().max(0.0) as i32;
    let x1 = ((s.mean[0] + r).ceil() + 1.0).min(width as f64) as i32;
    let y1 = ((s.mean[1] + r).ceil() + 1.0).min(height as f64) as i32;
    [x0, y0, x1.max(x0), y1.max(y0)]
}

/// Permutation-invariant front-to-back ordering: depth first, then content.
fn depth_order(splats: &[Option<Splat2D>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].is_some()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (splats[a].as_ref().unwrap(), splats[b].as_ref().unwrap());
        sa.depth
            .total_cmp(&sb.depth)
            .then(sa.mean[0].total_cmp(&sb.mean[0]))
            .then(sa.mean[1].total_cmp(&sb.mean[1]))
            .then(sa.opacity.total_cmp(&sb.opacity))
            .then(sa.rgb[0].total_cmp(&sb.rgb[0]))
            .then(sa.rgb[1].total_cmp(&sb.rgb[1]))
            .then(sa.rgb[2].total_cmp(&sb.rgb[2]))
    });
    idx
}

fn tile_lists(
    order: &[usize],
    rects: &[[i32; 4]],
    width: usize,
    height: usize,
) -> (usize, usize, Vec<Vec<u32>>) {
    let tw = width.div_ceil(TILE);
    let th = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tw * th];
    for (oi, &si) in order.iter().enumerate() {
        let r = rects[si];
        if r[0] >= r[2] || r[1] >= r[3] {
            continue;
        }
        let (tx0, ty0) = (r[0] as usize / TILE, r[1] as usize / TILE);
        let (tx1, ty1) = ((r[2] as usize - 1) / TILE, (r[3] as usize - 1) / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tw + tx].push(oi as u32);
            }
        }
    }
    (tw, th, lists)
}

/// Front-to-back alpha compositing over black. Returns an RGBA image
/// (alpha = accumulated opacity). `skip` enables the fast-path thresholds.
pub fn composite(splats: &[Option<Splat2D>], width: usize, height: usize, skip: bool) -> Image {
    let order = depth_order(splats);
    let rects: Vec<[i32; 4]> = splats
        .iter()
        .map(|s| s.as_ref().map(|s| footprint_rect(s, width, height)).unwrap_or([0, 0, 0, 0]))
        .collect();
    let (tw, _th, lists) = tile_lists(&order, &rects, width, height);
    let mut img = Image::new(height, width, 4);
    for py in 0..height {
        for px in 0..width {
            let list = &lists[(py / TILE) * tw + px / TILE];
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0f64;
            let mut acc = [0.0f64; 4];
            for &oi in list {
                let si = order[oi as usize];
                let r = rects[si];
                if (px as i32) < r[0] || (px as i32) >= r[2] || (py as i32) < r[1] || (py as i32) >= r[3] {
                    continue;
                }
                let s = splats[si].as_ref().unwrap();
                let dx = fx - s.mean[0];
                let dy = fy - s.mean[1];
                let q = s.inv_cov[0] * dx * dx
                    + 2.0 * (s.inv_cov[1] * dx * dy)
                    + s.inv_cov[2] * dy * dy;
                let alpha = s.opacity * (-0.5 * q).exp();
                if skip && alpha < SKIP_ALPHA {
                    continue;
                }
                let w = alpha * t;
                acc[0] += s.rgb[0] * w;
                acc[1] += s.rgb[1] * w;
                acc[2] += s.rgb[2] * w;
                acc[3] += w;
                t *= 1.0 - alpha;
                if skip && t < STOP_T {
                    break;
                }
            }
            let off = (py * width + px) * 4;
            img.data[off..off + 4].copy_from_slice(&acc);
        }
    }
    img
}

/// Frozen rasterization structure (cull set, depth order, footprints) so
/// finite-difference probes differentiate a fixed-structure function.
#[derive(Debug, Clone)]
pub struct RasterPlan {
    /// Indices into the frame of splats in front of the near plane.
    pub kept: Vec<usize>,
    /// Positions into `kept`, sorted front-to-back.
    pub order: Vec<usize>,
    /// Footprint rect per kept splat.
    pub rects: Vec<[i32; 4]>,
}

pub fn plan_raster(frame: &GaussianFrame, cam: &Camera) -> RasterPlan {
    let splats = project_frame(frame, cam);
    let kept: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].is_some()).collect();
    let kept_splats: Vec<Option<Splat2D>> = kept.iter().map(|&i| splats[i].clone()).collect();
    let order = depth_order(&kept_splats);
    let rects = kept_splats
        .iter()
        .map(|s| footprint_rect(s.as_ref().unwrap(), cam.width, cam.height))
        .collect();
    RasterPlan { kept, order, rects }
}

/// Pixel x splat budget for the differentiable path.
#[derive(Debug, Clone, Copy)]
pub struct RenderBudget {
    pub max_pixel_splats: u64,
}

impl Default for RenderBudget {
    fn default() -> Self {
        Self { max_pixel_splats: 1 << 28 }
    }
}

/// World-space splat attributes on the computation record.
pub struct TapeFrame {
    /// (N,3) world means
    pub means: ValueId,
    /// (N,4) canonical-composed unit quaternions (w,x,y,z)
    pub quats: ValueId,
    /// (N,3) scales
    pub scales: ValueId,
    /// (N,1) opacities
    pub opacities: ValueId,
    /// (N,3) DC color in [0,1]
    pub sh0: ValueId,
    /// (N,9) degree-1 coefficients
    pub shn: ValueId,
}

impl TapeFrame {
    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.means)[0]
    }

    /// Extract plain values for the fast path.
    pub fn to_frame(&self, g: &Graph) -> GaussianFrame {
        let n = self.len(g);
        let md = g.value(self.means).data();
        let qd = g.value(self.quats).data();
        let sd = g.value(self.scales).data();
        let od = g.value(self.opacities).data();
        let c0 = g.value(self.sh0).data();
        let cn = g.value(self.shn).data();
        GaussianFrame {
            means: (0..n).map(|i| Vector3::new(md[3 * i], md[3 * i + 1], md[3 * i + 2])).collect(),
            quats: (0..n).map(|i| [qd[4 * i], qd[4 * i + 1], qd[4 * i + 2], qd[4 * i + 3]]).collect(),
            scales: (0..n).map(|i| [sd[3 * i], sd[3 * i + 1], sd[3 * i + 2]]).collect(),
            opacities: od.to_vec(),
            sh0: (0..n).map(|i| [c0[3 * i], c0[3 * i + 1], c0[3 * i + 2]]).collect(),
            shn: (0..n).map(|i| std::array::from_fn(|k| cn[9 * i + k])).collect(),
        }
    }
}

fn col(g: &mut Graph, x: ValueId, i: usize) -> ValueId {
    g.slice(x, 1, i, 1).expect("column slice")
}

/// The differentiable render: identical math to [`composite`] with the skip
/// threshold disabled, depth ordering and footprints fixed per forward pass.
///
/// `plan` freezes the rasterization structure; pass `None` to compute it
/// from the current values.
pub fn render_differentiable(
    g: &mut Graph,
    frame: &TapeFrame,
    cam: &Camera,
    plan: Option<&RasterPlan>,
    budget: RenderBudget,
) -> Result<ValueId, Error> {
    cam.validate()?;
    let owned_plan;
    let plan = match plan {
        Some(p) => p,
        None => {
            owned_plan = plan_raster(&frame.to_frame(g), cam);
            &owned_plan
        }
    };
    let n_kept = plan.kept.len() as u64;
    let pixels = (cam.width * cam.height) as u64;
    if pixels * n_kept > budget.max_pixel_splats {
        return Err(Error::Invalid(format!(
            "render budget exceeded: {} pixels x {} splats > {}",
            pixels, n_kept, budget.max_pixel_splats
        )));
    }
    if plan.kept.is_empty() {
        return Err(Error::Invalid("differentiable render with zero visible splats".into()));
    }

    // Cull: gather kept rows of every attribute.
    let kept = Rc::new(plan.kept.clone());
    let means = g.gather_rows(frame.means, kept.clone())?;
    let quats = g.gather_rows(frame.quats, kept.clone())?;
    let scales = g.gather_rows(frame.scales, kept.clone())?;
    let opac = g.gather_rows(frame.opacities, kept.clone())?;
    let sh0 = g.gather_rows(frame.sh0, kept.clone())?;
    let shn = g.gather_rows(frame.shn, kept)?;
    let n = plan.kept.len();

    // Camera transform of the means.
    let rc = cam.world_to_cam.rotation.to_rotation_matrix();
    let rcm = rc.matrix();
    let tc = cam.world_to_cam.translation.vector;
    let mats: Vec<f64> = (0..n).flat_map(|_| rcm.transpose().iter().cloned().collect::<Vec<_>>()).collect();
    let trans: Vec<f64> = (0..n).flat_map(|_| [tc.x, tc.y, tc.z]).collect();
    let cam_pts = g.per_point_affine(means, Rc::new(mats), Rc::new(trans))?;
    let x = col(g, cam_pts, 0);
    let y = col(g, cam_pts, 1);
    let z = col(g, cam_pts, 2);

    // Pixel means.
    let xz = g.div(x, z)?;
    let yz = g.div(y, z)?;
    let u = g.mul_scalar(xz, cam.fx)?;
    let u = g.add_scalar(u, cam.cx)?;
    let v = g.mul_scalar(yz, cam.fy)?;
    let v = g.add_scalar(v, cam.cy)?;
    let means2d = g.concat(&[u, v], 1)?;

    // 3D covariance entries from quaternion and scale.
    let qw = col(g, quats, 0);
    let qx = col(g, quats, 1);
    let qy = col(g, quats, 2);
    let qz = col(g, quats, 3);
    let qw2 = g.mul(qw, qw)?;
    let qx2 = g.mul(qx, qx)?;
    let qy2 = g.mul(qy, qy)?;
    let qz2 = g.mul(qz, qz)?;
    let s1 = g.add(qw2, qx2)?;
    let s2 = g.add(s1, qy2)?;
    let s3 = g.add(s2, qz2)?;
    let qn = g.sqrt(s3)?;
    let w = g.div(qw, qn)?;
    let xq = g.div(qx, qn)?;
    let yq = g.div(qy, qn)?;
    let zq = g.div(qz, qn)?;

    // rotation entries
    let two = 2.0;
    let mk = |g: &mut Graph, a: ValueId, b: ValueId| -> ValueId {
        let m = g.mul(a, b).unwrap();
        g.mul_scalar(m, two).unwrap()
    };
    let yy2 = mk(g, yq, yq);
    let zz2 = mk(g, zq, zq);
    let xx2 = mk(g, xq, xq);
    let xy2 = mk(g, xq, yq);
    let xz2 = mk(g, xq, zq);
    let yz2 = mk(g, yq, zq);
    let wx2 = mk(g, w, xq);
    let wy2 = mk(g, w, yq);
    let wz2 = mk(g, w, zq);
    let one = g.constant(Tensor::ones(&[n, 1]))?;
    let sub2 = |g: &mut Graph, a: ValueId, b: ValueId| -> ValueId {
        let s = g.add(a, b).unwrap();
        g.sub(one, s).unwrap()
    };
    let r00 = sub2(g, yy2, zz2);
    let r01 = g.sub(xy2, wz2)?;
    let r02 = g.add(xz2, wy2)?;
    let r10 = g.add(xy2, wz2)?;
    let r11 = sub2(g, xx2, zz2);
    let r12 = g.sub(yz2, wx2)?;
    let r20 = g.sub(xz2, wy2)?;
    let r21 = g.add(yz2, wx2)?;
    let r22 = sub2(g, xx2, yy2);

    let s0 = col(g, scales, 0);
    let s1c = col(g, scales, 1);
    let s2c = col(g, scales, 2);
    let m = |g: &mut Graph, r: ValueId, s: ValueId| g.mul(r, s).unwrap();
    let m00 = m(g, r00, s0);
    let m01 = m(g, r01, s1c);
    let m02 = m(g, r02, s2c);
    let m10 = m(g, r10, s0);
    let m11 = m(g, r11, s1c);
    let m12 = m(g, r12, s2c);
    let m20 = m(g, r20, s0);
    let m21 = m(g, r21, s1c);
    let m22 = m(g, r22, s2c);
    let dot3 = |g: &mut Graph, a: [ValueId; 3], b: [ValueId; 3]| -> ValueId {
        let p0 = g.mul(a[0], b[0]).unwrap();
        let p1 = g.mul(a[1], b[1]).unwrap();
        let p2 = g.mul(a[2], b[2]).unwrap();
        let s = g.add(p0, p1).unwrap();
        g.add(s, p2).unwrap()
    };
    let row0 = [m00, m01, m02];
    let row1 = [m10, m11, m12];
    let row2 = [m20, m21, m22];
    let w00 = dot3(g, row0, row0);
    let w01 = dot3(g, row0, row1);
    let w02 = dot3(g, row0, row2);
    let w11 = dot3(g, row1, row1);
    let w12 = dot3(g, row1, row2);
    let w22 = dot3(g, row2, row2);

    // camera-frame covariance: Rc S Rc^T, expanded per entry
    let rc_ = rcm;
    let lin6 = |g: &mut Graph, coeffs: [f64; 6], vals: [ValueId; 6]| -> ValueId {
        let mut acc: Option<ValueId> = None;
        for (c, v) in coeffs.iter().zip(vals) {
            if *c == 0.0 {
                continue;
            }
            let t = g.mul_scalar(v, *c).unwrap();
            acc = Some(match acc {
                Some(a) => g.add(a, t).unwrap(),
                None => t,
            });
        }
        acc.unwrap_or_else(|| g.constant(Tensor::zeros(&[n, 1])).unwrap())
    };
    // entry (i,j) of Rc S Rc^T = sum_{k,l} rc[i,k] rc[j,l] S[k,l]
    let entry = |i: usize, j: usize| -> [f64; 6] {
        // coefficient per unique S entry (00,01,02,11,12,22)
        let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
        let mut coeffs = [0.0; 6];
        for (ci, &(k, l)) in pairs.iter().enumerate() {
            coeffs[ci] =
                rc_[(i, k)] * rc_[(j, l)] + if k != l { rc_[(i, l)] * rc_[(j, k)] } else { 0.0 };
        }
        coeffs
    };
    let wvals = [w00, w01, w02, w11, w12, w22];
    let sc00 = lin6(g, entry(0, 0), wvals);
    let sc01 = lin6(g, entry(0, 1), wvals);
    let sc02 = lin6(g, entry(0, 2), wvals);
    let sc11 = lin6(g, entry(1, 1), wvals);
    let sc12 = lin6(g, entry(1, 2), wvals);
    let sc22 = lin6(g, entry(2, 2), wvals);

    // projection Jacobian terms
    let z2 = g.mul(z, z)?;
    let fx_const = g.constant(Tensor::full(&[n, 1], cam.fx))?;
    let a = g.div(fx_const, z)?;
    let bx = g.mul_scalar(x, -cam.fx)?;
    let b = g.div(bx, z2)?;
    let fy_const = g.constant(Tensor::full(&[n, 1], cam.fy))?;
    let c = g.div(fy_const, z)?;
    let dy = g.mul_scalar(y, -cam.fy)?;
    let d = g.div(dy, z2)?;

    let aa = g.mul(a, a)?;
    let ab = g.mul(a, b)?;
    let bb = g.mul(b, b)?;
    let cc = g.mul(c, c)?;
    let cd = g.mul(c, d)?;
    let dd = g.mul(d, d)?;
    let ac = g.mul(a, c)?;
    let bc = g.mul(b, c)?;
    let ad = g.mul(a, d)?;
    let bd = g.mul(b, d)?;

    let t1 = g.mul(aa, sc00)?;
    let ab2 = g.mul_scalar(ab, 2.0)?;
    let t2 = g.mul(ab2, sc02)?;
    let t3 = g.mul(bb, sc22)?;
    let c00 = g.add(t1, t2)?;
    let c00 = g.add(c00, t3)?;
    let c00 = g.add_scalar(c00, COV_EPS)?;

    let u1 = g.mul(ac, sc01)?;
    let u2 = g.mul(bc, sc12)?;
    let u3 = g.mul(ad, sc02)?;
    let u4 = g.mul(bd, sc22)?;
    let c01 = g.add(u1, u2)?;
    let c01 = g.add(c01, u3)?;
    let c01 = g.add(c01, u4)?;

    let v1 = g.mul(cc, sc11)?;
    let cd2 = g.mul_scalar(cd, 2.0)?;
    let v2 = g.mul(cd2, sc12)?;
    let v3 = g.mul(dd, sc22)?;
    let c11 = g.add(v1, v2)?;
    let c11 = g.add(c11, v3)?;
    let c11 = g.add_scalar(c11, COV_EPS)?;

    // inverse 2x2
    let c0011 = g.mul(c00, c11)?;
    let c0101 = g.mul(c01, c01)?;
    let det = g.sub(c0011, c0101)?;
    let i00 = g.div(c11, det)?;
    let i01n = g.neg(c01)?;
    let i01 = g.div(i01n, det)?;
    let i11 = g.div(c00, det)?;
    let inv_cov = g.concat(&[i00, i01, i11], 1)?;

    // SH color along the view direction (differentiable through the means).
    let cx = g.constant(Tensor::from_fn(&[n, 3], |i| {
        [cam.center().x, cam.center().y, cam.center().z][i % 3]
    }))?;
    let dvec = g.sub(means, cx)?;
    let dx = col(g, dvec, 0);
    let dyv = col(g, dvec, 1);
    let dz = col(g, dvec, 2);
    let dx2 = g.mul(dx, dx)?;
    let dy2 = g.mul(dyv, dyv)?;
    let dz2 = g.mul(dz, dz)?;
    let dn2 = g.add(dx2, dy2)?;
    let dn2 = g.add(dn2, dz2)?;
    let dn = g.sqrt(dn2)?;
    let ndx = g.div(dx, dn)?;
    let ndy = g.div(dyv, dn)?;
    let ndz = g.div(dz, dn)?;
    let band = |g: &mut Graph, dir3: ValueId, sign: f64, coeffs: ValueId| -> ValueId {
        let s = g.mul_scalar(dir3, sign * SH_C1).unwrap();
        g.mul(s, coeffs).unwrap()
    };
    let tile3 = |g: &mut Graph, col: ValueId| -> ValueId {
        g.concat(&[col, col, col], 1).unwrap()
    };
    let ndy3 = tile3(g, ndy);
    let ndz3 = tile3(g, ndz);
    let ndx3 = tile3(g, ndx);
    let shn_a = g.slice(shn, 1, 0, 3)?;
    let shn_b = g.slice(shn, 1, 3, 3)?;
    let shn_c = g.slice(shn, 1, 6, 3)?;
    let b1 = band(g, ndy3, -1.0, shn_a);
    let b2 = band(g, ndz3, 1.0, shn_b);
    let b3 = band(g, ndx3, -1.0, shn_c);
    let rgb = g.add(sh0, b1)?;
    let rgb = g.add(rgb, b2)?;
    let rgb = g.add(rgb, b3)?;
    let rgb = g.relu(rgb)?;
    let rgb = g.min_scalar(rgb, 1.0)?;

    // The compositor kernel with frozen order and footprints.
    let op = Rc::new(CompositeOp {
        width: cam.width,
        height: cam.height,
        order: plan.order.clone(),
        rects: plan.rects.clone(),
    });
    Ok(g.custom(op, &[means2d, inv_cov, opac, rgb])?)
}

/// Per-pixel front-to-back compositor as a differentiable kernel.
/// Inputs: means2d (N,2), inv_cov (N,3), opacity (N,1), rgb (N,3).
/// Output: (H,W,4) RGBA over black.
#[derive(Debug)]
struct CompositeOp {
    width: usize,
    height: usize,
    order: Vec<usize>,
    rects: Vec<[i32; 4]>,
}

impl TapeOp for CompositeOp {
    fn name(&self) -> &'static str {
        "composite_splats"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, gavatar_tensor::Error> {
        let [means, inv_cov, opacity, rgb] = inputs else {
            return Err(gavatar_tensor::Error::InvalidShape {
                op: "composite_splats",
                shape: vec![],
                why: "expected 4 inputs".into(),
            });
        };
        let n = means.shape()[0];
        if inv_cov.shape() != [n, 3] || opacity.shape() != [n, 1] || rgb.shape() != [n, 3] {
            return Err(gavatar_tensor::Error::ShapeMismatch {
                op: "composite_splats",
                lhs: means.shape().to_vec(),
                rhs: inv_cov.shape().to_vec(),
            });
        }
        let (tw, _th, lists) = tile_lists(&self.order, &self.rects, self.width, self.height);
        let mut out = vec![0.0; self.height * self.width * 4];
        let (md, id, od, cd) = (means.data(), inv_cov.data(), opacity.data(), rgb.data());
        for py in 0..self.height {
            for px in 0..self.width {
                let list = &lists[(py / TILE) * tw + px / TILE];
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let mut t = 1.0f64;
                let off = (py * self.width + px) * 4;
                for &oi in list {
                    let si = self.order[oi as usize];
                    let r = self.rects[si];
                    if (px as i32) < r[0]
                        || (px as i32) >= r[2]
                        || (py as i32) < r[1]
                        || (py as i32) >= r[3]
                    {
                        continue;
                    }
                    let dx = fx - md[2 * si];
                    let dy = fy - md[2 * si + 1];
                    let q = id[3 * si] * dx * dx
                        + 2.0 * (id[3 * si + 1] * dx * dy)
                        + id[3 * si + 2] * dy * dy;
                    let alpha = od[si] * (-0.5 * q).exp();
                    let w = alpha * t;
                    out[off] += cd[3 * si] * w;
                    out[off + 1] += cd[3 * si + 1] * w;
                    out[off + 2] += cd[3 * si + 2] * w;
                    out[off + 3] += w;
                    t *= 1.0 - alpha;
                }
            }
        }
        Tensor::new(&[self.height, self.width, 4], out)
    }

    fn vjp(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let [means, inv_cov, opacity, rgb] = inputs else { unreachable!() };
        let n = means.shape()[0];
        let (md, id, od, cd) = (means.data(), inv_cov.data(), opacity.data(), rgb.data());
        let (tw, _th, lists) = tile_lists(&self.order, &self.rects, self.width, self.height);
        let go = grad_out.data();
        let mut g_means = vec![0.0; n * 2];
        let mut g_inv = vec![0.0; n * 3];
        let mut g_opac = vec![0.0; n];
        let mut g_rgb = vec![0.0; n * 3];
        // scratch per pixel: (splat, alpha, t_before, gauss_factor, dx, dy)
        let mut contribs: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
        for py in 0..self.height {
            for px in 0..self.width {
                let list = &lists[(py / TILE) * tw + px / TILE];
                if list.is_empty() {
                    continue;
                }
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                contribs.clear();
                let mut t = 1.0f64;
                for &oi in list {
                    let si = self.order[oi as usize];
                    let r = self.rects[si];
                    if (px as i32) < r[0]
                        || (px as i32) >= r[2]
                        || (py as i32) < r[1]
                        || (py as i32) >= r[3]
                    {
                        continue;
                    }
                    let dx = fx - md[2 * si];
                    let dy = fy - md[2 * si + 1];
                    let q = id[3 * si] * dx * dx
                        + 2.0 * (id[3 * si + 1] * dx * dy)
                        + id[3 * si + 2] * dy * dy;
                    let gauss = (-0.5 * q).exp();
                    let alpha = od[si] * gauss;
                    contribs.push((si, alpha, t, gauss, dx, dy));
                    t *= 1.0 - alpha;
                }
                let off = (py * self.width + px) * 4;
                let gc = [go[off], go[off + 1], go[off + 2]];
                let ga = go[off + 3];
                if gc == [0.0; 3] && ga == 0.0 {
                    continue;
                }
                // suffix sums over later splats
                let mut s_c = [0.0f64; 3];
                let mut s_a = 0.0f64;
                for &(si, alpha, t_i, gauss, dx, dy) in contribs.iter().rev() {
                    let w = alpha * t_i;
                    // color gradient
                    for ch in 0..3 {
                        g_rgb[3 * si + ch] += gc[ch] * w;
                    }
                    // alpha gradient
                    let om = 1.0 - alpha;
                    let mut dl_dalpha = 0.0;
                    for ch in 0..3 {
                        let suffix = if om > 1e-12 { s_c[ch] / om } else { 0.0 };
                        dl_dalpha += gc[ch] * (cd[3 * si + ch] * t_i - suffix);
                    }
                    let suffix_a = if om > 1e-12 { s_a / om } else { 0.0 };
                    dl_dalpha += ga * (t_i - suffix_a);
                    // alpha = opacity * gauss ; gauss = exp(-q/2)
                    g_opac[si] += dl_dalpha * gauss;
                    let dl_dq = dl_dalpha * od[si] * gauss * -0.5;
                    g_inv[3 * si] += dl_dq * dx * dx;
                    g_inv[3 * si + 1] += dl_dq * 2.0 * dx * dy;
                    g_inv[3 * si + 2] += dl_dq * dy * dy;
                    let dq_ddx = 2.0 * (id[3 * si] * dx + id[3 * si + 1] * dy);
                    let dq_ddy = 2.0 * (id[3 * si + 1] * dx + id[3 * si + 2] * dy);
                    // d delta / d mean = -1
                    g_means[2 * si] -= dl_dq * dq_ddx;
                    g_means[2 * si + 1] -= dl_dq * dq_ddy;
                    // grow suffix
                    for ch in 0..3 {
                        s_c[ch] += cd[3 * si + ch] * w;
                    }
                    s_a += w;
                }
            }
        }
        vec![
            Some(Tensor::new(&[n, 2], g_means).unwrap()),
            Some(Tensor::new(&[n, 3], g_inv).unwrap()),
            Some(Tensor::new(&[n, 1], g_opac).unwrap()),
            Some(Tensor::new(&[n, 3], g_rgb).unwrap()),
        ]
    }
}
