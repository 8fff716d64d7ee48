//! Localized pose masking and the per-body-part PCA priors: each anchor sees
//! only the pose parameters that can physically move it, and poses (and
//! later, predicted latents) are clamped to +/-2 sigma in local PCA spaces
//! at both training and drive time.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::hierarchy::{Hierarchy, KnnGrid};
use crate::mesh::TemplateMesh;
use crate::skeleton::Skeleton;
use crate::Error;

/// Per-anchor binary masks over the pose parameters and the face bit.
#[derive(Debug, Clone)]
pub struct PoseMasks {
    /// Pre-dilation skinning-traced masks, kept for the oracle checks.
    pub base_theta: Vec<Vec<bool>>,
    /// Final masks: one dilation step over the anchor 3-NN graph, then
    /// wrist-mask reuse for the hand groups.
    pub theta: Vec<Vec<bool>>,
    pub phi: Vec<bool>,
}

impl PoseMasks {
    pub fn anchor_count(&self) -> usize {
        self.theta.len()
    }
}

/// Builds the masks for every anchor of a hierarchy.
///
/// Base rule: parameter group of joint `j` is active iff some joint in the
/// kinematic subtree rooted at `j` carries nonzero skinning weight at the
/// anchor (equivalently, perturbing `theta_j` moves the anchor under LBS).
pub fn build_pose_masks(mesh: &TemplateMesh, hierarchy: &Hierarchy) -> Result<PoseMasks, Error> {
    let skeleton = &mesh.skeleton;
    let n_joints = skeleton.joints.len();
    let p = skeleton.param_count();
    let n_anchors = hierarchy.anchors.len();

    let mut base_theta = Vec::with_capacity(n_anchors);
    for anchor in &hierarchy.anchors {
        let mut joint_active = vec![false; n_joints];
        for &(j, w) in &anchor.skinning.0 {
            if j >= n_joints {
                return Err(Error::Invalid(format!(
                    "anchor skinning references joint {} of a {}-joint skeleton",
                    j, n_joints
                )));
            }
            if w > 0.0 {
                // j and every ancestor moves this anchor
                let mut cur = Some(j);
                while let Some(k) = cur {
                    if joint_active[k] {
                        break;
                    }
                    joint_active[k] = true;
                    cur = skeleton.joints[k].parent;
                }
            }
        }
        let mut mask = vec![false; p];
        for (j, &a) in joint_active.iter().enumerate() {
            if a {
                mask[3 * j] = true;
                mask[3 * j + 1] = true;
                mask[3 * j + 2] = true;
            }
        }
        base_theta.push(mask);
    }

    // One dilation step: propagate each anchor's active entries to its three
    // nearest anchors.
    let anchor_pos: Vec<Vector3<f64>> = hierarchy.anchors.iter().map(|a| a.position).collect();
    let grid = KnnGrid::build(&anchor_pos);
    let mut theta = base_theta.clone();
    for (j, pos) in anchor_pos.iter().enumerate() {
        for n in grid.nearest_k(pos, 3, Some(j)) {
            for k in 0..p {
                if base_theta[j][k] {
                    theta[n][k] = true;
                }
            }
        }
    }

    // Wrist-mask reuse: every hand/finger parameter of a side copies the
    // wrist activation for that side (union with the existing mask).
    for (name, joints) in &skeleton.groups {
        if !name.contains("hand") {
            continue;
        }
        let Some(wrist) = skeleton.wrist_of(joints) else { continue };
        for mask in &mut theta {
            let wrist_active =
                mask[3 * wrist] || mask[3 * wrist + 1] || mask[3 * wrist + 2];
            if wrist_active {
                for &j in joints {
                    mask[3 * j] = true;
                    mask[3 * j + 1] = true;
                    mask[3 * j + 2] = true;
                }
            }
        }
    }

    let phi = hierarchy.anchors.iter().map(|a| mesh.face_region_contains(a.uv)).collect();

    Ok(PoseMasks { base_theta, theta, phi })
}

/// Elementwise localization: `theta_hat = m .* theta`, `phi_hat = m_phi * phi`.
pub fn localize(
    theta: &[f64],
    phi: &[f64],
    mask_theta: &[bool],
    mask_phi: bool,
) -> Result<(Vec<f64>, Vec<f64>), Error> {
    if theta.len() != mask_theta.len() {
        return Err(Error::Invalid(format!(
            "theta has {} entries, mask has {}",
            theta.len(),
            mask_theta.len()
        )));
    }
    let theta_hat = theta
        .iter()
        .zip(mask_theta)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    let phi_hat = phi.iter().map(|&v| if mask_phi { v } else { 0.0 }).collect();
    Ok((theta_hat, phi_hat))
}

/// One PCA basis: mean, `k` orthonormal components (row-major `k x d`), and
/// the per-component standard deviations used for clamping.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub dim: usize,
    pub k: usize,
    pub mean: Vec<f64>,
    pub components: Vec<f64>,
    pub sigma: Vec<f64>,
    /// True when the data was rank-deficient (some sigma is exactly 0).
    pub degenerate: bool,
}

impl PcaBasis {
    /// Mean-centered PCA via eigendecomposition of the sample covariance,
    /// components sorted by descending eigenvalue, sigma_i = sqrt(lambda_i).
    pub fn fit(data: &[f64], n: usize, d: usize, k: usize) -> Result<Self, Error> {
        if n < 2 || data.len() != n * d || k == 0 || k > d {
            return Err(Error::Invalid(format!(
                "pca fit: n={} d={} k={} data_len={}",
                n, d, k, data.len()
            )));
        }
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for row in data.chunks(d) {
            let c = DVector::from_iterator(d, row.iter().zip(&mean).map(|(v, m)| v - m));
            cov.syger(1.0 / (n as f64 - 1.0), &c, &c, 1.0);
        }
        // syger fills the lower triangle; mirror it.
        for i in 0..d {
            for j in (i + 1)..d {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut components = Vec::with_capacity(k * d);
        let mut sigma = Vec::with_capacity(k);
        for &oi in order.iter().take(k) {
            let col = eig.eigenvectors.column(oi);
            // deterministic sign: largest-magnitude entry positive
            let pivot = (0..d).max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap()).unwrap();
            let s = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                components.push(col[i] * s);
            }
            sigma.push(eig.eigenvalues[oi].max(0.0).sqrt());
        }
        let degenerate = sigma.iter().any(|&s| s == 0.0);
        Ok(Self { dim: d, k, mean, components, sigma, degenerate })
    }

    /// Coefficients `c = V (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|ci| {
                let row = &self.components[ci * self.dim..(ci + 1) * self.dim];
                row.iter().zip(x.iter().zip(&self.mean)).map(|(v, (xi, m))| v * (xi - m)).sum()
            })
            .collect()
    }

    /// Reconstruction `x = mean + V^T c`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (ci, &c) in coeffs.iter().enumerate() {
            let row = &self.components[ci * self.dim..(ci + 1) * self.dim];
            for (xi, v) in x.iter_mut().zip(row) {
                *xi += c * v;
            }
        }
        x
    }

    /// Project, clamp each coefficient to +/- `n_sigma` sigma, reconstruct.
    pub fn clamp_reconstruct(&self, x: &[f64], n_sigma: f64) -> Vec<f64> {
        let mut c = self.project(x);
        for (ci, s) in c.iter_mut().zip(&self.sigma) {
            let lim = n_sigma * s;
            *ci = ci.clamp(-lim, lim);
        }
        self.reconstruct(&c)
    }
}

/// Per-body-part pose prior: one PCA basis per group, over the group's
/// parameter indices. The global rigid transform is never part of any group.
#[derive(Debug, Clone)]
pub struct PosePrior {
    /// (group name, sorted parameter indices into theta)
    pub groups: Vec<(String, Vec<usize>)>,
    pub bases: Vec<PcaBasis>,
}

pub const POSE_PRIOR_COMPONENTS: usize = 5;
pub const PRIOR_SIGMA: f64 = 2.0;

/// Fits one 5-component PCA per skeleton group from training poses.
pub fn fit_pose_prior(thetas: &[Vec<f64>], skeleton: &Skeleton) -> Result<PosePrior, Error> {
    if thetas.len() < 6 {
        return Err(Error::Invalid(format!(
            "pose prior needs >= 6 training poses, got {}",
            thetas.len()
        )));
    }
    let p = skeleton.param_count();
    if thetas.iter().any(|t| t.len() != p) {
        return Err(Error::Invalid("training pose has wrong parameter count".into()));
    }
    let mut groups = Vec::new();
    let mut bases = Vec::new();
    for (name, joints) in &skeleton.groups {
        let mut params: Vec<usize> = joints.iter().flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2]).collect();
        params.sort_unstable();
        let d = params.len();
        let mut data = Vec::with_capacity(thetas.len() * d);
        for t in thetas {
            for &pi in &params {
                data.push(t[pi]);
            }
        }
        let basis = PcaBasis::fit(&data, thetas.len(), d, POSE_PRIOR_COMPONENTS.min(d))?;
        groups.push((name.clone(), params));
        bases.push(basis);
    }
    Ok(PosePrior { groups, bases })
}

impl PosePrior {
    /// Clamp a pose into the prior: per group, project to PCA space, clamp
    /// coefficients to +/-2 sigma, reconstruct. Parameters outside every
    /// group pass through unchanged.
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = theta.to_vec();
        for ((_, params), basis) in self.groups.iter().zip(&self.bases) {
            let x: Vec<f64> = params.iter().map(|&i| theta[i]).collect();
            let clamped = basis.clamp_reconstruct(&x, PRIOR_SIGMA);
            for (&i, v) in params.iter().zip(&clamped) {
                out[i] = *v;
            }
        }
        out
    }
}

/// Per-anchor PCA prior over appearance codes, default 8 components.
#[derive(Debug, Clone)]
pub struct LatentPrior {
    pub per_anchor: Vec<PcaBasis>,
    pub n_latent: usize,
}

pub const LATENT_PRIOR_COMPONENTS: usize = 8;

/// Fits the latent prior from per-frame, per-anchor codes
/// (`latents[frame]` is row-major `(anchors, n_latent)`).
pub fn fit_latent_prior(
    latents: &[Vec<f64>],
    n_anchors: usize,
    n_latent: usize,
    k: usize,
) -> Result<LatentPrior, Error> {
    if latents.len() < 2 {
        return Err(Error::Invalid("latent prior needs >= 2 frames".into()));
    }
    let mut per_anchor = Vec::with_capacity(n_anchors);
    for a in 0..n_anchors {
        let mut data = Vec::with_capacity(latents.len() * n_latent);
        for frame in latents {
            if frame.len() != n_anchors * n_latent {
                return Err(Error::Invalid("latent frame has wrong size".into()));
            }
            data.extend_from_slice(&frame[a * n_latent..(a + 1) * n_latent]);
        }
        per_anchor.push(PcaBasis::fit(&data, latents.len(), n_latent, k.min(n_latent))?);
    }
    Ok(LatentPrior { per_anchor, n_latent })
}

impl LatentPrior {
    /// Clamp per-anchor codes (row-major `(anchors, n_latent)`).
    pub fn apply(&self, latents: &[f64]) -> Result<Vec<f64>, Error> {
        if latents.len() != self.per_anchor.len() * self.n_latent {
            return Err(Error::Invalid("latent rows do not match fitted prior".into()));
        }
        let mut out = Vec::with_capacity(latents.len());
        for (a, basis) in self.per_anchor.iter().enumerate() {
            let row = &latents[a * self.n_latent..(a + 1) * self.n_latent];
            out.extend(basis.clamp_reconstruct(row, PRIOR_SIGMA));
        }
        Ok(out)
    }
}

/// Independent oracles used by test suites. They deliberately avoid the mask
/// and prior code paths above.
pub mod oracles {
    use nalgebra::Vector3;

    use crate::mesh::SurfacePoint;
    use crate::skeleton::{lbs, Pose, Skeleton};

    /// Brute-force perturbation-support mask: perturb each pose parameter by
    /// `eps` from the identity pose and flag it when the anchor's LBS
    /// position moves by more than `tol`.
    pub fn perturbation_support_mask(
        skeleton: &Skeleton,
        point: &SurfacePoint,
        eps: f64,
        tol: f64,
    ) -> Vec<bool> {
        let p = skeleton.param_count();
        let rest = skeleton.rest_world();
        let base = point.position;
        let mut mask = vec![false; p];
        let mut pose = Pose::identity(p);
        for i in 0..p {
            pose.theta[i] = eps;
            let world = skeleton.forward_kinematics(&pose).unwrap();
            let moved = lbs(
                &[base],
                std::slice::from_ref(&point.skinning),
                &rest,
                &world,
            )
            .unwrap()[0];
            mask[i] = (moved - base).norm() > tol;
            pose.theta[i] = 0.0;
        }
        mask
    }

    /// Sum of squared distances from a cloud to its mean, per axis - used as
    /// the sampling-statistics oracle for PCA tests.
    pub fn per_axis_std(points: &[Vector3<f64>]) -> Vector3<f64> {
        let n = points.len() as f64;
        let mean = points.iter().sum::<Vector3<f64>>() / n;
        let mut var = Vector3::zeros();
        for p in points {
            let d = p - mean;
            var += d.component_mul(&d);
        }
        (var / (n - 1.0)).map(f64::sqrt)
    }
}
