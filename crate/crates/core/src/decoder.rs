//! The avatar decoder: per-anchor spatial MLPs emit corrective-basis
//! coefficients, control points propagate smooth positional displacement,
//! per-Gaussian bases assemble properties through property-specific
//! activations, and linear blend skinning poses the result into world space.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use gavatar_tensor::{Graph, ParamStore, Tensor, ValueId};

use crate::hierarchy::{Hierarchy, KnnGrid};
use crate::localization::{localize, PoseMasks, PosePrior};
use crate::mesh::TemplateMesh;
use crate::render::TapeFrame;
use crate::skeleton::{blend_delta, skinning_deltas, Pose};
use crate::Error;

/// Hard upper clamp on Gaussian scale (meters).
pub const SCALE_CLAMP: f64 = 0.2;
/// Output range scale of the degree-1 SH activation.
pub const SHN_SCALE: f64 = 0.5;
/// Corrective-basis width B: 16 coefficients for the Gaussian basis and 16
/// for the control-point basis.
pub const BASIS: usize = 16;

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Hidden layer sizes of every anchor MLP. Full scale is
    /// [512, 256, 256, 256]; desk scale defaults to [64, 32, 32, 32].
    pub hidden: Vec<usize>,
    pub theta_dim: usize,
    pub phi_dim: usize,
    pub n_latent: usize,
}

impl DecoderConfig {
    pub fn desk_scale(theta_dim: usize, phi_dim: usize) -> Self {
        Self { hidden: vec![64, 32, 32, 32], theta_dim, phi_dim, n_latent: 16 }
    }

    pub fn full_scale(theta_dim: usize, phi_dim: usize) -> Self {
        Self { hidden: vec![512, 256, 256, 256], theta_dim, phi_dim, n_latent: 16 }
    }

    pub fn input_dim(&self) -> usize {
        self.theta_dim + self.phi_dim + self.n_latent
    }
}

/// Schedule gates: multiplicative 0/1 factors owned by the training loop.
#[derive(Debug, Clone, Copy)]
pub struct Gates {
    /// 0 disables all MLP-driven correctives (first 500 iterations).
    pub correctives: f64,
    /// 0 disables the degree-1 SH band (first 60% of iterations).
    pub sh_degree1: f64,
}

impl Gates {
    pub fn all_on() -> Self {
        Self { correctives: 1.0, sh_degree1: 1.0 }
    }
}

fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Registers every decoder parameter. MLP output heads start at zero so the
/// correctives begin as pure biases; `color_init` seeds the sh0 bias with
/// per-Gaussian RGB (atanh-mapped), e.g. sampled from the mean texture.
pub fn init_decoder_params(
    store: &mut ParamStore,
    hier: &Hierarchy,
    cfg: &DecoderConfig,
    rng: &mut impl Rng,
    color_init: Option<&[[f64; 3]]>,
) -> Result<(), Error> {
    let n_a = hier.anchors.len();
    let (n_c, n_g) = (hier.control_points.len(), hier.gaussians.len());
    let mut dims = vec![cfg.input_dim()];
    dims.extend_from_slice(&cfg.hidden);
    for a in 0..n_a {
        for l in 0..cfg.hidden.len() {
            let (din, dout) = (dims[l], dims[l + 1]);
            let std = (2.0 / din as f64).sqrt();
            store.insert(format!("dec/mlp/{}/w{}", a, l), normal_init(rng, &[din, dout], std));
            store.insert(format!("dec/mlp/{}/b{}", a, l), Tensor::zeros(&[dout]));
        }
        let last = *dims.last().unwrap();
        store.insert(format!("dec/mlp/{}/head_g_w", a), Tensor::zeros(&[last, BASIS]));
        store.insert(format!("dec/mlp/{}/head_g_b", a), Tensor::zeros(&[BASIS]));
        store.insert(format!("dec/mlp/{}/head_c_w", a), Tensor::zeros(&[last, BASIS]));
        store.insert(format!("dec/mlp/{}/head_c_b", a), Tensor::zeros(&[BASIS]));
    }

    // nearest-neighbor spacing seeds the scale bias, 3DGS-style
    let gauss_pos: Vec<_> = hier.gaussians.iter().map(|p| p.position).collect();
    let grid = KnnGrid::build(&gauss_pos);
    let mut scale_bias = Vec::with_capacity(n_g * 3);
    for (i, p) in gauss_pos.iter().enumerate() {
        let nn = grid.nearest_k(p, 1, Some(i));
        let d = if nn.is_empty() { 0.01 } else { (gauss_pos[nn[0]] - p).norm() };
        let s = (1.5 * d).clamp(1e-4, 0.19);
        let ln = s.ln();
        scale_bias.extend_from_slice(&[ln, ln, ln]);
    }
    store.insert("dec/g/scale_bias", Tensor::new(&[n_g, 3], scale_bias)?);
    store.insert("dec/g/scale_basis", Tensor::zeros(&[n_g, 3 * BASIS]));
    let mut rot = Tensor::zeros(&[n_g, 4]);
    for i in 0..n_g {
        rot.data_mut()[4 * i] = 1.0;
    }
    store.insert("dec/g/rot_bias", rot);
    store.insert("dec/g/rot_basis", Tensor::zeros(&[n_g, 4 * BASIS]));
    // sigmoid(2.2) ~ 0.9 starting opacity
    store.insert("dec/g/opac_bias", Tensor::full(&[n_g, 1], 2.2));
    let sh0_bias = match color_init {
        Some(colors) => {
            if colors.len() != n_g {
                return Err(Error::Invalid("color init length mismatch".into()));
            }
            Tensor::from_fn(&[n_g, 3], |i| {
                let c = colors[i / 3][i % 3].clamp(0.02, 0.98);
                // inverse of (tanh+1)/2
                0.5 * ((c / (1.0 - c)).ln())
            })
        }
        None => Tensor::zeros(&[n_g, 3]),
    };
    store.insert("dec/g/sh0_bias", sh0_bias);
    store.insert("dec/g/sh0_basis", Tensor::zeros(&[n_g, 3 * BASIS]));
    store.insert("dec/g/shn_bias", Tensor::zeros(&[n_g, 9]));
    store.insert("dec/g/shn_basis", Tensor::zeros(&[n_g, 9 * BASIS]));
    store.insert("dec/g/pos_offset", Tensor::zeros(&[n_g, 3]));
    store.insert("dec/cp/bias", Tensor::zeros(&[n_c, 3]));
    store.insert("dec/cp/basis", Tensor::zeros(&[n_c, 3 * BASIS]));
    Ok(())
}

fn param(g: &mut Graph, store: &ParamStore, name: &str) -> Result<ValueId, Error> {
    Ok(g.param(store.get(name)?.clone())?)
}

/// Records decoder parameters on a graph and maps names to their leaf ids so
/// gradients can be routed back to the store.
pub struct ParamBinding {
    pub ids: Vec<(String, ValueId)>,
}

impl ParamBinding {
    pub fn new() -> Self {
        Self { ids: Vec::new() }
    }

    pub fn bind(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        name: &str,
    ) -> Result<ValueId, Error> {
        if let Some((_, id)) = self.ids.iter().find(|(n, _)| n == name) {
            return Ok(*id);
        }
        let id = param(g, store, name)?;
        self.ids.push((name.to_string(), id));
        Ok(id)
    }

    /// Collect gradients per parameter name after a backward pass.
    pub fn gradients(
        &self,
        grads: &gavatar_tensor::Gradients,
    ) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (name, id) in &self.ids {
            if let Some(grad) = grads.get(*id) {
                out.insert(name.clone(), grad.clone());
            }
        }
        out
    }
}

impl Default for ParamBinding {
    fn default() -> Self {
        Self::new()
    }
}

/// One anchor MLP forward: input is concat(theta_hat, phi_hat, latent).
/// Returns the Gaussian-basis and control-point-basis coefficient rows.
pub fn decode_anchor(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut ParamBinding,
    cfg: &DecoderConfig,
    anchor: usize,
    theta_hat: &[f64],
    phi_hat: &[f64],
    latent_row: ValueId,
) -> Result<(ValueId, ValueId), Error> {
    if theta_hat.len() != cfg.theta_dim || phi_hat.len() != cfg.phi_dim {
        return Err(Error::Invalid(format!(
            "decode_anchor inputs {}+{} do not match config {}+{}",
            theta_hat.len(),
            phi_hat.len(),
            cfg.theta_dim,
            cfg.phi_dim
        )));
    }
    if g.shape(latent_row) != [1, cfg.n_latent] {
        return Err(Error::Invalid("latent row must be (1, n_latent)".into()));
    }
    let mut fixed = Vec::with_capacity(cfg.theta_dim + cfg.phi_dim);
    fixed.extend_from_slice(theta_hat);
    fixed.extend_from_slice(phi_hat);
    let fixed = g.constant(Tensor::new(&[1, fixed.len()], fixed)?)?;
    let mut h = g.concat(&[fixed, latent_row], 1)?;
    for l in 0..cfg.hidden.len() {
        let w = binding.bind(g, store, &format!("dec/mlp/{}/w{}", anchor, l))?;
        let b = binding.bind(g, store, &format!("dec/mlp/{}/b{}", anchor, l))?;
        h = g.linear(h, w, b)?;
        h = g.relu(h)?;
    }
    let wg = binding.bind(g, store, &format!("dec/mlp/{}/head_g_w", anchor))?;
    let bg = binding.bind(g, store, &format!("dec/mlp/{}/head_g_b", anchor))?;
    let wa = g.linear(h, wg, bg)?;
    let wc_w = binding.bind(g, store, &format!("dec/mlp/{}/head_c_w", anchor))?;
    let wc_b = binding.bind(g, store, &format!("dec/mlp/{}/head_c_b", anchor))?;
    let wc = g.linear(h, wc_w, wc_b)?;
    Ok((wa, wc))
}

/// Per-row basis contraction: basis `(n, k*B)` against coefficients `(n, B)`,
/// giving `(n, k)` corrective offsets.
pub fn basis_dot(
    g: &mut Graph,
    basis: ValueId,
    coeffs: ValueId,
    n: usize,
    k: usize,
) -> Result<ValueId, Error> {
    let tiled = g.concat(&vec![coeffs; k], 1)?;
    let prod = g.mul(basis, tiled)?;
    let stacked = g.reshape(prod, &[n * k, BASIS])?;
    let ones = g.constant(Tensor::ones(&[BASIS, 1]))?;
    let summed = g.matmul(stacked, ones)?;
    Ok(g.reshape(summed, &[n, k])?)
}

/// Everything the training loop needs from one decoded frame.
pub struct DecodedFrame {
    pub tape: TapeFrame,
    /// Control-point displacements (N_c, 3), for the smoothness loss.
    pub cp_disp: ValueId,
    /// Anchor coefficient stacks (N_a, B), post-gate.
    pub anchor_wa: ValueId,
    pub anchor_wc: ValueId,
    /// The pose actually used after the prior clamp.
    pub theta_clamped: Vec<f64>,
}

/// Decodes and poses one frame on the computation record.
///
/// Pipeline: clamp pose via the prior, localize per anchor, run the anchor
/// MLPs, interpolate coefficients to control points and Gaussians, assemble
/// displacements and properties, pose with LBS.
#[allow(clippy::too_many_arguments)]
pub fn pose_frame(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut ParamBinding,
    mesh: &TemplateMesh,
    hier: &Hierarchy,
    masks: &PoseMasks,
    prior: Option<&PosePrior>,
    pose: &Pose,
    phi: &[f64],
    latents: ValueId,
    cfg: &DecoderConfig,
    gates: Gates,
) -> Result<DecodedFrame, Error> {
    let n_a = hier.anchors.len();
    let n_c = hier.control_points.len();
    let n_g = hier.gaussians.len();
    if g.shape(latents) != [n_a, cfg.n_latent] {
        return Err(Error::Invalid(format!(
            "latents shape {:?} does not match ({}, {})",
            g.shape(latents),
            n_a,
            cfg.n_latent
        )));
    }
    if masks.anchor_count() != n_a {
        return Err(Error::Invalid("mask set does not match anchor count".into()));
    }

    // 1. pose prior (train/drive single code path), then FK on the clamped pose
    let theta_clamped = match prior {
        Some(p) => p.apply(&pose.theta),
        None => pose.theta.clone(),
    };
    let clamped_pose = Pose { theta: theta_clamped.clone(), global: pose.global };
    let rest = mesh.skeleton.rest_world();
    let world = mesh.skeleton.forward_kinematics(&clamped_pose)?;
    let deltas = skinning_deltas(&rest, &world);

    // 2. localized inputs per anchor -> MLP -> coefficient stacks
    let mut wa_rows = Vec::with_capacity(n_a);
    let mut wc_rows = Vec::with_capacity(n_a);
    for a in 0..n_a {
        let (theta_hat, phi_hat) =
            localize(&theta_clamped, phi, &masks.theta[a], masks.phi[a])?;
        let lat = g.slice(latents, 0, a, 1)?;
        let (wa, wc) = decode_anchor(g, store, binding, cfg, a, &theta_hat, &phi_hat, lat)?;
        wa_rows.push(wa);
        wc_rows.push(wc);
    }
    let wa_stack = g.concat(&wa_rows, 0)?;
    let wc_stack = g.concat(&wc_rows, 0)?;
    let wa_stack = g.mul_scalar(wa_stack, gates.correctives)?;
    let wc_stack = g.mul_scalar(wc_stack, gates.correctives)?;

    // 3. interpolate anchor outputs across the hierarchy
    let w_gauss = g.sparse_mix(
        wa_stack,
        Rc::new(hier.assign.g_anchor_idx.clone()),
        Rc::new(hier.assign.g_anchor_w.clone()),
        3,
    )?;
    let w_cp = g.sparse_mix(
        wc_stack,
        Rc::new(hier.assign.c_anchor_idx.clone()),
        Rc::new(hier.assign.c_anchor_w.clone()),
        3,
    )?;

    // 4. control-point displacements and Gaussian positions
    let cp_bias = binding.bind(g, store, "dec/cp/bias")?;
    let cp_basis = binding.bind(g, store, "dec/cp/basis")?;
    let cp_corr = basis_dot(g, cp_basis, w_cp, n_c, 3)?;
    let cp_disp = g.add(cp_bias, cp_corr)?;
    let g_from_cp = g.sparse_mix(
        cp_disp,
        Rc::new(hier.assign.g_cp_idx.clone()),
        Rc::new(hier.assign.g_cp_w.clone()),
        3,
    )?;
    let pos_offset = binding.bind(g, store, "dec/g/pos_offset")?;
    let disp = g.add(g_from_cp, pos_offset)?;
    let rest_pos = g.constant(Tensor::new(
        &[n_g, 3],
        hier.gaussians.iter().flat_map(|p| [p.position.x, p.position.y, p.position.z]).collect(),
    )?)?;
    let canonical = g.add(rest_pos, disp)?;

    // 5. properties via the per-Gaussian bases
    let assemble = |g: &mut Graph,
                    binding: &mut ParamBinding,
                    bias_name: &str,
                    basis_name: &str,
                    k: usize|
     -> Result<ValueId, Error> {
        let bias = binding.bind(g, store, bias_name)?;
        let basis = binding.bind(g, store, basis_name)?;
        let corr = basis_dot(g, basis, w_gauss, n_g, k)?;
        Ok(g.add(bias, corr)?)
    };
    let rot_pre = assemble(g, binding, "dec/g/rot_bias", "dec/g/rot_basis", 4)?;
    let scale_pre = assemble(g, binding, "dec/g/scale_bias", "dec/g/scale_basis", 3)?;
    let sh0_pre = assemble(g, binding, "dec/g/sh0_bias", "dec/g/sh0_basis", 3)?;
    let shn_pre = assemble(g, binding, "dec/g/shn_bias", "dec/g/shn_basis", 9)?;

    // scale: exp then hard clamp at 0.2
    let scale_exp = g.exp(scale_pre)?;
    let scales = g.min_scalar(scale_exp, SCALE_CLAMP)?;
    // opacity: sigmoid of the bias only (no corrective by design)
    let opac_bias = binding.bind(g, store, "dec/g/opac_bias")?;
    let opacities = g.sigmoid(opac_bias)?;
    // sh0: (tanh + 1) / 2 maps into [0,1]
    let sh0_t = g.tanh(sh0_pre)?;
    let sh0_t = g.add_scalar(sh0_t, 1.0)?;
    let sh0 = g.mul_scalar(sh0_t, 0.5)?;
    // shN: scaled tanh, gated by the SH schedule
    let shn_t = g.tanh(shn_pre)?;
    let shn_t = g.mul_scalar(shn_t, SHN_SCALE)?;
    let shn = g.mul_scalar(shn_t, gates.sh_degree1)?;

    // 6. canonical rotation: normalize, then compose with the dominant-joint
    // LBS rotation
    let qn2 = {
        let sq = g.mul(rot_pre, rot_pre)?;
        let ones = g.constant(Tensor::ones(&[4, 1]))?;
        let s = g.matmul(sq, ones)?;
        g.sqrt(s)?
    };
    let q_unit = g.div(rot_pre, qn2)?;
    let mut lbs_q = Vec::with_capacity(n_g * 4);
    let mut blend_mats = Vec::with_capacity(n_g * 9);
    let mut blend_trans = Vec::with_capacity(n_g * 3);
    for gp in &hier.gaussians {
        let dom = gp.skinning.dominant_joint();
        let dq = (world[dom] * rest[dom].inverse()).rotation;
        let q = dq.quaternion();
        lbs_q.extend_from_slice(&[q.w, q.i, q.j, q.k]);
        let (m, t) = blend_delta(&gp.skinning, &deltas);
        for r in 0..3 {
            for c in 0..3 {
                blend_mats.push(m[(r, c)]);
            }
        }
        blend_trans.extend_from_slice(&[t.x, t.y, t.z]);
    }
    let quats = quat_mul_const_left(g, &lbs_q, q_unit, n_g)?;

    // 7. LBS to world space
    let means = g.per_point_affine(canonical, Rc::new(blend_mats), Rc::new(blend_trans))?;

    Ok(DecodedFrame {
        tape: TapeFrame { means, quats, scales, opacities, sh0, shn },
        cp_disp,
        anchor_wa: wa_stack,
        anchor_wc: wc_stack,
        theta_clamped,
    })
}

/// Hamilton product `L (x) C` where `L` is a constant per-row quaternion
/// array (n*4, wxyz) and `C` is a tape value of shape (n,4).
fn quat_mul_const_left(
    g: &mut Graph,
    left: &[f64],
    right: ValueId,
    n: usize,
) -> Result<ValueId, Error> {
    let lc = |g: &mut Graph, k: usize| {
        g.constant(Tensor::from_fn(&[n, 1], |i| left[4 * i + k])).unwrap()
    };
    let (lw, lx, ly, lz) = (lc(g, 0), lc(g, 1), lc(g, 2), lc(g, 3));
    let cw = g.slice(right, 1, 0, 1)?;
    let cx = g.slice(right, 1, 1, 1)?;
    let cy = g.slice(right, 1, 2, 1)?;
    let cz = g.slice(right, 1, 3, 1)?;
    let term = |g: &mut Graph, a: ValueId, b: ValueId, sign: f64| -> ValueId {
        let m = g.mul(a, b).unwrap();
        if sign < 0.0 {
            g.neg(m).unwrap()
        } else {
            m
        }
    };
    let w1 = term(g, lw, cw, 1.0);
    let w2 = term(g, lx, cx, -1.0);
    let w3 = term(g, ly, cy, -1.0);
    let w4 = term(g, lz, cz, -1.0);
    let x1 = term(g, lw, cx, 1.0);
    let x2 = term(g, lx, cw, 1.0);
    let x3 = term(g, ly, cz, 1.0);
    let x4 = term(g, lz, cy, -1.0);
    let y1 = term(g, lw, cy, 1.0);
    let y2 = term(g, lx, cz, -1.0);
    let y3 = term(g, ly, cw, 1.0);
    let y4 = term(g, lz, cx, 1.0);
    let z1 = term(g, lw, cz, 1.0);
    let z2 = term(g, lx, cy, 1.0);
    let z3 = term(g, ly, cx, -1.0);
    let z4 = term(g, lz, cw, 1.0);
    let sum4 = |g: &mut Graph, a: ValueId, b: ValueId, c: ValueId, d: ValueId| -> ValueId {
        let s1 = g.add(a, b).unwrap();
        let s2 = g.add(s1, c).unwrap();
        g.add(s2, d).unwrap()
    };
    let qw = sum4(g, w1, w2, w3, w4);
    let qx = sum4(g, x1, x2, x3, x4);
    let qy = sum4(g, y1, y2, y3, y4);
    let qz = sum4(g, z1, z2, z3, z4);
    Ok(g.concat(&[qw, qx, qy, qz], 1)?)
}
