//! Rasterizer correctness: analytic projection cases, compositing algebra,
//! fast-vs-differentiable path equivalence, and finite-difference gradients
//! through the full splat pipeline.


use gavatar_core::img::Image;
use gavatar_core::render::{
    composite, plan_raster, project, project_frame, render_differentiable, Camera, GaussianFrame,
    RenderBudget, Splat2D, TapeFrame, COV_EPS,
};
use gavatar_core::Error;
use gavatar_tensor::check::{check_gradients, rel_err};
use gavatar_tensor::{Graph, Tensor};
use nalgebra::{Isometry3, Vector3};
use rand::{Rng, SeedableRng};

fn axis_camera(width: usize, height: usize, fx: f64) -> Camera {
    // camera at origin looking down +z
    Camera {
        fx,
        fy: fx,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        world_to_cam: Isometry3::identity(),
    }
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn random_frame(seed: u64, n: usize, spread: f64, depth: f64) -> GaussianFrame {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut f = GaussianFrame::default();
    for _ in 0..n {
        f.means.push(Vector3::new(
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
            depth + rng.gen_range(-0.3..0.3),
        ));
        let q = [
            rng.gen_range(0.5..1.0),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ];
        let norm = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        f.quats.push([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]);
        f.scales.push([
            rng.gen_range(0.02..0.1),
            rng.gen_range(0.02..0.1),
            rng.gen_range(0.02..0.1),
        ]);
        f.opacities.push(rng.gen_range(0.3..0.95));
        f.sh0.push([rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]);
        f.shn.push(std::array::from_fn(|_| rng.gen_range(-0.2..0.2)));
    }
    f
}

#[test]
fn axial_isotropic_footprint() {
    let cam = axis_camera(64, 64, 80.0);
    let (d, s) = (4.0, 0.05);
    let splat = project(
        &Vector3::new(0.0, 0.0, d),
        &identity_quat(),
        &[s, s, s],
        0.8,
        &[0.5, 0.5, 0.5],
        &[0.0; 9],
        &cam,
    )
    .unwrap();
    let expect = (cam.fx * s / d).powi(2);
    assert!(rel_err(splat.cov[0], expect + COV_EPS) < 1e-9, "c00 {}", splat.cov[0]);
    assert!(rel_err(splat.cov[2], expect + COV_EPS) < 1e-9);
    assert!(splat.cov[1].abs() < 1e-12);
    // center-ray mean projects to (cx, cy)
    assert!((splat.mean[0] - cam.cx).abs() < 1e-12 && (splat.mean[1] - cam.cy).abs() < 1e-12);
    assert_eq!(splat.depth, d);
}

#[test]
fn behind_camera_is_culled() {
    let cam = axis_camera(32, 32, 40.0);
    let s = project(
        &Vector3::new(0.0, 0.0, -1.0),
        &identity_quat(),
        &[0.05; 3],
        0.5,
        &[0.5; 3],
        &[0.0; 9],
        &cam,
    );
    assert!(s.is_none());
}

#[test]
fn camera_roll_rotates_covariance() {
    let cam = axis_camera(64, 64, 70.0);
    let mut rolled = cam.clone();
    rolled.world_to_cam =
        Isometry3::rotation(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)) * cam.world_to_cam;
    let mean = Vector3::new(0.0, 0.0, 3.0);
    let quat = {
        // anisotropic, rotated gaussian
        let axis = Vector3::new(0.3f64, 0.8, 0.1).normalize() * 0.7;
        let q = nalgebra::UnitQuaternion::from_scaled_axis(axis);
        [q.w, q.i, q.j, q.k]
    };
    let scale = [0.08, 0.02, 0.04];
    let a = project(&mean, &quat, &scale, 0.5, &[0.5; 3], &[0.0; 9], &cam).unwrap();
    let b = project(&mean, &quat, &scale, 0.5, &[0.5; 3], &[0.0; 9], &rolled).unwrap();
    // 90 degree roll: entries swap, off-diagonal flips; eigenvalues preserved
    assert!(rel_err(b.cov[0], a.cov[2]) < 1e-9);
    assert!(rel_err(b.cov[2], a.cov[0]) < 1e-9);
    assert!(rel_err(b.cov[1], -a.cov[1]) < 1e-6);
    let eig = |c: &[f64; 3]| {
        let mid = 0.5 * (c[0] + c[2]);
        let r = (0.25 * (c[0] - c[2]).powi(2) + c[1] * c[1]).sqrt();
        (mid + r, mid - r)
    };
    let (a1, a2) = eig(&a.cov);
    let (b1, b2) = eig(&b.cov);
    assert!(rel_err(a1, b1) < 1e-9 && rel_err(a2, b2) < 1e-9);
}

#[test]
fn single_splat_alpha_equals_opacity_at_center() {
    // splat centered exactly on the center of pixel (8,8)
    let splat = Splat2D {
        mean: [8.5, 8.5],
        cov: [2.0, 0.0, 2.0],
        inv_cov: [0.5, 0.0, 0.5],
        depth: 1.0,
        opacity: 0.77,
        rgb: [1.0, 0.5, 0.25],
    };
    let img = composite(&[Some(splat)], 16, 16, false);
    assert!((img.get(8, 8, 3) - 0.77).abs() < 1e-12);
    assert!((img.get(8, 8, 0) - 0.77).abs() < 1e-12);
}

#[test]
fn two_overlapping_half_alpha_gives_three_quarters() {
    let splat = Splat2D {
        mean: [8.5, 8.5],
        cov: [2.0, 0.0, 2.0],
        inv_cov: [0.5, 0.0, 0.5],
        depth: 1.0,
        opacity: 0.5,
        rgb: [1.0, 1.0, 1.0],
    };
    let mut s2 = splat.clone();
    s2.depth = 2.0;
    let img = composite(&[Some(splat), Some(s2)], 16, 16, false);
    assert!((img.get(8, 8, 3) - 0.75).abs() < 1e-12, "alpha {}", img.get(8, 8, 3));
}

#[test]
fn empty_splat_list_is_black() {
    let img = composite(&[], 8, 8, false);
    assert!(img.data.iter().all(|&v| v == 0.0));
}

#[test]
fn splat_order_permutation_is_bit_exact() {
    let cam = axis_camera(48, 48, 60.0);
    let frame = random_frame(5, 40, 0.5, 3.0);
    let splats = project_frame(&frame, &cam);
    let img1 = composite(&splats, cam.width, cam.height, false);
    let mut shuffled = splats.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let img2 = composite(&shuffled, cam.width, cam.height, false);
    for (a, b) in img1.data.iter().zip(&img2.data) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn alpha_and_channels_stay_in_unit_range() {
    let cam = axis_camera(48, 48, 60.0);
    let frame = random_frame(6, 120, 0.4, 2.5);
    let img = composite(&project_frame(&frame, &cam), cam.width, cam.height, false);
    for px in img.data.chunks(4) {
        for &v in px {
            assert!((0.0..=1.0 + 1e-12).contains(&v), "value {}", v);
        }
    }
}

#[test]
fn integer_pixel_shift_equivariance() {
    let cam = axis_camera(48, 48, 60.0);
    let frame = random_frame(7, 25, 0.25, 3.0);
    let splats = project_frame(&frame, &cam);
    let shifted: Vec<Option<Splat2D>> = splats
        .iter()
        .map(|s| {
            s.as_ref().map(|s| {
                let mut s = s.clone();
                s.mean[0] += 1.0;
                s
            })
        })
        .collect();
    let img1 = composite(&splats, cam.width, cam.height, false);
    let img2 = composite(&shifted, cam.width, cam.height, false);
    // interior: all footprints at x < 40 in img1, compare shifted columns
    for y in 0..48 {
        for x in 4..40 {
            for ch in 0..4 {
                let a = img1.get(y, x, ch);
                let b = img2.get(y, x + 1, ch);
                assert!((a - b).abs() < 1e-10, "pixel ({},{},{}) {} vs {}", y, x, ch, a, b);
            }
        }
    }
}

fn tape_frame_from(g: &mut Graph, f: &GaussianFrame, trainable: bool) -> TapeFrame {
    let n = f.len();
    let mk = |g: &mut Graph, shape: &[usize], data: Vec<f64>, trainable: bool| {
        let t = Tensor::new(shape, data).unwrap();
        if trainable {
            g.param(t).unwrap()
        } else {
            g.constant(t).unwrap()
        }
    };
    TapeFrame {
        means: mk(g, &[n, 3], f.means.iter().flat_map(|v| [v.x, v.y, v.z]).collect(), trainable),
        quats: mk(g, &[n, 4], f.quats.iter().flatten().cloned().collect(), trainable),
        scales: mk(g, &[n, 3], f.scales.iter().flatten().cloned().collect(), trainable),
        opacities: mk(g, &[n, 1], f.opacities.clone(), trainable),
        sh0: mk(g, &[n, 3], f.sh0.iter().flatten().cloned().collect(), trainable),
        shn: mk(g, &[n, 9], f.shn.iter().flatten().cloned().collect(), trainable),
    }
}

#[test]
fn fast_and_differentiable_paths_agree() {
    let cam = axis_camera(40, 40, 50.0);
    let frame = random_frame(8, 60, 0.4, 2.8);
    let fast = composite(&project_frame(&frame, &cam), cam.width, cam.height, false);
    let mut g = Graph::new();
    let tf = tape_frame_from(&mut g, &frame, false);
    let img_id = render_differentiable(&mut g, &tf, &cam, None, RenderBudget::default()).unwrap();
    let diff = g.value(img_id);
    assert_eq!(diff.shape(), &[40, 40, 4]);
    let mut worst = 0.0f64;
    for (a, b) in fast.data.iter().zip(diff.data()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 1e-6, "max pixel deviation {}", worst);
}

#[test]
fn render_budget_is_enforced() {
    let cam = axis_camera(64, 64, 50.0);
    let frame = random_frame(9, 20, 0.4, 2.8);
    let mut g = Graph::new();
    let tf = tape_frame_from(&mut g, &frame, false);
    let err = render_differentiable(
        &mut g,
        &tf,
        &cam,
        None,
        RenderBudget { max_pixel_splats: 100 },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Invalid(_)));
    assert!(err.to_string().contains("budget"));
}

#[test]
fn render_gradients_match_finite_differences() {
    // Full differentiable path (projection + compositing) against central
    // differences with frozen rasterization structure.
    let cam = axis_camera(12, 12, 16.0);
    let frame = random_frame(10, 5, 0.3, 2.5);
    let plan = plan_raster(&frame, &cam);
    let n = frame.len();
    let inputs = vec![
        Tensor::new(&[n, 3], frame.means.iter().flat_map(|v| [v.x, v.y, v.z]).collect()).unwrap(),
        Tensor::new(&[n, 4], frame.quats.iter().flatten().cloned().collect()).unwrap(),
        Tensor::new(&[n, 3], frame.scales.iter().flatten().cloned().collect()).unwrap(),
        Tensor::new(&[n, 1], frame.opacities.clone()).unwrap(),
        Tensor::new(&[n, 3], frame.sh0.iter().flatten().cloned().collect()).unwrap(),
        Tensor::new(&[n, 9], frame.shn.iter().flatten().cloned().collect()).unwrap(),
    ];
    let report = check_gradients(
        &inputs,
        |g, ids| {
            let tf = TapeFrame {
                means: ids[0],
                quats: ids[1],
                scales: ids[2],
                opacities: ids[3],
                sh0: ids[4],
                shn: ids[5],
            };
            let img =
                render_differentiable(g, &tf, &cam, Some(&plan), RenderBudget::default()).unwrap();
            // uneven pixel weighting to break symmetry
            let wts = g
                .constant(Tensor::from_fn(&[12, 12, 4], |i| 0.3 + ((i * 31) % 7) as f64 * 0.17))
                .unwrap();
            let wimg = g.mul(img, wts).unwrap();
            g.mean_all(wimg).unwrap()
        },
        1e-5,
    );
    assert!(
        report.max_rel_err < 1e-3,
        "render grad rel err {} ({:?})",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn occluded_splat_color_gets_zero_gradient() {
    // Both gaussians sit on the optical axis; the image center (pixel 4,4 of
    // a 9x9 image with cx = cy = 4.5) coincides exactly with their projected
    // means. The front splat has opacity 1, so at that pixel its alpha is
    // exactly 1 and the transmittance behind it is exactly 0.
    let cam = axis_camera(9, 9, 10.0);
    let frame = GaussianFrame {
        means: vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 2.0)],
        quats: vec![identity_quat(); 2],
        scales: vec![[0.1; 3]; 2],
        opacities: vec![1.0, 0.8],
        sh0: vec![[0.9, 0.1, 0.2], [0.3, 0.4, 0.5]],
        shn: vec![[0.0; 9]; 2],
    };
    let mut g = Graph::new();
    let tf = tape_frame_from(&mut g, &frame, true);
    let plan = plan_raster(&frame, &cam);
    let img =
        render_differentiable(&mut g, &tf, &cam, Some(&plan), RenderBudget::default()).unwrap();
    let center = g.slice(img, 0, 4, 1).unwrap();
    let center = g.slice(center, 1, 4, 1).unwrap();
    let red = g.slice(center, 2, 0, 1).unwrap();
    let loss = g.sum_all(red).unwrap();
    let grads = g.backward(loss).unwrap();
    let gsh0 = grads.get_or_zeros(tf.sh0, &[2, 3]);
    let back_grad = gsh0.data()[3].abs() + gsh0.data()[4].abs() + gsh0.data()[5].abs();
    assert_eq!(back_grad, 0.0, "occluded splat must receive zero color gradient");
    assert!(gsh0.data()[0].abs() > 1e-3, "front splat should receive gradient");
}

#[test]
fn image_io_for_renders() {
    let cam = axis_camera(32, 32, 40.0);
    let frame = random_frame(11, 30, 0.4, 2.5);
    let img4 = composite(&project_frame(&frame, &cam), cam.width, cam.height, true);
    let mut rgb = Image::new(32, 32, 3);
    for y in 0..32 {
        for x in 0..32 {
            for ch in 0..3 {
                rgb.set(y, x, ch, img4.get(y, x, ch));
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    rgb.save_png(&dir.path().join("r.png")).unwrap();
    rgb.save_npy(&dir.path().join("r.npy")).unwrap();
    let back = Image::load_npy(&dir.path().join("r.npy")).unwrap();
    assert!(rgb.mean_abs_diff(&back) < 1e-7);
}
