//! Z-buffered triangle rasterization with perspective-correct barycentrics.
//! Used for UV texture projection and for rendering synthetic ground truth.

use nalgebra::Vector3;

use crate::render::{Camera, ZNEAR};

/// Per-pixel coverage: triangle index (-1 for background), depth, and
/// perspective-correct barycentric coordinates.
pub struct MeshRaster {
    pub width: usize,
    pub height: usize,
    pub tri: Vec<i32>,
    pub depth: Vec<f64>,
    pub bary: Vec<[f64; 3]>,
}

impl MeshRaster {
    pub fn covered(&self, y: usize, x: usize) -> Option<(usize, [f64; 3])> {
        let i = y * self.width + x;
        if self.tri[i] < 0 {
            None
        } else {
            Some((self.tri[i] as usize, self.bary[i]))
        }
    }
}

/// Rasterizes posed world-space vertices. Triangles with any vertex behind
/// the near plane are dropped (no clipping; synthetic scenes keep the body
/// in front of the rig).
pub fn rasterize_mesh(
    verts: &[Vector3<f64>],
    triangles: &[[usize; 3]],
    cam: &Camera,
) -> MeshRaster {
    let (w, h) = (cam.width, cam.height);
    let mut out = MeshRaster {
        width: w,
        height: h,
        tri: vec![-1; w * h],
        depth: vec![f64::INFINITY; w * h],
        bary: vec![[0.0; 3]; w * h],
    };
    let rc = cam.world_to_cam.rotation.to_rotation_matrix();
    let tc = cam.world_to_cam.translation.vector;
    let projected: Vec<Option<(f64, f64, f64)>> = verts
        .iter()
        .map(|v| {
            let p = rc * v + tc;
            if p.z <= ZNEAR {
                None
            } else {
                Some((cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy, p.z))
            }
        })
        .collect();
    for (ti, t) in triangles.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (projected[t[0]], projected[t[1]], projected[t[2]])
        else {
            continue;
        };
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area.abs() < 1e-12 {
            continue;
        }
        let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let x1 = (a.0.max(b.0).max(c.0).ceil() as usize + 1).min(w);
        let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let y1 = (a.1.max(b.1).max(c.1).ceil() as usize + 1).min(h);
        let inv_area = 1.0 / area;
        let (wa, wb, wc) = (1.0 / a.2, 1.0 / b.2, 1.0 / c.2);
        for py in y0..y1 {
            for px in x0..x1 {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let l0 = ((b.0 - fx) * (c.1 - fy) - (b.1 - fy) * (c.0 - fx)) * inv_area;
                let l1 = ((c.0 - fx) * (a.1 - fy) - (c.1 - fy) * (a.0 - fx)) * inv_area;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let denom = l0 * wa + l1 * wb + l2 * wc;
                let z = 1.0 / denom;
                let idx = py * w + px;
                if z < out.depth[idx] {
                    out.depth[idx] = z;
                    out.tri[idx] = ti as i32;
                    out.bary[idx] = [l0 * wa * z, l1 * wb * z, l2 * wc * z];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Isometry3;

    fn cam(w: usize, h: usize) -> Camera {
        Camera {
            fx: 40.0,
            fy: 40.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            world_to_cam: Isometry3::identity(),
        }
    }

    #[test]
    fn covers_and_interpolates_a_screen_facing_triangle() {
        let verts = vec![
            Vector3::new(-1.0, -1.0, 4.0),
            Vector3::new(1.0, -1.0, 4.0),
            Vector3::new(0.0, 1.0, 4.0),
        ];
        let r = rasterize_mesh(&verts, &[[0, 1, 2]], &cam(32, 32));
        let (ti, b) = r.covered(16, 16).expect("center covered");
        assert_eq!(ti, 0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((r.depth[16 * 32 + 16] - 4.0).abs() < 1e-9);
        assert!(r.covered(0, 0).is_none());
    }

    #[test]
    fn nearer_triangle_wins_depth_test() {
        let verts = vec![
            // far quad-ish triangle
            Vector3::new(-1.0, -1.0, 6.0),
            Vector3::new(1.0, -1.0, 6.0),
            Vector3::new(0.0, 1.0, 6.0),
            // near triangle
            Vector3::new(-0.5, -0.5, 3.0),
            Vector3::new(0.5, -0.5, 3.0),
            Vector3::new(0.0, 0.5, 3.0),
        ];
        let r = rasterize_mesh(&verts, &[[0, 1, 2], [3, 4, 5]], &cam(32, 32));
        let (ti, _) = r.covered(16, 16).unwrap();
        assert_eq!(ti, 1);
    }

    #[test]
    fn behind_camera_triangles_dropped() {
        let verts = vec![
            Vector3::new(-1.0, -1.0, -2.0),
            Vector3::new(1.0, -1.0, -2.0),
            Vector3::new(0.0, 1.0, -2.0),
        ];
        let r = rasterize_mesh(&verts, &[[0, 1, 2]], &cam(16, 16));
        assert!(r.tri.iter().all(|&t| t < 0));
    }
}
