//! Anchor / control-point / Gaussian hierarchy with the fixed
//! reciprocal-distance interpolation structure computed at initialization.

use nalgebra::Vector3;

use crate::mesh::{SurfacePoint, TemplateMesh};
use crate::Error;

/// Distance below which a point counts as coincident with a neighbor.
const COINCIDENT_EPS: f64 = 1e-9;

/// Reciprocal-distance weights to three neighbors:
/// `t_j = d_j / sum_k d_k` with `d_j = 1 / |x - x_j|`.
/// A coincident neighbor degenerates to weight 1 on that neighbor.
pub fn interp_weights(point: &Vector3<f64>, neighbors: &[Vector3<f64>; 3]) -> [f64; 3] {
    let dist: Vec<f64> = neighbors.iter().map(|n| (point - n).norm()).collect();
    if let Some(hit) = dist.iter().position(|&d| d < COINCIDENT_EPS) {
        let mut w = [0.0; 3];
        w[hit] = 1.0;
        return w;
    }
    let recips: Vec<f64> = dist.iter().map(|d| 1.0 / d).collect();
    let total: f64 = recips.iter().sum();
    [recips[0] / total, recips[1] / total, recips[2] / total]
}

/// Counts for the three hierarchy levels. Full scale is 300/10k/200k;
/// desk-scale runs configure smaller values.
#[derive(Debug, Clone, Copy)]
pub struct HierarchyCounts {
    pub anchors: usize,
    pub control_points: usize,
    pub gaussians: usize,
}

impl HierarchyCounts {
    pub fn full_scale() -> Self {
        Self { anchors: 300, control_points: 10_000, gaussians: 200_000 }
    }

    pub fn desk_scale() -> Self {
        Self { anchors: 32, control_points: 512, gaussians: 4096 }
    }
}

/// Fixed interpolation structure: 3-NN anchors for Gaussians and control
/// points, 3-NN control points for Gaussians, and the 5-NN control-point
/// graph used by the displacement smoothness loss. Flattened with fixed
/// arity for direct use by the sparse mixing kernel.
#[derive(Debug, Clone)]
pub struct NeighborAssignment {
    pub g_anchor_idx: Vec<usize>,
    pub g_anchor_w: Vec<f64>,
    pub c_anchor_idx: Vec<usize>,
    pub c_anchor_w: Vec<f64>,
    pub g_cp_idx: Vec<usize>,
    pub g_cp_w: Vec<f64>,
    pub cp_neighbor_idx: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub anchors: Vec<SurfacePoint>,
    pub control_points: Vec<SurfacePoint>,
    pub gaussians: Vec<SurfacePoint>,
    pub assign: NeighborAssignment,
}

impl Hierarchy {
    pub fn anchor_positions(&self) -> Vec<Vector3<f64>> {
        self.anchors.iter().map(|a| a.position).collect()
    }
}

/// Uniform-grid k-nearest-neighbor index over a fixed point set.
pub struct KnnGrid {
    points: Vec<Vector3<f64>>,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl KnnGrid {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let max_extent = extent.x.max(extent.y).max(extent.z).max(1e-9);
        let target = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = max_extent / target;
        let dims = [
            ((extent.x / cell).floor() as usize + 1).max(1),
            ((extent.y / cell).floor() as usize + 1).max(1),
            ((extent.z / cell).floor() as usize + 1).max(1),
        ];
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, p) in points.iter().enumerate() {
            let c = Self::cell_of(p, &lo, cell, &dims);
            cells[c].push(i as u32);
        }
        Self { points: points.to_vec(), origin: lo, cell, dims, cells }
    }

    fn cell_of(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64, dims: &[usize; 3]) -> usize {
        let ix = (((p.x - origin.x) / cell).floor() as isize).clamp(0, dims[0] as isize - 1) as usize;
        let iy = (((p.y - origin.y) / cell).floor() as isize).clamp(0, dims[1] as isize - 1) as usize;
        let iz = (((p.z - origin.z) / cell).floor() as isize).clamp(0, dims[2] as isize - 1) as usize;
        (ix * dims[1] + iy) * dims[2] + iz
    }

    /// Indices of the k nearest points to `q`, ordered by (distance, index).
    /// `exclude` removes one point (self-queries).
    pub fn nearest_k(&self, q: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<usize> {
        let cx = (((q.x - self.origin.x) / self.cell).floor() as isize)
            .clamp(0, self.dims[0] as isize - 1);
        let cy = (((q.y - self.origin.y) / self.cell).floor() as isize)
            .clamp(0, self.dims[1] as isize - 1);
        let cz = (((q.z - self.origin.z) / self.cell).floor() as isize)
            .clamp(0, self.dims[2] as isize - 1);
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for ring in 0..=max_ring {
            // Once k found, stop when the ring cannot contain anything closer.
            if best.len() >= k {
                let ring_min_dist = (ring - 1).max(0) as f64 * self.cell;
                if ring_min_dist * ring_min_dist > best[k - 1].0 {
                    break;
                }
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let (ix, iy, iz) = (cx + dx, cy + dy, cz + dz);
                        if ix < 0
                            || iy < 0
                            || iz < 0
                            || ix >= self.dims[0] as isize
                            || iy >= self.dims[1] as isize
                            || iz >= self.dims[2] as isize
                        {
                            continue;
                        }
                        let cell = &self.cells
                            [(ix as usize * self.dims[1] + iy as usize) * self.dims[2] + iz as usize];
                        for &pi in cell {
                            let pi = pi as usize;
                            if exclude == Some(pi) {
                                continue;
                            }
                            let d2 = (self.points[pi] - q).norm_squared();
                            let entry = (d2, pi);
                            let pos = best
                                .binary_search_by(|probe| {
                                    probe
                                        .0
                                        .partial_cmp(&entry.0)
                                        .unwrap()
                                        .then(probe.1.cmp(&entry.1))
                                })
                                .unwrap_or_else(|e| e);
                            if pos < k {
                                best.insert(pos, entry);
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

/// Brute-force reference for the grid index.
pub fn nearest_k_bruteforce(
    points: &[Vector3<f64>],
    q: &Vector3<f64>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| exclude != Some(*i))
        .map(|(i, p)| ((p - q).norm_squared(), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(_, i)| i).collect()
}

/// Samples the three point sets on the mesh and computes every neighbor
/// assignment. Deterministic for a given seed.
pub fn build_hierarchy(
    mesh: &TemplateMesh,
    counts: HierarchyCounts,
    seed: u64,
) -> Result<Hierarchy, Error> {
    if counts.anchors < 4 || counts.control_points < 6 || counts.gaussians < 4 {
        return Err(Error::Invalid(format!(
            "hierarchy counts ({}, {}, {}) below minimum (4, 6, 4)",
            counts.anchors, counts.control_points, counts.gaussians
        )));
    }
    let anchors = mesh.sample_surface(counts.anchors, seed)?;
    let control_points = mesh.sample_surface(counts.control_points, seed.wrapping_add(1))?;
    let gaussians = mesh.sample_surface(counts.gaussians, seed.wrapping_add(2))?;

    let anchor_pos: Vec<Vector3<f64>> = anchors.iter().map(|p| p.position).collect();
    let cp_pos: Vec<Vector3<f64>> = control_points.iter().map(|p| p.position).collect();
    let anchor_grid = KnnGrid::build(&anchor_pos);
    let cp_grid = KnnGrid::build(&cp_pos);

    let mut assign = NeighborAssignment {
        g_anchor_idx: Vec::with_capacity(counts.gaussians * 3),
        g_anchor_w: Vec::with_capacity(counts.gaussians * 3),
        c_anchor_idx: Vec::with_capacity(counts.control_points * 3),
        c_anchor_w: Vec::with_capacity(counts.control_points * 3),
        g_cp_idx: Vec::with_capacity(counts.gaussians * 3),
        g_cp_w: Vec::with_capacity(counts.gaussians * 3),
        cp_neighbor_idx: Vec::with_capacity(counts.control_points * 5),
    };

    let push_3nn = |grid: &KnnGrid,
                        positions: &[Vector3<f64>],
                        p: &Vector3<f64>,
                        idx_out: &mut Vec<usize>,
                        w_out: &mut Vec<f64>| {
        let nn = grid.nearest_k(p, 3, None);
        let tri = [positions[nn[0]], positions[nn[1]], positions[nn[2]]];
        let w = interp_weights(p, &tri);
        idx_out.extend_from_slice(&nn);
        w_out.extend_from_slice(&w);
    };

    for gp in &gaussians {
        push_3nn(&anchor_grid, &anchor_pos, &gp.position, &mut assign.g_anchor_idx, &mut assign.g_anchor_w);
        push_3nn(&cp_grid, &cp_pos, &gp.position, &mut assign.g_cp_idx, &mut assign.g_cp_w);
    }
    for cp in &control_points {
        push_3nn(&anchor_grid, &anchor_pos, &cp.position, &mut assign.c_anchor_idx, &mut assign.c_anchor_w);
    }
    for (i, cp) in control_points.iter().enumerate() {
        let nn = cp_grid.nearest_k(&cp.position, 5, Some(i));
        assign.cp_neighbor_idx.extend_from_slice(&nn);
    }

    Ok(Hierarchy { anchors, control_points, gaussians, assign })
}

/// Reference interpolation of per-anchor B-vectors to assigned points:
/// `w_i = sum_j t_ij w^a_j`. `anchor_outputs` is row-major `(n_anchors, b)`.
pub fn interpolate_outputs(
    anchor_outputs: &[f64],
    n_anchors: usize,
    b: usize,
    idx: &[usize],
    w: &[f64],
) -> Result<Vec<f64>, Error> {
    if anchor_outputs.len() != n_anchors * b {
        return Err(Error::Invalid(format!(
            "anchor outputs have {} values, expected {}x{}",
            anchor_outputs.len(),
            n_anchors,
            b
        )));
    }
    let rows = idx.len() / 3;
    let mut out = vec![0.0; rows * b];
    for r in 0..rows {
        for j in 0..3 {
            let (a, t) = (idx[r * 3 + j], w[r * 3 + j]);
            for k in 0..b {
                out[r * b + k] += t * anchor_outputs[a * b + k];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn equidistant_neighbors_share_weight() {
        let p = Vector3::new(0.0, 0.0, 0.0);
        let n = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let w = interp_weights(&p, &n);
        for wi in w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reciprocal_distance_case_1_2_4() {
        let p = Vector3::zeros();
        let n = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(4.0, 0.0, 0.0),
        ];
        let w = interp_weights(&p, &n);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 7.0).abs() < 1e-12);
        assert!((w[2] - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_neighbor_takes_all_weight() {
        let p = Vector3::new(0.5, 0.5, 0.5);
        let n = [p, Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        assert_eq!(interp_weights(&p, &n), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn weights_scale_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen());
            let n = [
                Vector3::new(rng.gen::<f64>() + 1.5, rng.gen(), rng.gen()),
                Vector3::new(rng.gen::<f64>() - 1.5, rng.gen(), rng.gen()),
                Vector3::new(rng.gen(), rng.gen::<f64>() + 1.5, rng.gen()),
            ];
            let w1 = interp_weights(&p, &n);
            let c = 37.5;
            let ns = [p + (n[0] - p) * c, p + (n[1] - p) * c, p + (n[2] - p) * c];
            let w2 = interp_weights(&p, &ns);
            for (a, b) in w1.iter().zip(&w2) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_knn_matches_bruteforce_on_1k_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vector3<f64>> = (0..1000)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.1..0.1)))
            .collect();
        let grid = KnnGrid::build(&pts);
        for qi in (0..1000).step_by(17) {
            let fast = grid.nearest_k(&pts[qi], 3, Some(qi));
            let slow = nearest_k_bruteforce(&pts, &pts[qi], 3, Some(qi));
            assert_eq!(fast, slow, "query {}", qi);
            let fast5 = grid.nearest_k(&pts[qi], 5, Some(qi));
            let slow5 = nearest_k_bruteforce(&pts, &pts[qi], 5, Some(qi));
            assert_eq!(fast5, slow5, "query {} (k=5)", qi);
        }
    }

    #[test]
    fn build_rejects_insufficient_counts() {
        let mesh = crate::mesh::tests::quad_mesh();
        let res = build_hierarchy(
            &mesh,
            HierarchyCounts { anchors: 3, control_points: 6, gaussians: 10 },
            0,
        );
        assert!(res.is_err());
    }

    #[test]
    fn build_weights_are_valid_and_deterministic() {
        let mesh = crate::mesh::tests::quad_mesh();
        let counts = HierarchyCounts { anchors: 4, control_points: 6, gaussians: 10 };
        let h1 = build_hierarchy(&mesh, counts, 9).unwrap();
        let h2 = build_hierarchy(&mesh, counts, 9).unwrap();
        assert_eq!(h1.assign.g_anchor_idx, h2.assign.g_anchor_idx);
        assert_eq!(h1.assign.g_anchor_w, h2.assign.g_anchor_w);
        for r in 0..counts.gaussians {
            let w = &h1.assign.g_anchor_w[r * 3..r * 3 + 3];
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| x >= 0.0));
            let idx = &h1.assign.g_anchor_idx[r * 3..r * 3 + 3];
            assert!(idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2]);
        }
        assert_eq!(h1.assign.cp_neighbor_idx.len(), counts.control_points * 5);
    }

    #[test]
    fn interpolation_blends_in_convex_hull() {
        // identical outputs pass through; basis outputs blend by weight
        let outputs = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]; // 3 anchors, B=3 (e1,e2,e3)
        let idx = vec![0usize, 1, 2];
        let w = vec![4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        let out = interpolate_outputs(&outputs, 3, 3, &idx, &w).unwrap();
        assert!((out[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((out[1] - 2.0 / 7.0).abs() < 1e-15);
        assert!((out[2] - 1.0 / 7.0).abs() < 1e-15);

        let same = vec![0.7, -0.3, 0.7, -0.3, 0.7, -0.3]; // 3 anchors, B=2, all equal
        let out = interpolate_outputs(&same, 3, 2, &idx, &w).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-15 && (out[1] + 0.3).abs() < 1e-15);

        let zeros = vec![0.0; 9];
        let out = interpolate_outputs(&zeros, 3, 3, &idx, &w).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolation_rejects_b_mismatch() {
        assert!(interpolate_outputs(&[0.0; 7], 2, 3, &[0, 0, 1], &[0.5, 0.25, 0.25]).is_err());
    }

    #[test]
    fn gaussian_at_anchor_gets_full_weight() {
        let mesh = crate::mesh::tests::quad_mesh();
        let counts = HierarchyCounts { anchors: 4, control_points: 6, gaussians: 10 };
        let h = build_hierarchy(&mesh, counts, 3).unwrap();
        // plant a query exactly at anchor 2
        let anchor_pos = h.anchor_positions();
        let grid = KnnGrid::build(&anchor_pos);
        let nn = grid.nearest_k(&anchor_pos[2], 3, None);
        let tri = [anchor_pos[nn[0]], anchor_pos[nn[1]], anchor_pos[nn[2]]];
        let w = interp_weights(&anchor_pos[2], &tri);
        assert_eq!(nn[0], 2);
        assert_eq!(w, [1.0, 0.0, 0.0]);
    }
}
