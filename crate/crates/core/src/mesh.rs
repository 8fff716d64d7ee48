//! Template mesh: geometry, UV atlas, skinning, face region, surface
//! sampling, and the JSON interchange schema.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::skeleton::{Joint, Pose, Skeleton, SkinRow};
use crate::Error;

#[derive(Debug, Clone)]
pub struct TemplateMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub skinning: Vec<SkinRow>,
    pub skeleton: Skeleton,
    /// Face region as UV polygons; anchors sampled inside get the face bit.
    pub face_uv_polygons: Vec<Vec<[f64; 2]>>,
}

/// A point sampled on the template surface with interpolated attributes.
#[derive(Debug, Clone)]
pub struct SurfacePoint {
    pub position: Vector3<f64>,
    pub uv: [f64; 2],
    pub skinning: SkinRow,
}

impl TemplateMesh {
    pub fn validate(&self) -> Result<(), Error> {
        self.skeleton.validate()?;
        let n = self.vertices.len();
        if self.uv.len() != n || self.skinning.len() != n {
            return Err(Error::Invalid("uv/skinning length must match vertices".into()));
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::Invalid(format!("triangle {:?} references missing vertex", t)));
            }
        }
        for uv in &self.uv {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(Error::Invalid(format!("uv {:?} outside [0,1]^2", uv)));
            }
        }
        for row in &self.skinning {
            row.validate(self.skeleton.joints.len())?;
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (va, vb, vc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (vb - va).cross(&(vc - va)).norm()
    }

    /// Attribute interpolation at fixed barycentric coordinates of one
    /// triangle. Skinning rows are merged, capped at 8 entries, and
    /// renormalized.
    pub fn surface_point_at(&self, tri: usize, bary: [f64; 3]) -> SurfacePoint {
        let [ia, ib, ic] = self.triangles[tri];
        let position = self.vertices[ia] * bary[0]
            + self.vertices[ib] * bary[1]
            + self.vertices[ic] * bary[2];
        let uv = [
            self.uv[ia][0] * bary[0] + self.uv[ib][0] * bary[1] + self.uv[ic][0] * bary[2],
            self.uv[ia][1] * bary[0] + self.uv[ib][1] * bary[1] + self.uv[ic][1] * bary[2],
        ];
        let mut joint_w: BTreeMap<usize, f64> = BTreeMap::new();
        for (vi, b) in [(ia, bary[0]), (ib, bary[1]), (ic, bary[2])] {
            if b == 0.0 {
                continue;
            }
            for &(j, w) in &self.skinning[vi].0 {
                *joint_w.entry(j).or_insert(0.0) += b * w;
            }
        }
        let mut entries: Vec<(usize, f64)> = joint_w.into_iter().collect();
        // Keep the 8 heaviest joints, deterministically.
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        entries.truncate(8);
        entries.sort_by_key(|e| e.0);
        let total: f64 = entries.iter().map(|e| e.1).sum();
        for e in &mut entries {
            e.1 /= total;
        }
        SurfacePoint { position, uv, skinning: SkinRow(entries) }
    }

    /// Area-weighted uniform surface sampling with barycentric attribute
    /// interpolation. Deterministic for a given seed.
    pub fn sample_surface(&self, count: usize, seed: u64) -> Result<Vec<SurfacePoint>, Error> {
        if count == 0 {
            return Err(Error::Invalid("sample count must be >= 1".into()));
        }
        let areas: Vec<f64> = (0..self.triangles.len()).map(|t| self.triangle_area(t)).collect();
        let total: f64 = areas.iter().sum();
        if !(total > 1e-12) {
            return Err(Error::Invalid("mesh has no triangle area to sample".into()));
        }
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cdf.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let u = rng.gen_range(0.0..total);
            let tri = cdf.partition_point(|&c| c <= u).min(self.triangles.len() - 1);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let bary = [1.0 - s, s * (1.0 - r2), s * r2];
            out.push(self.surface_point_at(tri, bary));
        }
        Ok(out)
    }

    /// Even-odd test of a UV point against the face polygon set.
    pub fn face_region_contains(&self, uv: [f64; 2]) -> bool {
        self.face_uv_polygons.iter().any(|poly| point_in_polygon(uv, poly))
    }

    pub fn to_json(&self) -> Result<String, Error> {
        let doc = MeshDoc {
            vertices: self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            triangles: self.triangles.clone(),
            uv: self.uv.clone(),
            skinning: self.skinning.iter().map(|r| r.0.clone()).collect(),
            skeleton: SkeletonDoc {
                joints: self
                    .skeleton
                    .joints
                    .iter()
                    .map(|j| JointDoc {
                        name: j.name.clone(),
                        parent: j.parent,
                        rest_rotation: {
                            let q = j.rest.rotation.quaternion();
                            [q.w, q.i, q.j, q.k]
                        },
                        rest_translation: {
                            let t = j.rest.translation.vector;
                            [t.x, t.y, t.z]
                        },
                    })
                    .collect(),
                groups: self.skeleton.groups.clone(),
            },
            face_uv_polygons: self.face_uv_polygons.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let doc: MeshDoc = serde_json::from_str(s).map_err(|e| Error::Invalid(e.to_string()))?;
        let skeleton = Skeleton {
            joints: doc
                .skeleton
                .joints
                .into_iter()
                .map(|j| Joint {
                    name: j.name,
                    parent: j.parent,
                    rest: Isometry3::from_parts(
                        Translation3::new(
                            j.rest_translation[0],
                            j.rest_translation[1],
                            j.rest_translation[2],
                        ),
                        UnitQuaternion::from_quaternion(Quaternion::new(
                            j.rest_rotation[0],
                            j.rest_rotation[1],
                            j.rest_rotation[2],
                            j.rest_rotation[3],
                        )),
                    ),
                })
                .collect(),
            groups: doc.skeleton.groups,
        };
        let mesh = Self {
            vertices: doc.vertices.iter().map(|v| Vector3::new(v[0], v[1], v[2])).collect(),
            triangles: doc.triangles,
            uv: doc.uv,
            skinning: doc.skinning.into_iter().map(SkinRow).collect(),
            skeleton,
            face_uv_polygons: doc.face_uv_polygons,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Posed vertex positions under a pose (LBS over mesh vertices).
    pub fn pose_vertices(&self, pose: &Pose) -> Result<Vec<Vector3<f64>>, Error> {
        let rest = self.skeleton.rest_world();
        let world = self.skeleton.forward_kinematics(pose)?;
        crate::skeleton::lbs(&self.vertices, &self.skinning, &rest, &world)
    }
}

/// Even-odd ray-cast point-in-polygon test in UV space.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

#[derive(Serialize, Deserialize)]
struct MeshDoc {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
    uv: Vec<[f64; 2]>,
    skinning: Vec<Vec<(usize, f64)>>,
    skeleton: SkeletonDoc,
    face_uv_polygons: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonDoc {
    joints: Vec<JointDoc>,
    groups: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct JointDoc {
    name: String,
    parent: Option<usize>,
    /// Unit quaternion as [w, x, y, z].
    rest_rotation: [f64; 4],
    rest_translation: [f64; 3],
}
