//! Skeleton, linear blend skinning and per-triangle frames of the posed mesh.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::rotation::quat_to_matrix;
use crate::scalar::Real;

/// Maximum number of joint influences per vertex.
pub const MAX_INFLUENCES: usize = 4;

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// `self * other`, i.e. `other` applied first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Skeleton<T: Real> {
    parent: Vec<Option<usize>>,
    rest_local: Vec<RigidTransform<T>>,
}

impl<T: Real> Skeleton<T> {
    /// Joints must be topologically sorted with exactly one root (`None` parent).
    pub fn new(parent: Vec<Option<usize>>, rest_local: Vec<RigidTransform<T>>) -> Result<Self> {
        if parent.len() != rest_local.len() {
            return Err(Error::Shape(format!(
                "{} parents for {} rest transforms",
                parent.len(),
                rest_local.len()
            )));
        }
        let roots = parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Invalid(format!(
                "skeleton needs exactly one root, found {roots}"
            )));
        }
        for (j, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                if *p >= j {
                    return Err(Error::Invalid(format!(
                        "joint {j} has parent {p}; joints must be topologically sorted"
                    )));
                }
            }
        }
        Ok(Self { parent, rest_local })
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn rest_local(&self, joint: usize) -> &RigidTransform<T> {
        &self.rest_local[joint]
    }

    pub fn root(&self) -> usize {
        self.parent.iter().position(|p| p.is_none()).unwrap_or(0)
    }

    /// True when `joint` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn in_subtree(&self, joint: usize, ancestor: usize) -> bool {
        let mut j = Some(joint);
        while let Some(cur) = j {
            if cur == ancestor {
                return true;
            }
            j = self.parent[cur];
        }
        false
    }

    /// World transforms of every joint in the canonical pose.
    pub fn rest_world(&self) -> Vec<RigidTransform<T>> {
        let mut world: Vec<RigidTransform<T>> = Vec::with_capacity(self.joint_count());
        for j in 0..self.joint_count() {
            let w = match self.parent[j] {
                Some(p) => world[p].compose(&self.rest_local[j]),
                None => self.rest_local[j],
            };
            world.push(w);
        }
        world
    }

    /// World transforms of every joint under `pose`.
    ///
    /// Each joint rotates about its own origin after its rest-local offset;
    /// the root additionally translates by the pose's root translation.
    pub fn posed_world(&self, pose: &Pose<T>) -> Vec<RigidTransform<T>> {
        let mut world: Vec<RigidTransform<T>> = Vec::with_capacity(self.joint_count());
        for j in 0..self.joint_count() {
            let local = self.rest_local[j].compose(&RigidTransform::new(
                pose.rotation_matrix(j),
                Vector3::zeros(),
            ));
            let w = match self.parent[j] {
                Some(p) => world[p].compose(&local),
                None => RigidTransform::new(Matrix3::identity(), pose.root_translation)
                    .compose(&local),
            };
            world.push(w);
        }
        world
    }

    /// Per-joint skinning transforms `posed_world * rest_world^-1`.
    pub fn skinning_transforms(&self, pose: &Pose<T>) -> Vec<RigidTransform<T>> {
        self.posed_world(pose)
            .iter()
            .zip(self.rest_world())
            .map(|(p, r)| p.compose(&r.inverse()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pose<T: Real> {
    joint_rotations: Vec<UnitQuaternion<T>>,
    pub root_translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity(joint_count: usize) -> Self {
        Self {
            joint_rotations: vec![UnitQuaternion::identity(); joint_count],
            root_translation: Vector3::zeros(),
        }
    }

    /// Quaternions are `[w, x, y, z]` and must have unit norm within `1e-9`.
    pub fn new(joint_rotations: &[[T; 4]], root_translation: Vector3<T>) -> Result<Self> {
        let mut rots = Vec::with_capacity(joint_rotations.len());
        for (j, q) in joint_rotations.iter().enumerate() {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (n.as_f64() - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "joint {j} quaternion has norm {}",
                    n.as_f64()
                )));
            }
            rots.push(UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            )));
        }
        Ok(Self {
            joint_rotations: rots,
            root_translation,
        })
    }

    pub fn from_unit_quaternions(rots: Vec<UnitQuaternion<T>>, root_translation: Vector3<T>) -> Self {
        Self {
            joint_rotations: rots,
            root_translation,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rotations.len()
    }

    pub fn quaternion(&self, joint: usize) -> [T; 4] {
        let q = &self.joint_rotations[joint];
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self, joint: usize) -> Matrix3<T> {
        quat_to_matrix(&self.quaternion(joint))
    }

    /// Pose whose root world transform is `g` composed with this pose's root transform.
    pub fn premultiply_root(&self, skeleton: &Skeleton<T>, g: &RigidTransform<T>) -> Self {
        let root = skeleton.root();
        let rest = skeleton.rest_local(root);
        let q_old = self.rotation_matrix(root);
        let q_new = rest.rotation.transpose() * g.rotation * rest.rotation * q_old;
        let translation = g.rotation * (self.root_translation + rest.translation) + g.translation
            - rest.translation;
        let mut rots = self.joint_rotations.clone();
        rots[root] = UnitQuaternion::from_matrix(&q_new);
        Self {
            joint_rotations: rots,
            root_translation: translation,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemplateMesh<T: Real> {
    pub vertices: Vec<Vector3<T>>,
    pub triangles: Vec<[usize; 3]>,
    pub uv: Vec<Vector2<T>>,
    pub skin_weights: Vec<Vec<(usize, T)>>,
}

impl<T: Real> TemplateMesh<T> {
    /// Validates index ranges, UV range and skin weight normalization.
    pub fn new(
        vertices: Vec<Vector3<T>>,
        triangles: Vec<[usize; 3]>,
        uv: Vec<Vector2<T>>,
        skin_weights: Vec<Vec<(usize, T)>>,
    ) -> Result<Self> {
        let nv = vertices.len();
        if uv.len() != nv || skin_weights.len() != nv {
            return Err(Error::Shape(format!(
                "{} vertices, {} uvs, {} weight lists",
                nv,
                uv.len(),
                skin_weights.len()
            )));
        }
        if let Some(t) = triangles.iter().position(|t| t.iter().any(|&i| i >= nv)) {
            return Err(Error::Invalid(format!("triangle {t} indexes past {nv} vertices")));
        }
        for (i, p) in uv.iter().enumerate() {
            let ok = |c: T| c >= T::zero() && c <= T::one();
            if !ok(p.x) || !ok(p.y) {
                return Err(Error::Invalid(format!("uv of vertex {i} outside [0,1]^2")));
            }
        }
        for (i, w) in skin_weights.iter().enumerate() {
            if w.is_empty() || w.len() > MAX_INFLUENCES {
                return Err(Error::Invalid(format!(
                    "vertex {i} has {} influences (1..={MAX_INFLUENCES} allowed)",
                    w.len()
                )));
            }
            let mut sum = T::zero();
            for &(_, wt) in w {
                if wt < T::zero() {
                    return Err(Error::Invalid(format!("vertex {i} has a negative weight")));
                }
                sum += wt;
            }
            if (sum.as_f64() - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "vertex {i} weights sum to {}",
                    sum.as_f64()
                )));
            }
        }
        Ok(Self {
            vertices,
            triangles,
            uv,
            skin_weights,
        })
    }

    pub fn max_joint(&self) -> Option<usize> {
        self.skin_weights
            .iter()
            .flat_map(|w| w.iter().map(|&(j, _)| j))
            .max()
    }

    /// Canonical geometry as a posed mesh (identity articulation).
    pub fn rest_posed(&self) -> Result<PosedMesh<T>> {
        PosedMesh::from_geometry(self.vertices.clone(), self)
    }
}

#[derive(Clone, Debug)]
pub struct PosedMesh<T: Real> {
    pub vertices: Vec<Vector3<T>>,
    pub triangle_normals: Vec<Vector3<T>>,
    /// Columns are tangent, bitangent and normal.
    pub triangle_frames: Vec<Matrix3<T>>,
}

impl<T: Real> PosedMesh<T> {
    /// Recomputes normals and tangent frames for the given vertex positions.
    pub fn from_geometry(vertices: Vec<Vector3<T>>, template: &TemplateMesh<T>) -> Result<Self> {
        let mut normals = Vec::with_capacity(template.triangles.len());
        let mut frames = Vec::with_capacity(template.triangles.len());
        for (ti, tri) in template.triangles.iter().enumerate() {
            let (n, f) = triangle_frame(
                [&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]],
                [&template.uv[tri[0]], &template.uv[tri[1]], &template.uv[tri[2]]],
            )
            .ok_or(Error::DegenerateGeometry(ti))?;
            normals.push(n);
            frames.push(f);
        }
        Ok(Self {
            vertices,
            triangle_normals: normals,
            triangle_frames: frames,
        })
    }

    pub fn centroid(&self, tri: &[usize; 3]) -> Vector3<T> {
        (self.vertices[tri[0]] + self.vertices[tri[1]] + self.vertices[tri[2]]) / T::lit(3.0)
    }

    /// Length of the axis-aligned bounding box diagonal.
    pub fn diagonal(&self) -> T {
        bbox_diagonal(&self.vertices)
    }
}

pub(crate) fn bbox_diagonal<T: Real>(points: &[Vector3<T>]) -> T {
    let mut lo = Vector3::repeat(T::max_value().unwrap());
    let mut hi = -lo;
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if points.is_empty() {
        T::zero()
    } else {
        (hi - lo).norm()
    }
}

/// Unit normal and a right-handed frame whose first column follows the UV-u direction.
///
/// Returns `None` when the triangle has no well defined normal.
pub fn triangle_frame<T: Real>(
    p: [&Vector3<T>; 3],
    uv: [&Vector2<T>; 3],
) -> Option<(Vector3<T>, Matrix3<T>)> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let cross = e1.cross(&e2);
    let len = cross.norm();
    let scale = e1.norm().max(e2.norm());
    if !(len > T::lit(1e-14) * scale * scale) || !len.finite() {
        return None;
    }
    let n = cross / len;
    let tangent = uv_gradients(p, uv)
        .map(|(du, _)| du - n * n.dot(&du))
        .filter(|t| t.norm() > T::lit(1e-12) * scale)
        .map(|t| t.normalize())
        .unwrap_or_else(|| any_orthogonal(&n));
    let bitangent = n.cross(&tangent);
    Some((n, Matrix3::from_columns(&[tangent, bitangent, n])))
}

/// `(dX/du, dX/dv)` of the affine map from the triangle's UV footprint to 3D.
pub fn uv_gradients<T: Real>(
    p: [&Vector3<T>; 3],
    uv: [&Vector2<T>; 3],
) -> Option<(Vector3<T>, Vector3<T>)> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let d1 = uv[1] - uv[0];
    let d2 = uv[2] - uv[0];
    let det = d1.x * d2.y - d2.x * d1.y;
    if det.abs() < T::lit(1e-14) {
        return None;
    }
    let du = (e1 * d2.y - e2 * d1.y) / det;
    let dv = (e2 * d1.x - e1 * d2.x) / det;
    Some((du, dv))
}

fn any_orthogonal<T: Real>(n: &Vector3<T>) -> Vector3<T> {
    let helper = if n.x.abs() < T::lit(0.9) {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t = helper - n * n.dot(&helper);
    t.normalize()
}

/// Poses the template with linear blend skinning and recomputes triangle frames.
pub fn pose_mesh<T: Real>(
    skeleton: &Skeleton<T>,
    pose: &Pose<T>,
    template: &TemplateMesh<T>,
) -> Result<PosedMesh<T>> {
    if pose.joint_count() != skeleton.joint_count() {
        return Err(Error::Shape(format!(
            "pose has {} joints, skeleton {}",
            pose.joint_count(),
            skeleton.joint_count()
        )));
    }
    if let Some(j) = template.max_joint() {
        if j >= skeleton.joint_count() {
            return Err(Error::Invalid(format!(
                "skin weight references joint {j} of {}",
                skeleton.joint_count()
            )));
        }
    }
    let skin = skeleton.skinning_transforms(pose);
    let vertices = template
        .vertices
        .iter()
        .zip(&template.skin_weights)
        .map(|(v, weights)| {
            weights
                .iter()
                .fold(Vector3::zeros(), |acc, &(j, w)| acc + skin[j].apply(v) * w)
        })
        .collect();
    PosedMesh::from_geometry(vertices, template)
}

/// True iff pairwise distances among vertices fully weighted to the subtree
/// rooted at `joint` are preserved (within `1e-6`) between canonical and posed geometry.
pub fn rigid_subtree_check<T: Real>(
    skeleton: &Skeleton<T>,
    pose: &Pose<T>,
    template: &TemplateMesh<T>,
    joint: usize,
) -> Result<bool> {
    if joint >= skeleton.joint_count() {
        return Err(Error::Invalid(format!("joint {joint} out of range")));
    }
    let posed = pose_mesh(skeleton, pose, template)?;
    let members: Vec<usize> = template
        .skin_weights
        .iter()
        .enumerate()
        .filter(|(_, w)| {
            let inside: f64 = w
                .iter()
                .filter(|&&(j, _)| skeleton.in_subtree(j, joint))
                .map(|&(_, wt)| wt.as_f64())
                .sum();
            inside >= 1.0 - 1e-9
        })
        .map(|(i, _)| i)
        .collect();
    for (a, &i) in members.iter().enumerate() {
        for &k in &members[a + 1..] {
            let d0 = (template.vertices[i] - template.vertices[k]).norm();
            let d1 = (posed.vertices[i] - posed.vertices[k]).norm();
            if (d0 - d1).abs().as_f64() > 1e-6 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::is_rotation;
    use approx::assert_relative_eq;

    fn one_joint_mesh() -> (Skeleton<f64>, TemplateMesh<f64>) {
        let skel = Skeleton::new(vec![None], vec![RigidTransform::identity()]).unwrap();
        let mesh = TemplateMesh::new(
            vec![
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2]],
            vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)],
            vec![vec![(0, 1.0)]; 3],
        )
        .unwrap();
        (skel, mesh)
    }

    #[test]
    fn quarter_turn_moves_x_to_y() {
        let (skel, mesh) = one_joint_mesh();
        let h = std::f64::consts::FRAC_PI_4;
        let pose = Pose::new(&[[h.cos(), 0.0, 0.0, h.sin()]], Vector3::zeros()).unwrap();
        let posed = pose_mesh(&skel, &pose, &mesh).unwrap();
        assert_relative_eq!(posed.vertices[0], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn identity_pose_is_identity() {
        let (skel, mesh) = one_joint_mesh();
        let posed = pose_mesh(&skel, &Pose::identity(1), &mesh).unwrap();
        assert_eq!(posed.vertices, mesh.vertices);
        for f in &posed.triangle_frames {
            assert!(is_rotation(f, 1e-12));
        }
    }

    #[test]
    fn skeleton_rejects_unsorted_or_multi_root() {
        let t = RigidTransform::<f64>::identity();
        assert!(Skeleton::new(vec![Some(1), None], vec![t, t]).is_err());
        assert!(Skeleton::new(vec![None, None], vec![t, t]).is_err());
        assert!(Skeleton::new(vec![None, Some(0)], vec![t, t]).is_ok());
    }

    #[test]
    fn template_rejects_bad_weights() {
        let v = vec![Vector3::<f64>::zeros(); 3];
        let uv = vec![Vector2::zeros(); 3];
        let bad = vec![vec![(0, 0.5)], vec![(0, 1.0)], vec![(0, 1.0)]];
        assert!(TemplateMesh::new(v.clone(), vec![[0, 1, 2]], uv.clone(), bad).is_err());
        let neg = vec![vec![(0, 1.5), (1, -0.5)], vec![(0, 1.0)], vec![(0, 1.0)]];
        assert!(TemplateMesh::new(v.clone(), vec![[0, 1, 2]], uv.clone(), neg).is_err());
        let ok = vec![vec![(0, 1.0)]; 3];
        assert!(TemplateMesh::new(v, vec![[0, 1, 3]], uv, ok).is_err());
    }

    #[test]
    fn pose_rejects_non_unit_quaternion() {
        assert!(Pose::new(&[[1.0, 1e-4, 0.0, 0.0]], Vector3::<f64>::zeros()).is_err());
    }

    #[test]
    fn zero_area_triangle_is_an_error() {
        let skel = Skeleton::new(vec![None], vec![RigidTransform::identity()]).unwrap();
        let mesh = TemplateMesh::new(
            vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)],
            vec![[0, 1, 2]],
            vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)],
            vec![vec![(0, 1.0)]; 3],
        )
        .unwrap();
        assert!(matches!(
            pose_mesh(&skel, &Pose::identity(1), &mesh),
            Err(Error::DegenerateGeometry(0))
        ));
    }

    #[test]
    fn degenerate_uv_falls_back_to_orthonormal_frame() {
        let p = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        let uv = [Vector2::new(0.5, 0.5); 3];
        let (n, f) = triangle_frame([&p[0], &p[1], &p[2]], [&uv[0], &uv[1], &uv[2]]).unwrap();
        assert_relative_eq!(n, Vector3::z(), epsilon = 1e-15);
        assert!(is_rotation(&f, 1e-12));
        assert_relative_eq!(f.column(2).into_owned(), n);
    }

    #[test]
    fn reversed_winding_flips_normal() {
        let p = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.2, 0.0), Vector3::new(0.1, 1.0, 0.3)];
        let uv = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        let (n0, _) = triangle_frame([&p[0], &p[1], &p[2]], [&uv[0], &uv[1], &uv[2]]).unwrap();
        let (n1, _) = triangle_frame([&p[0], &p[2], &p[1]], [&uv[0], &uv[2], &uv[1]]).unwrap();
        assert_relative_eq!(n0, -n1, epsilon = 1e-15);
    }

    #[test]
    fn tangent_follows_uv_u() {
        let p = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 3.0, 0.0)];
        let uv = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        let (_, f) = triangle_frame([&p[0], &p[1], &p[2]], [&uv[0], &uv[1], &uv[2]]).unwrap();
        assert_relative_eq!(f.column(0).into_owned(), Vector3::x(), epsilon = 1e-15);
        assert_relative_eq!(f.column(1).into_owned(), Vector3::y(), epsilon = 1e-15);
    }
}
