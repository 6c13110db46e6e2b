#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volprim::lbs::{Pose, RigidTransform, Skeleton, TemplateMesh};
use volprim::primitives::{Payloads, Primitive, PrimitiveSet};
use volprim::rotation::exp_so3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let w = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    exp_so3(&w)
}

pub fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform<f64> {
    RigidTransform::new(random_rotation(rng), Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
}

/// Three joints in a chain along +x, one unit apart.
pub fn chain_skeleton(rng: &mut ChaCha8Rng) -> Skeleton<f64> {
    let rest = (0..3)
        .map(|j| {
            let t = if j == 0 { Vector3::zeros() } else { Vector3::new(1.0, 0.0, 0.0) };
            let small = Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
            RigidTransform::new(exp_so3(&small), t)
        })
        .collect();
    Skeleton::new(vec![None, Some(0), Some(1)], rest).unwrap()
}

pub fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Pose<f64> {
    let rots = (0..joints)
        .map(|_| UnitQuaternion::from_matrix(&random_rotation(rng)))
        .collect();
    Pose::from_unit_quaternions(rots, Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
}

/// Strip of quads along x in `[0, 3]`, `y` in `{0, 1}`, with random blended weights.
pub fn strip_template(rng: &mut ChaCha8Rng, segments: usize, joints: usize) -> TemplateMesh<f64> {
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut weights = Vec::new();
    for i in 0..=segments {
        for j in 0..2 {
            let x = 3.0 * i as f64 / segments as f64;
            vertices.push(Vector3::new(x, j as f64, rng.random_range(-0.05..0.05)));
            uv.push(Vector2::new(i as f64 / segments as f64, j as f64));
            let mut w: Vec<(usize, f64)> = (0..joints).map(|k| (k, rng.random_range(0.05..1.0))).collect();
            let s: f64 = w.iter().map(|p| p.1).sum();
            w.iter_mut().for_each(|p| p.1 /= s);
            weights.push(w);
        }
    }
    let mut triangles = Vec::new();
    for i in 0..segments {
        let a = 2 * i;
        triangles.push([a, a + 2, a + 3]);
        triangles.push([a, a + 3, a + 1]);
    }
    TemplateMesh::new(vertices, triangles, uv, weights).unwrap()
}

pub fn homogeneous(t: &RigidTransform<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
    m
}

/// Posed vertices from explicitly chained 4x4 world matrices, blended per vertex.
pub fn lbs_oracle(skel: &Skeleton<f64>, pose: &Pose<f64>, template: &TemplateMesh<f64>) -> Vec<Vector3<f64>> {
    let n = skel.joint_count();
    let mut rest = vec![Matrix4::identity(); n];
    let mut posed = vec![Matrix4::identity(); n];
    for j in 0..n {
        let local = homogeneous(skel.rest_local(j));
        let mut rot = Matrix4::identity();
        rot.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation_matrix(j));
        match skel.parent(j) {
            Some(p) => {
                rest[j] = rest[p] * local;
                posed[j] = posed[p] * local * rot;
            }
            None => {
                let mut trans = Matrix4::identity();
                trans.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.root_translation);
                rest[j] = local;
                posed[j] = trans * local * rot;
            }
        }
    }
    let skin: Vec<Matrix4<f64>> = (0..n).map(|j| posed[j] * rest[j].try_inverse().unwrap()).collect();
    template
        .vertices
        .iter()
        .zip(&template.skin_weights)
        .map(|(v, w)| {
            let h = v.push(1.0);
            let mut m = Matrix4::zeros();
            for &(j, wt) in w {
                m += skin[j] * wt;
            }
            (m * h).xyz()
        })
        .collect()
}

pub fn random_primitives(rng: &mut ChaCha8Rng, count: usize, voxels: usize, spread: f64) -> PrimitiveSet<f64> {
    let prims = (0..count)
        .map(|_| Primitive {
            position: Vector3::from_fn(|_, _| rng.random_range(-spread..spread)),
            rotation: random_rotation(rng),
            scale: Vector3::from_fn(|_, _| rng.random_range(0.1..0.4)),
        })
        .collect();
    let mut payload = Payloads::zeros(count, voxels);
    payload.alpha.iter_mut().for_each(|a| *a = rng.random_range(0.0..3.0));
    payload.rgb.iter_mut().for_each(|c| *c = rng.random_range(0.0..1.0));
    PrimitiveSet::new(prims, (0..count).collect(), payload).unwrap()
}

/// `camera` re-expressed for a world moved by `g`.
pub fn transform_camera(cam: &volprim::camera::Camera<f64>, g: &RigidTransform<f64>) -> volprim::camera::Camera<f64> {
    let mut c = cam.clone();
    c.rotation = cam.rotation * g.rotation.transpose();
    c.translation = cam.translation - c.rotation * g.translation;
    c
}

pub fn transform_set(set: &PrimitiveSet<f64>, g: &RigidTransform<f64>) -> PrimitiveSet<f64> {
    let mut s = set.clone();
    for p in &mut s.primitives {
        p.position = g.apply(&p.position);
        p.rotation = g.rotation * p.rotation;
    }
    s
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
