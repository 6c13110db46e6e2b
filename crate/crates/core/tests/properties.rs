mod common;

use common::*;
use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;
use rand::Rng;
use volprim::accel::{intersect_brute_force, intersect_primitives, scene_bounds, UniformGrid};
use volprim::atlas::{build_texel_grid, unwrap_views};
use volprim::camera::Camera;
use volprim::features::{pose_features, random_orthonormal_projection, view_features, DecoderInit, DecoderParams, DecoderShape, FeatureMaps};
use volprim::imaging::Image;
use volprim::lbs::{pose_mesh, PosedMesh};
use volprim::optim::{Adam, AdamConfig};
use volprim::primitives::{apply_correctives, init_basis, Correctives};
use volprim::render::{render, RenderConfig};
use volprim::rotation::exp_so3;
use volprim::synth::{camera_ring, limb_rig, OracleRenderer};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn identity_pose_leaves_vertices(seed in any::<u64>()) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 6, 3);
        let posed = pose_mesh(&skel, &volprim::lbs::Pose::identity(3), &template).unwrap();
        for (a, b) in posed.vertices.iter().zip(&template.vertices) {
            prop_assert!((a - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn lbs_matches_matrix_chain(seed in any::<u64>()) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 6, 3);
        let pose = random_pose(&mut r, 3);
        let posed = pose_mesh(&skel, &pose, &template).unwrap();
        for (a, b) in posed.vertices.iter().zip(lbs_oracle(&skel, &pose, &template)) {
            prop_assert!((a - b).amax() <= 1e-9);
        }
    }

    #[test]
    fn root_rigid_motion_moves_every_vertex(seed in any::<u64>()) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 6, 3);
        let pose = random_pose(&mut r, 3);
        let g = random_rigid(&mut r);
        let a = pose_mesh(&skel, &pose, &template).unwrap();
        let b = pose_mesh(&skel, &pose.premultiply_root(&skel, &g), &template).unwrap();
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            prop_assert!((g.apply(p) - q).amax() <= 1e-6);
        }
    }

    #[test]
    fn frames_are_rotations(seed in any::<u64>()) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 6, 3);
        let posed = pose_mesh(&skel, &random_pose(&mut r, 3), &template).unwrap();
        for (f, n) in posed.triangle_frames.iter().zip(&posed.triangle_normals) {
            prop_assert!((f.transpose() * f - nalgebra::Matrix3::identity()).amax() <= 1e-6);
            prop_assert!((f.determinant() - 1.0).abs() <= 1e-6);
            prop_assert!((n.norm() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn basis_follows_root_motion(seed in any::<u64>()) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 6, 3);
        let grid = build_texel_grid(&template, 4).unwrap();
        let pose = random_pose(&mut r, 3);
        let g = random_rigid(&mut r);
        let a = init_basis(&template, &pose_mesh(&skel, &pose, &template).unwrap(), &grid, 1.0).unwrap();
        let moved = pose_mesh(&skel, &pose.premultiply_root(&skel, &g), &template).unwrap();
        let b = init_basis(&template, &moved, &grid, 1.0).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((g.apply(&p.position) - q.position).amax() <= 1e-6);
            prop_assert!((g.rotation * p.orientation - q.orientation).amax() <= 1e-6);
            prop_assert!((p.scale - q.scale).amax() <= 1e-9);
        }
    }

    #[test]
    fn correctives_match_matrix_composition(seed in any::<u64>()) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 4, 3);
        let grid = build_texel_grid(&template, 4).unwrap();
        let basis = init_basis(&template, &pose_mesh(&skel, &random_pose(&mut r, 3), &template).unwrap(), &grid, 1.0).unwrap();
        let corr: Vec<Correctives<f64>> = basis
            .iter()
            .map(|_| Correctives {
                delta_position: Vector3::from_fn(|_, _| r.random_range(-0.1..0.1)),
                delta_rotation: Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)),
                delta_scale: Vector3::from_fn(|_, _| r.random_range(-0.01..0.01)),
            })
            .collect();
        let payload = volprim::primitives::Payloads::zeros(basis.len(), 2);
        let set = apply_correctives(&basis, &corr, payload).unwrap();
        for ((p, b), c) in set.primitives.iter().zip(&basis).zip(&corr) {
            // Rodrigues with explicit matrices
            let w = c.delta_rotation;
            let th = w.norm();
            let k = w.cross_matrix() / th;
            let rot = nalgebra::Matrix3::identity() + k * th.sin() + k * k * (1.0 - th.cos());
            prop_assert!((p.rotation - rot * b.orientation).amax() <= 1e-12);
            prop_assert!((p.position - (b.position + c.delta_position)).amax() <= 1e-15);
            let s = (b.scale + c.delta_scale).map(|x| x.max(1e-4));
            prop_assert!((p.scale - s).amax() <= 1e-15);
        }
    }

    #[test]
    fn world_local_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let set = random_primitives(&mut r, 5, 2, 1.0);
        for p in &set.primitives {
            let x = Vector3::from_fn(|_, _| r.random_range(-3.0..3.0));
            prop_assert!((p.local_to_world(&p.world_to_local(&x)) - x).amax() <= 1e-9);
            let l = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0));
            prop_assert!((p.world_to_local(&p.local_to_world(&l)) - l).amax() <= 1e-9);
        }
    }

    #[test]
    fn grid_intersection_equals_brute_force(seed in any::<u64>()) {
        let mut r = rng(seed);
        let set = random_primitives(&mut r, 100, 1, 2.0);
        let grid = UniformGrid::build(&set);
        let bounds = scene_bounds(&set);
        for _ in 0..50 {
            let origin = Vector3::from_fn(|_, _| r.random_range(-5.0..5.0));
            let target = Vector3::from_fn(|_, _| r.random_range(-1.5..1.5));
            let dir = (target - origin).normalize();
            let (t0, t1) = bounds.clip(&origin, &dir).unwrap_or((0.0, 0.0));
            let ray = volprim::camera::Ray { origin, direction: dir, t_min: t0, t_max: t1 };
            let a = intersect_primitives(&ray, &set, &grid);
            let b = intersect_brute_force(&ray, &set);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.primitive, y.primitive);
                prop_assert!((x.t_enter - y.t_enter).abs() <= 1e-9);
                prop_assert!((x.t_exit - y.t_exit).abs() <= 1e-9);
            }
        }
    }
}

fn small_camera(r: &mut rand_chacha::ChaCha8Rng, size: usize) -> Camera<f64> {
    let dir = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)).normalize();
    Camera::look_at(dir * 4.0, Vector3::zeros(), Vector3::new(0.3, 1.0, 0.1), 0.7, size, size).unwrap()
}

proptest! {
    #![proptest_config(cfg(24))]

    #[test]
    fn render_is_rigidly_equivariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let set = random_primitives(&mut r, 6, 4, 0.5);
        let cam = small_camera(&mut r, 8);
        let g = random_rigid(&mut r);
        let config = RenderConfig::new(0.03, Vector3::new(0.2, 0.3, 0.4), 1 << 20).unwrap();
        let a = render(&set, &cam, &config).unwrap();
        let b = render(&transform_set(&set, &g), &transform_camera(&cam, &g), &config).unwrap();
        prop_assert!(max_abs_diff(&a.rgb, &b.rgb) <= 1e-5);
        prop_assert!(max_abs_diff(&a.alpha, &b.alpha) <= 1e-5);
    }

    #[test]
    fn alpha_is_monotone_in_each_voxel(seed in any::<u64>(), bump in 0.0f64..5.0) {
        let mut r = rng(seed);
        let set = random_primitives(&mut r, 4, 3, 0.4);
        let cam = small_camera(&mut r, 6);
        let config = RenderConfig::new(0.03, Vector3::zeros(), 1 << 20).unwrap();
        let before = render(&set, &cam, &config).unwrap();
        let mut more = set.clone();
        let i = r.random_range(0..more.payload.alpha.len());
        more.payload.alpha[i] += bump;
        let after = render(&more, &cam, &config).unwrap();
        for (a, b) in before.alpha.iter().zip(&after.alpha) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn early_stop_matches_exhaustive_lattice(seed in any::<u64>()) {
        // dense payloads so most rays saturate
        let mut r = rng(seed);
        let mut set = random_primitives(&mut r, 5, 3, 0.3);
        set.payload.alpha.iter_mut().for_each(|a| *a *= 20.0);
        let cam = small_camera(&mut r, 6);
        let dt = 0.02;
        let config = RenderConfig::new(dt, Vector3::new(0.5, 0.5, 0.5), 1 << 20).unwrap();
        let engine = render(&set, &cam, &config).unwrap();
        let mut oracle = OracleRenderer::new(4096);
        oracle.background = Vector3::new(0.5, 0.5, 0.5);
        let full = oracle.render_with_step(&set, &cam, dt);
        prop_assert!(engine.alpha.contains(&1.0));
        prop_assert!(max_abs_diff(&engine.rgb, &full.rgb) <= 1e-12);
        prop_assert!(max_abs_diff(&engine.alpha, &full.alpha) <= 1e-12);
    }
}

fn limb_scene() -> (volprim::lbs::TemplateMesh<f64>, PosedMesh<f64>, Vec<Camera<f64>>) {
    let (template, skel) = limb_rig(12, 8);
    let mut rots = vec![nalgebra::UnitQuaternion::identity(); 2];
    rots[1] = nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.4);
    let pose = volprim::lbs::Pose::from_unit_quaternions(rots, Vector3::zeros());
    let posed = pose_mesh(&skel, &pose, &template).unwrap();
    let cams = camera_ring(4, 4.0, 0.8, 16).unwrap();
    (template, posed, cams)
}

proptest! {
    #![proptest_config(cfg(8))]

    #[test]
    fn unwrap_ignores_view_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (template, posed, cams) = limb_scene();
        let imgs: Vec<Image<f64>> = cams
            .iter()
            .map(|c| Image::from_vec(c.width, c.height, 3, (0..c.width * c.height * 3).map(|_| r.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let a = unwrap_views(&posed, &template, &cams, &imgs, 16).unwrap();
        let mut order: Vec<usize> = (0..cams.len()).collect();
        order.reverse();
        order.swap(0, 1);
        let pc: Vec<_> = order.iter().map(|&i| cams[i].clone()).collect();
        let pi: Vec<_> = order.iter().map(|&i| imgs[i].clone()).collect();
        let b = unwrap_views(&posed, &template, &pc, &pi, 16).unwrap();
        prop_assert_eq!(&a.weight, &b.weight);
        prop_assert!(max_abs_diff(&a.data, &b.data) <= 1e-12);

        let doubled: Vec<_> = imgs.iter().map(|i| i.scaled(2.0)).collect();
        let c = unwrap_views(&posed, &template, &cams, &doubled, 16).unwrap();
        prop_assert_eq!(&a.weight, &c.weight);
        for (x, y) in a.data.iter().zip(&c.data) {
            prop_assert!((2.0 * x - y).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(cfg(32))]

    #[test]
    fn view_features_are_rigidly_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (template, posed, cams) = limb_scene();
        let grid = build_texel_grid(&template, 8).unwrap();
        let g = random_rigid(&mut r);
        let moved = PosedMesh::from_geometry(posed.vertices.iter().map(|v| g.apply(v)).collect(), &template).unwrap();
        for cam in &cams {
            let a = view_features(cam, &posed, &template, &grid);
            let b = view_features(&transform_camera(cam, &g), &moved, &template, &grid);
            prop_assert!(max_abs_diff(&a, &b) <= 1e-9);
        }
    }

    #[test]
    fn pose_features_are_linear_in_projection(seed in any::<u64>(), k in -3.0f64..3.0) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 4, 3);
        let grid = build_texel_grid(&template, 4).unwrap();
        let pose = random_pose(&mut r, 3);
        let p = random_orthonormal_projection::<f64>(5, 15, seed);
        let q = DMatrix::from_fn(5, 15, |_, _| r.random_range(-1.0..1.0));
        let fp = pose_features(&pose, &template, &grid, &p).unwrap();
        let fq = pose_features(&pose, &template, &grid, &q).unwrap();
        let f = pose_features(&pose, &template, &grid, &(&p * k + &q)).unwrap();
        for ((a, b), c) in fp.iter().zip(&fq).zip(&f) {
            prop_assert!((k * a + b - c).abs() <= 1e-12);
        }
        let _ = skel;
    }

    #[test]
    fn view_map_only_reaches_appearance(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = DecoderShape { pose_channels: 3, image_channels: 3, voxels: 2, resolution: 3 };
        let params = DecoderParams::<f64>::init(
            shape,
            (0..9).collect(),
            0.1,
            DMatrix::zeros(3, 7),
            &DecoderInit { weight_std: 0.5, opacity_bias: 0.3, appearance_bias: 0.0, seed },
        );
        let mut f = FeatureMaps::zeros(3, 3, 3);
        f.pose.iter_mut().chain(f.image.iter_mut()).chain(f.view.iter_mut()).for_each(|x| *x = r.random_range(-1.0..1.0));
        let a = params.decode(&f).unwrap();
        f.view.iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
        let b = params.decode(&f).unwrap();
        prop_assert_eq!(&a.correctives, &b.correctives);
        prop_assert_eq!(&a.payload.alpha, &b.payload.alpha);
        prop_assert!(a.payload.rgb != b.payload.rgb);
        prop_assert!(a.payload.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn adam_first_step_scales_with_learning_rate(seed in any::<u64>(), c in 0.01f64..10.0) {
        let mut r = rng(seed);
        let p0: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let step = |lr: f64| {
            let mut opt = Adam::new(AdamConfig { learning_rate: lr, ..AdamConfig::default() }, &[8]);
            let mut p = p0.clone();
            opt.step(&mut [&mut p], &[&g]).unwrap();
            p.iter().zip(&p0).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let base = step(1e-3);
        let scaled = step(1e-3 * c);
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a * c - b).abs() <= 1e-12 * c.max(1.0));
        }
    }

    #[test]
    fn zero_correctives_are_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let skel = chain_skeleton(&mut r);
        let template = strip_template(&mut r, 4, 3);
        let grid = build_texel_grid(&template, 4).unwrap();
        let basis = init_basis(&template, &pose_mesh(&skel, &random_pose(&mut r, 3), &template).unwrap(), &grid, 1.0).unwrap();
        let set = apply_correctives(&basis, &vec![Correctives::default(); basis.len()], volprim::primitives::Payloads::zeros(basis.len(), 1)).unwrap();
        for (p, b) in set.primitives.iter().zip(&basis) {
            prop_assert_eq!(p.position, b.position);
            prop_assert_eq!(p.rotation, b.orientation);
            prop_assert_eq!(p.scale, b.scale);
        }
        let _ = exp_so3(&Vector3::<f64>::zeros());
    }
}
