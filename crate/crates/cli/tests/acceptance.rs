//! End-to-end acceptance checks. Prints one line per criterion and exits non-zero when
//! any of them fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volprim::atlas::build_texel_grid;
use volprim::camera::Ray;
use volprim::features::{
    appearance_slab, opacity_slab, view_features, DecodedGrad, DecoderInit, DecoderParams, DecoderShape, FeatureMaps,
};
use volprim::fit::{fit, select_views, FitConfig, FitContext};
use volprim::gradcheck::{self, SceneScale, DECODER_TOLERANCE, RENDER_TOLERANCE};
use volprim::lbs::{pose_mesh, rigid_subtree_check, Pose, PosedMesh, RigidTransform, Skeleton, TemplateMesh};
use volprim::primitives::{Correctives, Payloads, Primitive, PrimitiveSet};
use volprim::render::{march, render, RenderConfig, RenderOutput};
use volprim::rotation::exp_so3;
use volprim::synth::{build_scene, camera_ring, gen_scene, limb_rig, quad_rig, Dataset};

const GRADIENT_SCENES: usize = 20;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const MATCHED_STEP_TOLERANCE: f64 = 2e-3;
const MIN_CONVERGENCE_ORDER: f64 = 0.9;
const CONVERGENCE_BUDGET: Duration = Duration::from_secs(120);
const CLOSED_FORM_TOLERANCE: f64 = 1e-3;
const LBS_IDENTITY_TOLERANCE: f64 = 1e-12;
const LBS_EQUIVARIANCE_TOLERANCE: f64 = 1e-6;
const SUBTREE_POSES: usize = 50;
const VIEW_INVARIANCE_TOLERANCE: f64 = 1e-9;
const VIEW_TRANSFORMS: usize = 20;
const FIT_PSNR_DB: f64 = 30.0;
const FIT_BUDGET: Duration = Duration::from_secs(30 * 60);
const LOSS_WINDOW: usize = 200;
const SMOOTHING: usize = 100;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_rigid(r: &mut ChaCha8Rng) -> RigidTransform<f64> {
    let w = Vector3::from_fn(|_, _| r.random_range(-2.0..2.0));
    RigidTransform::new(exp_so3(&w), Vector3::from_fn(|_, _| r.random_range(-2.0..2.0)))
}

fn random_pose(r: &mut ChaCha8Rng, joints: usize) -> Pose<f64> {
    let rots = (0..joints)
        .map(|_| {
            let w = Vector3::from_fn(|_, _| r.random_range(-1.5..1.5));
            UnitQuaternion::from_scaled_axis(w)
        })
        .collect();
    Pose::from_unit_quaternions(rots, Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pixels(out: &RenderOutput<f64>) -> Vec<f64> {
    out.rgb.iter().chain(&out.alpha).copied().collect()
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn gradient_suite() -> Outcome {
    let report = match gradcheck::run(GRADIENT_SCENES, 0, SceneScale::Micro) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let (render, decoder) = (report.worst_render(), report.worst_decoder());
    outcome(
        render <= RENDER_TOLERANCE && decoder <= DECODER_TOLERANCE && report.elapsed < GRADIENT_BUDGET,
        format!(
            "{} scenes, render {render:.2e} (<= {RENDER_TOLERANCE:.0e}), decoder {decoder:.2e} (<= {DECODER_TOLERANCE:.0e}), {:.1} s (< {} s)",
            report.scenes,
            report.elapsed.as_secs_f64(),
            GRADIENT_BUDGET.as_secs()
        ),
    )
}

/// Quad preset, frame 0, camera 0. The base step `h` is the scene's own.
fn oracle_convergence() -> Outcome {
    let start = Instant::now();
    let scene = build_scene("quad", 7).expect("quad preset");
    let set = scene.frame_set(0).expect("frame 0");
    let cam = &scene.cameras[0];
    let oracle = scene.oracle();
    let base = scene.manifest.render_config();
    let h = base.step_size;
    let at = |dt: f64| {
        let cfg = RenderConfig { step_size: dt, ..base.clone() };
        pixels(&render(&set, cam, &cfg).expect("render"))
    };
    let matched = max_abs_diff(&at(h), &pixels(&oracle.render_with_step(&set, cam, h)));
    let reference = pixels(&oracle.render_with_step(&set, cam, h / 64.0));
    let errors: Vec<f64> = [4.0, 2.0, 1.0].iter().map(|k| mean_abs_diff(&at(k * h), &reference)).collect();
    let orders: Vec<f64> = errors.windows(2).map(|e| (e[0] / e[1]).log2()).collect();
    let order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    let elapsed = start.elapsed();
    outcome(
        matched <= MATCHED_STEP_TOLERANCE && order >= MIN_CONVERGENCE_ORDER && elapsed < CONVERGENCE_BUDGET,
        format!(
            "matched max|d| {matched:.2e} (<= {MATCHED_STEP_TOLERANCE:.0e}), errors {:.2e}/{:.2e}/{:.2e}, order {order:.2} (>= {MIN_CONVERGENCE_ORDER}), {:.1} s",
            errors[0],
            errors[1],
            errors[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn constant_box_closed_form() -> Outcome {
    let bg = Vector3::new(0.1, 0.2, 0.3);
    let c = Vector3::new(0.9, 0.4, 0.2);
    let mut worst = 0.0f64;
    let mut shrinking = true;
    for &a in &[0.3, 0.8, 2.5] {
        let mut payload = Payloads::zeros(1, 2);
        payload.alpha.iter_mut().for_each(|x| *x = a);
        for ch in 0..3 {
            payload.rgb[ch * 8..(ch + 1) * 8].iter_mut().for_each(|x| *x = c[ch]);
        }
        let prim = Primitive {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
            scale: Vector3::repeat(0.5),
        };
        let set = PrimitiveSet::new(vec![prim], vec![0], payload).expect("box");
        let ray = Ray::new(Vector3::new(0.1, -0.2, -3.0137), Vector3::z(), 0.0, 10.0);
        let alpha = f64::min(1.0, a);
        let expect = c * alpha + bg * (1.0 - alpha);
        let mut prev = f64::INFINITY;
        for &dt in &[1e-2, 1e-3, 1e-4] {
            let cfg = RenderConfig::new(dt, bg, 1 << 24).expect("config");
            let (rgb, al) = march(&ray, &set, &cfg).expect("march");
            let err = (al - alpha).abs().max((rgb - expect).amax());
            shrinking &= err <= prev.max(1e-12);
            prev = err;
        }
        worst = worst.max(prev);
    }
    outcome(
        shrinking && worst <= CLOSED_FORM_TOLERANCE,
        format!("error at dt=1e-4 {worst:.2e} (<= {CLOSED_FORM_TOLERANCE:.0e}), non-increasing as dt shrinks: {shrinking}"),
    )
}

/// Three joints in a chain along +x with blended weights on a strip.
fn chain_rig(r: &mut ChaCha8Rng) -> (Skeleton<f64>, TemplateMesh<f64>) {
    let rest = (0..3)
        .map(|j| {
            let t = if j == 0 { Vector3::zeros() } else { Vector3::new(1.0, 0.0, 0.0) };
            let w = Vector3::from_fn(|_, _| r.random_range(-0.2..0.2));
            RigidTransform::new(exp_so3(&w), t)
        })
        .collect();
    let skel = Skeleton::new(vec![None, Some(0), Some(1)], rest).expect("chain");
    let segments = 6;
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut weights = Vec::new();
    for i in 0..=segments {
        for j in 0..2 {
            let x = 3.0 * i as f64 / segments as f64;
            vertices.push(Vector3::new(x, j as f64, r.random_range(-0.05..0.05)));
            uv.push(Vector2::new(i as f64 / segments as f64, j as f64));
            // the last two columns belong to the leaf joint alone
            weights.push(if i + 2 > segments {
                vec![(2, 1.0)]
            } else {
                let mut w: Vec<(usize, f64)> = (0..3).map(|k| (k, r.random_range(0.05..1.0))).collect();
                let s: f64 = w.iter().map(|p| p.1).sum();
                w.iter_mut().for_each(|p| p.1 /= s);
                w
            });
        }
    }
    let triangles = (0..segments)
        .flat_map(|i| {
            let a = 2 * i;
            [[a, a + 2, a + 3], [a, a + 3, a + 1]]
        })
        .collect();
    (skel, TemplateMesh::new(vertices, triangles, uv, weights).expect("strip"))
}

fn articulation() -> Outcome {
    let mut r = rng(4);
    let mut identity = 0.0f64;
    let mut equivariance = 0.0f64;
    for _ in 0..SUBTREE_POSES {
        let (skel, template) = chain_rig(&mut r);
        let posed = pose_mesh(&skel, &Pose::identity(3), &template).expect("pose");
        for (a, b) in posed.vertices.iter().zip(&template.vertices) {
            identity = identity.max((a - b).amax());
        }
        let pose = random_pose(&mut r, 3);
        let g = random_rigid(&mut r);
        let base = pose_mesh(&skel, &pose, &template).expect("pose");
        let moved = pose_mesh(&skel, &pose.premultiply_root(&skel, &g), &template).expect("pose");
        for (a, b) in base.vertices.iter().zip(&moved.vertices) {
            equivariance = equivariance.max((g.apply(a) - b).amax());
        }
    }
    let (limb_template, limb_skel) = limb_rig(16, 16);
    let (quad_template, quad_skel) = quad_rig();
    let mut subtrees = 0;
    let mut rigid = true;
    for _ in 0..SUBTREE_POSES {
        let (skel, template) = chain_rig(&mut r);
        let checks = [
            rigid_subtree_check(&skel, &random_pose(&mut r, 3), &template, 2),
            rigid_subtree_check(&limb_skel, &random_pose(&mut r, 2), &limb_template, 1),
            rigid_subtree_check(&quad_skel, &random_pose(&mut r, 1), &quad_template, 0),
        ];
        for c in checks {
            subtrees += 1;
            rigid &= c.unwrap_or(false);
        }
    }
    outcome(
        identity <= LBS_IDENTITY_TOLERANCE && equivariance <= LBS_EQUIVARIANCE_TOLERANCE && rigid,
        format!(
            "identity {identity:.1e} (<= {LBS_IDENTITY_TOLERANCE:.0e}), equivariance {equivariance:.1e} (<= {LBS_EQUIVARIANCE_TOLERANCE:.0e}), {subtrees} fully weighted subtrees rigid: {rigid}"
        ),
    )
}

fn texel_alignment() -> Outcome {
    let (template, _) = quad_rig();
    let k = build_texel_grid(&template, 64).map(|g| g.valid_count()).unwrap_or(0);
    let (s, w) = (16, 8);
    let payload = Payloads::<f32>::zeros(w * w, s);
    let texels: Vec<usize> = (0..w * w).collect();
    let (alpha_shape, alpha) = opacity_slab(&payload, &texels, w);
    let (rgb_shape, rgb) = appearance_slab(&payload, &texels, w);
    let slabs = alpha_shape == [s, w * s, w * s]
        && alpha.len() == s * (w * s) * (w * s)
        && rgb_shape == [3, s, w * s, w * s]
        && rgb.len() == 3 * alpha.len();
    outcome(
        k == 4096 && slabs,
        format!("W=64 full coverage K={k} (== 4096), S=16 slabs {alpha_shape:?} / {rgb_shape:?}: {slabs}"),
    )
}

fn view_conditioning() -> Outcome {
    let mut r = rng(6);
    let (template, skel) = limb_rig(16, 16);
    let grid = build_texel_grid(&template, 8).expect("grid");
    let cams = camera_ring(4, 4.0, 0.8, 16).expect("cameras");
    let mut worst = 0.0f64;
    for _ in 0..VIEW_TRANSFORMS {
        let posed = pose_mesh(&skel, &random_pose(&mut r, 2), &template).expect("pose");
        let g = random_rigid(&mut r);
        let moved = PosedMesh::from_geometry(posed.vertices.iter().map(|v| g.apply(v)).collect(), &template).expect("mesh");
        for cam in &cams {
            let mut c = cam.clone();
            c.rotation = cam.rotation * g.rotation.transpose();
            c.translation = cam.translation - c.rotation * g.translation;
            let a = view_features(cam, &posed, &template, &grid);
            let b = view_features(&c, &moved, &template, &grid);
            worst = worst.max(max_abs_diff(&a, &b));
        }
    }

    let shape = DecoderShape { pose_channels: 4, image_channels: 3, voxels: 3, resolution: 4 };
    let params = DecoderParams::<f64>::init(
        shape,
        (0..16).collect(),
        0.1,
        nalgebra::DMatrix::zeros(4, 7),
        &DecoderInit { weight_std: 0.5, opacity_bias: 0.3, appearance_bias: 0.0, seed: 6 },
    );
    let mut f = FeatureMaps::zeros(4, 4, 3);
    f.pose.iter_mut().chain(f.image.iter_mut()).chain(f.view.iter_mut()).for_each(|x| *x = r.random_range(-1.0..1.0));
    let decoded = params.decode(&f).expect("decode");
    let upstream = DecodedGrad {
        correctives: (0..16)
            .map(|_| {
                let mut a = [0.0; 9];
                a.iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
                Correctives::from_slice(&a)
            })
            .collect(),
        alpha: (0..decoded.payload.alpha.len()).map(|_| r.random_range(-1.0..1.0)).collect(),
        rgb: vec![0.0; decoded.payload.rgb.len()],
    };
    let (_, fgrad) = params.decode_backward(&f, &decoded, &upstream).expect("backward");
    let isolated = fgrad.view.iter().all(|g| *g == 0.0) && fgrad.pose.iter().any(|g| *g != 0.0);
    outcome(
        worst <= VIEW_INVARIANCE_TOLERANCE && isolated,
        format!(
            "F_v drift {worst:.1e} (<= {VIEW_INVARIANCE_TOLERANCE:.0e}) over {VIEW_TRANSFORMS} rigid transforms, d(motion, opacity)/dF_v identically zero: {isolated}"
        ),
    )
}

fn curriculum() -> Outcome {
    let cfg = FitConfig::default();
    let views: Vec<usize> = (0..7).collect();
    let run = || {
        let mut r = rng(cfg.seed);
        (0..cfg.iterations).map(|it| select_views(it, &views, &cfg, &mut r)).collect::<Vec<_>>()
    };
    let a = run();
    let dense = a[..cfg.dense_phase_iterations].iter().all(|v| *v == views);
    let sparse = a[cfg.dense_phase_iterations..]
        .iter()
        .all(|v| v.len() == 3 && v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| views.contains(x)));
    let reproducible = a == run();
    outcome(
        dense && sparse && reproducible,
        format!("all views below {}: {dense}, exactly 3 from then on: {sparse}, reproducible: {reproducible}", cfg.dense_phase_iterations),
    )
}

/// Moving average of width [`SMOOTHING`], then every value must not exceed the one
/// [`LOSS_WINDOW`] iterations earlier.
fn loss_monotone(losses: &[f64]) -> (bool, f64) {
    let smooth: Vec<f64> = losses.windows(SMOOTHING).map(|w| w.iter().sum::<f64>() / SMOOTHING as f64).collect();
    let worst = smooth
        .iter()
        .zip(smooth.iter().skip(LOSS_WINDOW))
        .map(|(a, b)| b - a)
        .fold(f64::NEG_INFINITY, f64::max);
    (worst <= 0.0, worst)
}

fn synthetic_fit(dir: &Path) -> Outcome {
    let start = Instant::now();
    let root = dir.join("limb");
    if let Err(e) = gen_scene("limb", 7, &root) {
        return outcome(false, format!("error: {e}"));
    }
    let dataset = Dataset::load(&root).expect("dataset");
    let config = FitConfig::default();
    let result = match fit(&dataset, &config, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let ctx = FitContext::new(&dataset, &result.params.pose_projection, &config.render).expect("context");
    let rows = ctx.holdout_psnr(&result.params, &dataset.manifest.holdout_cameras).expect("eval");
    let mean = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    let min = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let losses: Vec<f64> = result.metrics.iter().map(|m| m.total).collect();
    let (monotone, rise) = loss_monotone(&losses);
    let elapsed = start.elapsed();
    outcome(
        mean >= FIT_PSNR_DB && monotone && elapsed <= FIT_BUDGET,
        format!(
            "{} iterations, holdout PSNR mean {mean:.2} dB (>= {FIT_PSNR_DB}), min {min:.2} dB, smoothed loss monotone over {LOSS_WINDOW}-iteration windows: {monotone} (largest change {rise:.2e}), {:.0} s (<= {} s)",
            losses.len(),
            elapsed.as_secs_f64(),
            FIT_BUDGET.as_secs()
        ),
    )
}

fn volprim(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_volprim"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    match (fs::read(a), fs::read(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn determinism(dir: &Path) -> Outcome {
    let scene = dir.join("quad");
    let s = scene.to_str().expect("utf-8 path");
    if !volprim(&["gen-scene", "--preset", "quad", "--seed", "3", "--out", s]) {
        return outcome(false, "gen-scene failed".into());
    }
    let config = dir.join("short.json");
    fs::write(&config, r#"{"iterations": 40, "dense_phase_iterations": 20, "eval_every": 10, "checkpoint_every": 15}"#)
        .expect("config");
    let mut compared = 0;
    let mut identical = true;
    for run in 0..2 {
        let fit_dir = dir.join(format!("fit{run}"));
        let img = dir.join(format!("render{run}.png"));
        identical &= volprim(&[
            "fit",
            "--scene",
            s,
            "--config",
            config.to_str().expect("utf-8 path"),
            "--out",
            fit_dir.to_str().expect("utf-8 path"),
        ]);
        identical &= volprim(&[
            "render",
            "--scene",
            s,
            "--frame",
            "1",
            "--camera",
            "2",
            "--params",
            fit_dir.join("params.bin").to_str().expect("utf-8 path"),
            "--out",
            img.to_str().expect("utf-8 path"),
        ]);
    }
    let mut files: Vec<_> = fs::read_dir(dir.join("fit0"))
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.file_name())).collect())
        .unwrap_or_default();
    files.sort();
    for name in &files {
        compared += 1;
        identical &= same_bytes(&dir.join("fit0").join(name), &dir.join("fit1").join(name));
    }
    for ext in ["png", "pfm"] {
        compared += 1;
        identical &= same_bytes(&dir.join(format!("render0.{ext}")), &dir.join(format!("render1.{ext}")));
    }
    outcome(
        identical && files.len() >= 3,
        format!("{compared} output files byte-identical across two runs: {identical}"),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let checks: [(&str, Box<dyn Fn() -> Outcome>); 9] = [
        ("gradient suite", Box::new(gradient_suite)),
        ("oracle agreement and convergence", Box::new(oracle_convergence)),
        ("constant box closed form", Box::new(constant_box_closed_form)),
        ("articulation", Box::new(articulation)),
        ("texel alignment", Box::new(texel_alignment)),
        ("view conditioning", Box::new(view_conditioning)),
        ("view curriculum", Box::new(curriculum)),
        ("synthetic fit", Box::new(|| synthetic_fit(dir.path()))),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.passed);
        println!("[{}] {}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
