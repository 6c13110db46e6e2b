//! Adjoint versus central finite differences on small random scenes.
//!
//! Scenes are redrawn until every sample sits clear of the piecewise boundaries of
//! the forward pass (box faces, trilinear cells, the border clamp, saturation and
//! the mask-loss absolute value), so both sides see the same smooth branch.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::accel::scene_bounds;
use crate::atlas::build_texel_grid;
use crate::camera::Camera;
use crate::error::Result;
use crate::features::{DecoderInit, DecoderParams, DecoderShape, FeatureMaps};
use crate::imaging::Image;
use crate::lbs::TemplateMesh;
use crate::loss::{composite_loss, LossWeights};
use crate::primitives::{apply_correctives, apply_correctives_backward, init_basis, Payloads, Primitive, PrimitiveBasis, PrimitiveSet};
use crate::render::{render, render_backward, RenderConfig, RenderGrads, RenderOutput};
use crate::rotation::exp_so3;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Minimum clearance from any branch boundary.
pub const KINK_MARGIN: f64 = 1e-4;
pub const RENDER_TOLERANCE: f64 = 1e-4;
pub const DECODER_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneScale {
    /// At most 4 primitives and 16 pixels per view.
    Micro,
    /// At most 8 primitives and 64 pixels per view.
    Small,
}

impl SceneScale {
    fn primitives(self) -> usize {
        match self {
            SceneScale::Micro => 4,
            SceneScale::Small => 8,
        }
    }

    fn pixels(self) -> usize {
        match self {
            SceneScale::Micro => 4,
            SceneScale::Small => 8,
        }
    }
}

/// Worst relative error of one parameter class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassError {
    pub class: &'static str,
    pub relative: f64,
    pub max_abs_error: f64,
    pub max_reference: f64,
}

/// `max |a - f| / max(max |f|, 1e-10)` over the entries of one class.
pub fn relative_error(adjoint: &[f64], numeric: &[f64]) -> (f64, f64, f64) {
    let err = adjoint.iter().zip(numeric).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|f| f.abs()).fold(0.0, f64::max);
    (err / scale.max(1e-10), err, scale)
}

fn merge(into: &mut Vec<ClassError>, class: &'static str, adjoint: &[f64], numeric: &[f64]) {
    let (relative, max_abs_error, max_reference) = relative_error(adjoint, numeric);
    match into.iter_mut().find(|c| c.class == class) {
        Some(c) if c.relative >= relative => {}
        Some(c) => {
            *c = ClassError {
                class,
                relative,
                max_abs_error,
                max_reference,
            }
        }
        None => into.push(ClassError {
            class,
            relative,
            max_abs_error,
            max_reference,
        }),
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub render: Vec<ClassError>,
    pub decoder: Vec<ClassError>,
    pub scenes: usize,
    pub rejected: usize,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn worst_render(&self) -> f64 {
        self.render.iter().map(|c| c.relative).fold(0.0, f64::max)
    }

    pub fn worst_decoder(&self) -> f64 {
        self.decoder.iter().map(|c| c.relative).fold(0.0, f64::max)
    }
}

/// True when every lattice sample of every pixel ray keeps `margin` away from box
/// faces and trilinear cell boundaries, and accumulated opacity keeps away from 1.
pub fn clear_of_kinks(set: &PrimitiveSet<f64>, cameras: &[Camera<f64>], config: &RenderConfig<f64>, margin: f64) -> bool {
    if set.is_empty() {
        return true;
    }
    let bounds = scene_bounds(set);
    let s = set.payload.voxels;
    let dt = config.step_size;
    for cam in cameras {
        for py in 0..cam.height {
            for px in 0..cam.width {
                let ray = cam.pixel_ray(px, py, Some(&bounds));
                if ray.t_max <= ray.t_min {
                    continue;
                }
                let first = (ray.t_min / dt - 0.5).floor().max(0.0) as usize;
                let last = (ray.t_max / dt + 0.5).ceil() as usize;
                let mut acc = 0.0;
                for i in first..=last {
                    let t = (i as f64 + 0.5) * dt;
                    let x = ray.at(t);
                    let mut density = 0.0;
                    for (k, p) in set.primitives.iter().enumerate() {
                        let l = p.world_to_local(&x);
                        let m = l.abs().max();
                        if (m - 1.0).abs() < margin {
                            return false;
                        }
                        if m > 1.0 {
                            continue;
                        }
                        for a in 0..3 {
                            let g = (l[a] + 1.0) * s as f64 / 2.0 - 0.5;
                            if s > 1 && (g - g.round()).abs() < margin {
                                return false;
                            }
                        }
                        density += trilinear(set.payload.alpha_of(k), s, &l);
                    }
                    if acc >= 1.0 {
                        continue;
                    }
                    let u = acc + density * dt;
                    if (u - 1.0).abs() < margin {
                        return false;
                    }
                    acc = u.min(1.0);
                }
            }
        }
    }
    true
}

fn trilinear(v: &[f64], s: usize, l: &Vector3<f64>) -> f64 {
    let mut idx = [(0usize, 0usize, 0.0f64); 3];
    for a in 0..3 {
        if s == 1 {
            continue;
        }
        let g = ((l[a] + 1.0) * s as f64 / 2.0 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = (g.floor() as usize).min(s - 2);
        idx[a] = (i0, i0 + 1, g - i0 as f64);
    }
    let mut acc = 0.0;
    for c in 0..8 {
        let pick = |a: usize| if (c >> a) & 1 == 1 { (idx[a].1, idx[a].2) } else { (idx[a].0, 1.0 - idx[a].2) };
        let (x, wx) = pick(0);
        let (y, wy) = pick(1);
        let (z, wz) = pick(2);
        acc += wx * wy * wz * v[(z * s + y) * s + x];
    }
    acc
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let w = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    exp_so3(&w)
}

fn micro_camera(size: usize, rng: &mut ChaCha8Rng) -> Result<Camera<f64>> {
    let dir = Vector3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
    Camera::look_at(dir * 3.0, Vector3::zeros(), Vector3::new(0.1, 1.0, 0.2), 0.45, size, size)
}

fn random_set(rng: &mut ChaCha8Rng, count: usize, voxels: usize) -> Result<PrimitiveSet<f64>> {
    let prims = (0..count)
        .map(|_| Primitive {
            position: Vector3::from_fn(|_, _| rng.random_range(-0.25..0.25)),
            rotation: random_rotation(rng),
            scale: Vector3::from_fn(|_, _| rng.random_range(0.2..0.45)),
        })
        .collect();
    let mut payload = Payloads::zeros(count, voxels);
    payload.alpha.iter_mut().for_each(|a| *a = rng.random_range(0.0..1.5));
    payload.rgb.iter_mut().for_each(|c| *c = rng.random_range(0.0..1.0));
    PrimitiveSet::new(prims, (0..count).collect(), payload)
}

/// Scalar objective `sum g . rgb + sum g_a alpha` and its render adjoint.
struct LinearObjective {
    rgb: Vec<f64>,
    alpha: Vec<f64>,
}

impl LinearObjective {
    fn random(rng: &mut ChaCha8Rng, pixels: usize) -> Self {
        Self {
            rgb: (0..3 * pixels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            alpha: (0..pixels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn eval(&self, out: &RenderOutput<f64>) -> f64 {
        let a: f64 = out.rgb.iter().zip(&self.rgb).map(|(x, g)| x * g).sum();
        let b: f64 = out.alpha.iter().zip(&self.alpha).map(|(x, g)| x * g).sum();
        a + b
    }
}

/// One render-parameter check; `None` when the scene was too close to a kink.
pub fn check_render_scene(seed: u64, scale: SceneScale) -> Result<Option<Vec<ClassError>>> {
    render_case(seed, scale.primitives(), scale.pixels(), FD_STEP, KINK_MARGIN)
}

fn render_case(seed: u64, max_primitives: usize, size: usize, h: f64, margin: f64) -> Result<Option<Vec<ClassError>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=max_primitives);
    let set = random_set(&mut rng, count, 4)?;
    let cam = micro_camera(size, &mut rng)?;
    let config = RenderConfig::new(0.04, Vector3::new(0.2, 0.1, 0.3), 1 << 20)?;
    if !clear_of_kinks(&set, std::slice::from_ref(&cam), &config, margin) {
        return Ok(None);
    }
    let obj = LinearObjective::random(&mut rng, cam.width * cam.height);
    let f = |s: &PrimitiveSet<f64>| -> Result<f64> { Ok(obj.eval(&render(s, &cam, &config)?)) };
    let grads = render_backward(&set, &cam, &config, &obj.rgb, Some(&obj.alpha))?;
    let central = |plus: &PrimitiveSet<f64>, minus: &PrimitiveSet<f64>| -> Result<f64> { Ok((f(plus)? - f(minus)?) / (2.0 * h)) };
    let mut out = Vec::new();

    let mut numeric = Vec::with_capacity(set.payload.alpha.len());
    for i in 0..set.payload.alpha.len() {
        let (mut p, mut m) = (set.clone(), set.clone());
        p.payload.alpha[i] += h;
        m.payload.alpha[i] -= h;
        numeric.push(central(&p, &m)?);
    }
    merge(&mut out, "alpha", &grads.alpha, &numeric);

    let mut numeric = Vec::with_capacity(set.payload.rgb.len());
    for i in 0..set.payload.rgb.len() {
        let (mut p, mut m) = (set.clone(), set.clone());
        p.payload.rgb[i] += h;
        m.payload.rgb[i] -= h;
        numeric.push(central(&p, &m)?);
    }
    merge(&mut out, "rgb", &grads.rgb, &numeric);

    for (class, which) in [("position", 0), ("rotation", 1), ("scale", 2)] {
        let mut numeric = Vec::new();
        let mut adjoint = Vec::new();
        for k in 0..set.len() {
            let g = &grads.placement[k];
            let a = [g.position, g.rotation, g.scale][which];
            for axis in 0..3 {
                let (mut p, mut m) = (set.clone(), set.clone());
                let e = Vector3::ith(axis, h);
                match which {
                    0 => {
                        p.primitives[k].position += e;
                        m.primitives[k].position -= e;
                    }
                    1 => {
                        p.primitives[k].rotation = exp_so3(&e) * set.primitives[k].rotation;
                        m.primitives[k].rotation = exp_so3(&-e) * set.primitives[k].rotation;
                    }
                    _ => {
                        p.primitives[k].scale += e;
                        m.primitives[k].scale -= e;
                    }
                }
                numeric.push(central(&p, &m)?);
                adjoint.push(a[axis]);
            }
        }
        merge(&mut out, class, &adjoint, &numeric);
    }
    Ok(Some(out))
}

/// Quad template split into `W x W` texels, one joint.
fn micro_template() -> TemplateMesh<f64> {
    TemplateMesh::new(
        vec![
            Vector3::new(-0.5, -0.5, 0.0),
            Vector3::new(0.5, -0.5, 0.0),
            Vector3::new(0.5, 0.5, 0.0),
            Vector3::new(-0.5, 0.5, 0.0),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
        vec![
            nalgebra::Vector2::new(0.0, 0.0),
            nalgebra::Vector2::new(1.0, 0.0),
            nalgebra::Vector2::new(1.0, 1.0),
            nalgebra::Vector2::new(0.0, 1.0),
        ],
        vec![vec![(0, 1.0)]; 4],
    )
    .expect("valid quad")
}

struct DecoderScene {
    basis: Vec<PrimitiveBasis<f64>>,
    features: FeatureMaps<f64>,
    /// Per view feature map.
    views: Vec<Vec<f64>>,
    cameras: Vec<Camera<f64>>,
    targets: Vec<Image<f64>>,
    silhouettes: Vec<Image<f64>>,
    config: RenderConfig<f64>,
    weights: LossWeights,
}

impl DecoderScene {
    fn sets(&self, params: &DecoderParams<f64>) -> Result<Vec<PrimitiveSet<f64>>> {
        self.views
            .iter()
            .map(|v| {
                let mut f = self.features.clone();
                f.view = v.clone();
                let d = params.decode(&f)?;
                apply_correctives(&self.basis, &d.correctives, d.payload)
            })
            .collect()
    }

    fn loss(&self, params: &DecoderParams<f64>) -> Result<f64> {
        let sets = self.sets(params)?;
        let renders = sets
            .iter()
            .zip(&self.cameras)
            .map(|(s, c)| render(s, c, &self.config))
            .collect::<Result<Vec<_>>>()?;
        Ok(composite_loss(&renders, &self.targets, &self.silhouettes, &sets[0], &self.weights)?.total)
    }

    /// Adjoint through render, correctives and decoder, one decode per view.
    fn gradient(&self, params: &DecoderParams<f64>) -> Result<DecoderParams<f64>> {
        let sets = self.sets(params)?;
        let renders = sets
            .iter()
            .zip(&self.cameras)
            .map(|(s, c)| render(s, c, &self.config))
            .collect::<Result<Vec<_>>>()?;
        let loss = composite_loss(&renders, &self.targets, &self.silhouettes, &sets[0], &self.weights)?;
        let mut total = params.zeros_like();
        for (i, v) in self.views.iter().enumerate() {
            let g: RenderGrads<f64> = render_backward(&sets[i], &self.cameras[i], &self.config, &loss.rgb_grads[i], Some(&loss.alpha_grads[i]))?;
            let mut placement = g.placement.clone();
            if i == 0 {
                for (p, s) in placement.iter_mut().zip(&loss.scale_grads) {
                    p.scale += s;
                }
            }
            let mut f = self.features.clone();
            f.view = v.clone();
            let decoded = params.decode(&f)?;
            let corr = apply_correctives_backward(&self.basis, &decoded.correctives, &placement);
            let upstream = crate::features::DecodedGrad {
                correctives: corr,
                alpha: g.alpha,
                rgb: g.rgb,
            };
            let (pg, _) = params.decode_backward(&f, &decoded, &upstream)?;
            total.add_assign(&pg);
        }
        Ok(total)
    }
}

fn decoder_scene(seed: u64, scale: SceneScale) -> Result<(DecoderScene, DecoderParams<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = micro_template();
    let res = if scale == SceneScale::Micro { 2 } else { 3 };
    let grid = build_texel_grid(&template, res)?;
    let posed = template.rest_posed()?;
    let basis = init_basis(&template, &posed, &grid, 1.0)?;
    let n = res * res;
    let shape = DecoderShape {
        pose_channels: 2,
        image_channels: 3,
        voxels: 3,
        resolution: res,
    };
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    };
    let features = FeatureMaps {
        resolution: res,
        pose: (0..2 * n).map(|_| normal(1.0)).collect(),
        image: (0..3 * n).map(|_| normal(1.0)).collect(),
        view: vec![0.0; n],
    };
    let views: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| normal(0.5)).collect()).collect();
    let params = DecoderParams::init(
        shape,
        grid.valid_texels(),
        0.05,
        DMatrix::zeros(2, 7),
        &DecoderInit {
            weight_std: 0.3,
            opacity_bias: 0.0,
            appearance_bias: 0.0,
            seed: rng.random(),
        },
    );
    let mut params = params;
    params.motion_bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    params.opacity_bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    params.appearance_bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    let size = scale.pixels();
    let mut cameras = Vec::new();
    for _ in 0..2 {
        // in front of the quad so rays cross it
        let dir = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0).normalize();
        cameras.push(Camera::look_at(dir * 3.0, Vector3::zeros(), Vector3::y(), 0.45, size, size)?);
    }
    let px = size * size;
    let targets = (0..2)
        .map(|_| Image::from_vec(size, size, 3, (0..3 * px).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let silhouettes = (0..2)
        .map(|_| Image::from_vec(size, size, 1, (0..px).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let scene = DecoderScene {
        basis,
        features,
        views,
        cameras,
        targets,
        silhouettes,
        config: RenderConfig::new(0.04, Vector3::new(0.1, 0.2, 0.3), 1 << 20)?,
        weights: LossWeights {
            lambda_rgb: 1.0,
            lambda_m: 0.1,
            lambda_vol: 0.01,
            lambda_ms: 0.0,
        },
    };
    Ok((scene, params))
}

/// Whether every rendered alpha stays clear of its silhouette value.
fn mask_clear(scene: &DecoderScene, sets: &[PrimitiveSet<f64>]) -> Result<bool> {
    for ((s, c), sil) in sets.iter().zip(&scene.cameras).zip(&scene.silhouettes) {
        let out = render(s, c, &scene.config)?;
        if out.alpha.iter().zip(&sil.data).any(|(a, t)| (a - t).abs() < KINK_MARGIN) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One loss-through-decoder check; `None` when the scene was too close to a kink.
pub fn check_decoder_scene(seed: u64, scale: SceneScale) -> Result<Option<Vec<ClassError>>> {
    let (scene, params) = decoder_scene(seed, scale)?;
    let sets = scene.sets(&params)?;
    for (s, c) in sets.iter().zip(&scene.cameras) {
        if !clear_of_kinks(s, std::slice::from_ref(c), &scene.config, KINK_MARGIN) {
            return Ok(None);
        }
    }
    if !mask_clear(&scene, &sets)? {
        return Ok(None);
    }
    let adjoint = scene.gradient(&params)?;
    let mut out = Vec::new();
    for (ti, name) in DecoderParams::<f64>::TENSOR_NAMES.iter().enumerate() {
        let len = params.tensors()[ti].len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let mut p = params.clone();
            p.tensors_mut()[ti][i] += FD_STEP;
            let mut m = params.clone();
            m.tensors_mut()[ti][i] -= FD_STEP;
            numeric.push((scene.loss(&p)? - scene.loss(&m)?) / (2.0 * FD_STEP));
        }
        merge(&mut out, name, adjoint.tensors()[ti], &numeric);
    }
    Ok(Some(out))
}

/// Runs `scenes` accepted scenes of each suite, drawing seeds from `seed` upward.
pub fn run(scenes: usize, seed: u64, scale: SceneScale) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut render = Vec::new();
    let mut decoder = Vec::new();
    let mut rejected = 0;
    let mut s = seed;
    let mut accepted = 0;
    while accepted < scenes {
        match check_render_scene(s, scale)? {
            Some(classes) => {
                for c in classes {
                    merge_class(&mut render, c);
                }
                accepted += 1;
            }
            None => rejected += 1,
        }
        s += 1;
    }
    let mut s = seed;
    let mut accepted = 0;
    while accepted < scenes {
        match check_decoder_scene(s, scale)? {
            Some(classes) => {
                for c in classes {
                    merge_class(&mut decoder, c);
                }
                accepted += 1;
            }
            None => rejected += 1,
        }
        s += 1;
    }
    Ok(GradcheckReport {
        render,
        decoder,
        scenes,
        rejected,
        elapsed: start.elapsed(),
    })
}

fn merge_class(into: &mut Vec<ClassError>, c: ClassError) {
    match into.iter_mut().find(|x| x.class == c.class) {
        Some(x) if x.relative >= c.relative => {}
        Some(x) => *x = c,
        None => into.push(c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_class_scale() {
        let (r, e, s) = relative_error(&[1.0, 2.0], &[1.0, 2.001]);
        assert!((e - 0.001).abs() < 1e-12);
        assert_eq!(s, 2.001);
        assert!((r - 0.001 / 2.001).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]).0, 0.0);
    }

    #[test]
    fn single_render_scene_passes() {
        let mut seed = 0;
        let classes = loop {
            if let Some(c) = check_render_scene(seed, SceneScale::Micro).unwrap() {
                break c;
            }
            seed += 1;
        };
        for c in classes {
            assert!(c.relative <= RENDER_TOLERANCE, "{c:?}");
        }
    }

    #[test]
    fn single_primitive_single_pixel_at_coarse_step() {
        let mut checked = 0;
        for seed in 0..200 {
            if let Some(classes) = render_case(seed, 1, 1, 1e-4, 5e-3).unwrap() {
                for c in classes {
                    assert!(c.relative <= RENDER_TOLERANCE, "seed {seed}: {c:?}");
                }
                checked += 1;
            }
        }
        assert!(checked >= 20, "{checked}");
    }
}
