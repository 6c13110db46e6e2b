//! Fitting the decoder to a multi-view dataset.
//!
//! Each iteration picks a frame round-robin and a view subset from the curriculum,
//! builds texel-aligned features from the subset, decodes, renders the same views,
//! backpropagates the composite loss to the decoder and takes one Adam step.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accel::UniformGrid;
use crate::atlas::{build_texel_grid, unwrap_view, TexelGrid, UvAccumulation};
use crate::error::{Error, Result};
use crate::features::{
    image_features, pose_channel_count, pose_features, random_orthonormal_projection, view_features, BackwardAccumulator,
    DecoderInit, DecoderParams, DecoderShape, FeatureMaps, DEFAULT_POSE_CHANNELS,
};
use crate::formats::write_decoder;
use crate::lbs::pose_mesh;
use crate::loss::{composite_loss, psnr, LossTerms, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::primitives::{apply_correctives, apply_correctives_backward, init_basis, PrimitiveBasis, PrimitiveSet};
use crate::render::{RenderConfig, RenderGrads, RenderOutput, Renderer};
use crate::scalar::softplus_inv;
use crate::synth::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    /// March step; the scene's own step when absent.
    pub step_size: Option<f64>,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            step_size: None,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    /// Iterations conditioned and supervised on every training view.
    pub dense_phase_iterations: usize,
    pub sparse_view_count: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub render: RenderSettings,
    pub pose_channels: usize,
    /// Motion scale as a fraction of the template's bounding-box diagonal.
    pub motion_scale: f64,
    pub weight_init_std: f64,
    /// Scale of the initial opacity density, which fades toward the box faces.
    pub initial_density: f64,
    pub eval_every: usize,
    /// Zero disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            dense_phase_iterations: 1000,
            sparse_view_count: 3,
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            render: RenderSettings::default(),
            pose_channels: DEFAULT_POSE_CHANNELS,
            motion_scale: 0.05,
            weight_init_std: 0.01,
            initial_density: 1.0,
            eval_every: 100,
            checkpoint_every: 500,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sparse_view_count == 0 {
            return Err(Error::Invalid("sparse_view_count must be at least 1".into()));
        }
        if self.pose_channels == 0 {
            return Err(Error::Invalid("pose_channels must be positive".into()));
        }
        if !(self.initial_density > 0.0) || !(self.motion_scale >= 0.0) || !(self.weight_init_std >= 0.0) {
            return Err(Error::Invalid("initial density, motion scale and init std must be valid".into()));
        }
        if self.render.step_size.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Invalid("step size must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Views to condition on and supervise at `iteration`: all of them during the dense
/// phase, then a sorted random subset of `sparse_view_count` without replacement.
pub fn select_views(iteration: usize, all_views: &[usize], config: &FitConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if iteration < config.dense_phase_iterations || config.sparse_view_count >= all_views.len() {
        return all_views.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, all_views.len(), config.sparse_view_count)
        .into_iter()
        .map(|i| all_views[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Per-frame quantities that do not depend on the decoder.
struct FrameCache {
    basis: Vec<PrimitiveBasis<f64>>,
    pose: Vec<f64>,
    /// Per camera.
    view: Vec<Vec<f64>>,
    /// Per camera, unwrapped target at the texture resolution.
    unwrap: Vec<UvAccumulation<f64>>,
}

/// A dataset prepared for fitting and evaluation.
pub struct FitContext<'a> {
    pub dataset: &'a Dataset,
    pub grid: TexelGrid<f64>,
    pub render_config: RenderConfig<f64>,
    frames: Vec<FrameCache>,
}

impl<'a> FitContext<'a> {
    pub fn new(dataset: &'a Dataset, projection: &DMatrix<f64>, render: &RenderSettings) -> Result<Self> {
        let m = &dataset.manifest;
        let grid = build_texel_grid(&dataset.template, m.texel_resolution)?;
        let unwrap_grid = build_texel_grid(&dataset.template, m.unwrap_resolution)?;
        let mut frames = Vec::with_capacity(m.frames);
        for (f, pose) in dataset.poses.iter().enumerate() {
            let posed = pose_mesh(&dataset.skeleton, pose, &dataset.template)?;
            let basis = init_basis(&dataset.template, &posed, &grid, m.thickness)?;
            let pose_f = pose_features(pose, &dataset.template, &grid, projection)?;
            let view = dataset
                .cameras
                .iter()
                .map(|c| view_features(c, &posed, &dataset.template, &grid))
                .collect();
            let unwrap = dataset
                .cameras
                .iter()
                .zip(&dataset.targets[f])
                .map(|(c, img)| unwrap_view(&posed, &dataset.template, &unwrap_grid, c, img))
                .collect::<Result<Vec<_>>>()?;
            frames.push(FrameCache {
                basis,
                pose: pose_f,
                view,
                unwrap,
            });
        }
        let render_config = RenderConfig::new(
            render.step_size.unwrap_or(m.step_size),
            Vector3::from(render.background),
            1 << 20,
        )?;
        Ok(Self {
            dataset,
            grid,
            render_config,
            frames,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Feature maps of `frame` conditioned on `views`, with the view map of `camera`.
    pub fn features(&self, frame: usize, views: &[usize], camera: usize) -> Result<FeatureMaps<f64>> {
        let fc = &self.frames[frame];
        let r = self.dataset.manifest.unwrap_resolution;
        let mut acc = UvAccumulation::zeros(3, r);
        for &v in views {
            acc.add(&fc.unwrap[v]);
        }
        let image = image_features(&acc.normalize(), self.grid.resolution())?;
        Ok(FeatureMaps {
            resolution: self.grid.resolution(),
            pose: fc.pose.clone(),
            image,
            view: fc.view[camera].clone(),
        })
    }

    /// Decodes `frame` conditioned on `views` and renders `camera`.
    pub fn predict(&self, params: &DecoderParams<f64>, frame: usize, views: &[usize], camera: usize) -> Result<RenderOutput<f64>> {
        let features = self.features(frame, views, camera)?;
        let decoded = params.decode(&features)?;
        let set = apply_correctives(&self.frames[frame].basis, &decoded.correctives, decoded.payload)?;
        Renderer::new(&set, &self.render_config).render(&self.dataset.cameras[camera])
    }

    /// Primitive set decoded for `frame` as seen from `camera`.
    pub fn decode_set(&self, params: &DecoderParams<f64>, frame: usize, views: &[usize], camera: usize) -> Result<PrimitiveSet<f64>> {
        let features = self.features(frame, views, camera)?;
        let decoded = params.decode(&features)?;
        apply_correctives(&self.frames[frame].basis, &decoded.correctives, decoded.payload)
    }

    /// Composite loss of `frame` supervised on `views` (also the conditioning set),
    /// with decoder gradients when `with_grad` is set.
    pub fn loss(
        &self,
        params: &DecoderParams<f64>,
        frame: usize,
        views: &[usize],
        weights: &LossWeights,
        with_grad: bool,
    ) -> Result<StepLoss> {
        let fc = &self.frames[frame];
        let features = self.features(frame, views, views[0])?;
        let shared = params.decode_shared(&features)?;
        let geometry = apply_correctives(&fc.basis, &shared.correctives, shared.payload.clone())?;
        let accel = UniformGrid::build(&geometry);
        let mut pres = Vec::with_capacity(views.len());
        let mut sets = Vec::with_capacity(views.len());
        let mut renders = Vec::with_capacity(views.len());
        for &v in views {
            let pre = params.appearance_pre(&shared, &fc.view[v]);
            let set = geometry.with_payload(shared.payload_with_appearance(&pre));
            let r = Renderer {
                set: &set,
                accel: accel.clone(),
                config: &self.render_config,
            };
            renders.push(r.render(&self.dataset.cameras[v])?);
            pres.push(pre);
            sets.push(set);
        }
        let targets: Vec<_> = views.iter().map(|&v| self.dataset.targets[frame][v].clone()).collect();
        let masks: Vec<_> = views.iter().map(|&v| self.dataset.silhouettes[frame][v].clone()).collect();
        let loss = composite_loss(&renders, &targets, &masks, &geometry, weights)?;
        if !with_grad {
            return Ok(StepLoss {
                total: loss.total,
                terms: loss.terms,
                grads: None,
            });
        }
        let mut acc = BackwardAccumulator::new(params);
        let mut total = RenderGrads::zeros(&geometry);
        for (i, &v) in views.iter().enumerate() {
            let r = Renderer {
                set: &sets[i],
                accel: accel.clone(),
                config: &self.render_config,
            };
            let g = r.backward(&self.dataset.cameras[v], &loss.rgb_grads[i], Some(&loss.alpha_grads[i]))?;
            acc.add_view(params, &pres[i], &fc.view[v], &g.rgb, false);
            total.alpha.iter_mut().zip(&g.alpha).for_each(|(a, b)| *a += *b);
            total.placement.iter_mut().zip(&g.placement).for_each(|(a, b)| a.add(b));
        }
        for (p, s) in total.placement.iter_mut().zip(&loss.scale_grads) {
            p.scale += s;
        }
        let corr_grad = apply_correctives_backward(&fc.basis, &shared.correctives, &total.placement);
        let (grads, _) = acc.finish(params, &shared, &corr_grad, &total.alpha, false)?;
        Ok(StepLoss {
            total: loss.total,
            terms: loss.terms,
            grads: Some(grads),
        })
    }

    /// Mean PSNR over frames and `cameras`, conditioned on every training view.
    pub fn holdout_psnr(&self, params: &DecoderParams<f64>, cameras: &[usize]) -> Result<Vec<(usize, usize, f64)>> {
        let train = self.dataset.manifest.training_cameras();
        let mut rows = Vec::new();
        for f in 0..self.frames.len() {
            for &c in cameras {
                let out = self.predict(params, f, &train, c)?;
                rows.push((f, c, psnr(&out.rgb_image(), &self.dataset.targets[f][c])?));
            }
        }
        Ok(rows)
    }
}

pub struct StepLoss {
    pub total: f64,
    pub terms: LossTerms,
    pub grads: Option<DecoderParams<f64>>,
}

/// Decoder parameters with the optimizer and sampling state that evolve with them.
pub struct FitState {
    pub params: DecoderParams<f64>,
    pub optimizer: Adam<f64>,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl FitState {
    pub fn new(params: DecoderParams<f64>, config: &FitConfig) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            optimizer: Adam::new(config.adam(), &sizes),
            params,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_5e1ec7),
        }
    }

    /// One Adam update with `grads` shaped like the parameters.
    pub fn adam_step(&mut self, grads: &DecoderParams<f64>) -> Result<()> {
        let g = grads.tensors();
        let mut p = self.params.tensors_mut();
        self.optimizer.step(&mut p, &g)?;
        self.iteration += 1;
        Ok(())
    }
}

/// Freshly initialized decoder for a dataset.
pub fn init_decoder(dataset: &Dataset, config: &FitConfig) -> Result<DecoderParams<f64>> {
    let grid = build_texel_grid(&dataset.template, dataset.manifest.texel_resolution)?;
    let proj = random_orthonormal_projection(
        config.pose_channels,
        pose_channel_count(dataset.skeleton.joint_count()),
        config.seed,
    );
    let diag = dataset.template.rest_posed()?.diagonal();
    let shape = DecoderShape {
        pose_channels: config.pose_channels,
        image_channels: 3,
        voxels: dataset.manifest.voxels,
        resolution: dataset.manifest.texel_resolution,
    };
    let s = shape.voxels;
    let mut params = DecoderParams::init(
        shape,
        grid.valid_texels(),
        config.motion_scale * diag,
        proj,
        &DecoderInit {
            weight_std: config.weight_init_std,
            opacity_bias: softplus_inv(config.initial_density),
            appearance_bias: 0.0,
            seed: config.seed,
        },
    );
    let fade: Vec<f64> = (0..s).map(|i| (PI * (i as f64 + 0.5) / s as f64).sin().powi(2)).collect();
    let v3 = s * s * s;
    for (i, b) in params.opacity_bias.iter_mut().enumerate() {
        let v = i % v3;
        let density = config.initial_density * fade[v % s] * fade[v / s % s] * fade[v / (s * s)];
        *b = softplus_inv(density.max(1e-6));
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub frame: usize,
    pub views: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub psnr_holdout: Option<f64>,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "iteration,frame,views,loss_rgb,loss_m,loss_vol,loss_ms,total,psnr_holdout,wall_ms";

impl MetricRow {
    /// CSV line; `with_time` false drops the wall clock (for comparisons across runs).
    pub fn csv(&self, with_time: bool) -> String {
        let mut s = format!(
            "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},",
            self.iteration, self.frame, self.views, self.terms.rgb, self.terms.mask, self.terms.vol, self.terms.ms, self.total
        );
        if let Some(p) = self.psnr_holdout {
            write!(s, "{p:.6}").expect("string write");
        }
        if with_time {
            write!(s, ",{:.3}", self.wall_ms).expect("string write");
        } else {
            s.push(',');
        }
        s
    }
}

pub fn metrics_csv(rows: &[MetricRow], with_time: bool) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv(with_time));
        s.push('\n');
    }
    s
}

pub struct FitResult {
    pub params: DecoderParams<f64>,
    pub metrics: Vec<MetricRow>,
}

/// Runs the full loop. With `out`, writes `metrics.csv` (wall clock left blank so reruns
/// compare equal), periodic checkpoints and the final `params.bin`; a non-finite loss
/// also leaves `diagnostic.json` there.
pub fn fit(dataset: &Dataset, config: &FitConfig, out: Option<&Path>) -> Result<FitResult> {
    config.validate()?;
    let params = init_decoder(dataset, config)?;
    fit_from(dataset, config, params, out)
}

pub fn fit_from(dataset: &Dataset, config: &FitConfig, params: DecoderParams<f64>, out: Option<&Path>) -> Result<FitResult> {
    config.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ctx = FitContext::new(dataset, &params.pose_projection, &config.render)?;
    let train = dataset.manifest.training_cameras();
    if train.is_empty() {
        return Err(Error::Invalid("dataset has no training cameras".into()));
    }
    let holdout = dataset.manifest.holdout_cameras.clone();
    let mut state = FitState::new(params, config);
    let mut metrics = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    for it in 0..config.iterations {
        let frame = it % ctx.frame_count();
        let views = select_views(it, &train, config, &mut state.rng);
        let step = ctx.loss(&state.params, frame, &views, &config.loss_weights, true)?;
        let grads = step.grads.as_ref().expect("requested gradients");
        let finite = step.total.is_finite() && grads.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()));
        if !finite {
            let detail = format!(
                "frame {frame}, views {views:?}, terms rgb={} mask={} vol={} ms={}, total={}",
                step.terms.rgb, step.terms.mask, step.terms.vol, step.terms.ms, step.total
            );
            if let Some(dir) = out {
                let dump = serde_json::json!({
                    "iteration": it,
                    "frame": frame,
                    "views": views,
                    "loss_rgb": step.terms.rgb,
                    "loss_m": step.terms.mask,
                    "loss_vol": step.terms.vol,
                    "loss_ms": step.terms.ms,
                    "total": step.total,
                });
                crate::formats::write_json(&dir.join("diagnostic.json"), &dump)?;
                write_decoder(&dir.join("diagnostic_params.bin"), &state.params)?;
            }
            return Err(Error::NonFiniteLoss { iteration: it, detail });
        }
        state.adam_step(grads)?;
        let last = it + 1 == config.iterations;
        let psnr_holdout = if !holdout.is_empty() && config.eval_every > 0 && ((it + 1) % config.eval_every == 0 || last) {
            let rows = ctx.holdout_psnr(&state.params, &holdout)?;
            Some(rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64)
        } else {
            None
        };
        metrics.push(MetricRow {
            iteration: it,
            frame,
            views: views.len(),
            terms: step.terms,
            total: step.total,
            psnr_holdout,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 && !last {
                write_decoder(&dir.join(format!("checkpoint_{:06}.bin", it + 1)), &state.params)?;
            }
        }
    }
    if let Some(dir) = out {
        write_decoder(&dir.join("params.bin"), &state.params)?;
        let path = dir.join("metrics.csv");
        fs::write(&path, metrics_csv(&metrics, false)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(FitResult {
        params: state.params,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_boundary() {
        let cfg = FitConfig::default();
        let views: Vec<usize> = (0..7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_views(0, &views, &cfg, &mut rng), views);
        assert_eq!(select_views(999, &views, &cfg, &mut rng), views);
        let s = select_views(1000, &views, &cfg, &mut rng);
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_parses_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, "iterations = 10\ndense_phase_iterations = 5\n[loss_weights]\nlambda_vol = 0.0\n").unwrap();
        let c = FitConfig::load(&t).unwrap();
        assert_eq!((c.iterations, c.dense_phase_iterations), (10, 5));
        assert_eq!(c.loss_weights.lambda_vol, 0.0);
        assert_eq!(c.loss_weights.lambda_rgb, 1.0);
        let j = dir.path().join("c.json");
        fs::write(&j, r#"{"iterations": 3, "sparse_view_count": 0}"#).unwrap();
        assert!(matches!(FitConfig::load(&j), Err(Error::Invalid(_))));
        fs::write(&j, r#"{"iterations": 3, "learning_rte": 0.1}"#).unwrap();
        assert!(matches!(FitConfig::load(&j), Err(Error::Format { .. })));
    }
}
