//! Procedural scenes with known ground truth, and the dataset layout on disk.
//!
//! ```text
//! scene.json  mesh.obj  skeleton.json
//! poses/frame_%04d.json   cameras/cam_%02d.json
//! gt/params.bin (+ .json)   gt/primitives_f%04d.bin (+ .json)
//! targets/f%04d_c%02d.{pfm,png}   masks/f%04d_c%02d.pfm
//! ```

pub mod oracle;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{build_texel_grid, TexelGrid};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::features::{pose_channel_count, random_orthonormal_projection, DecoderParams, DecoderShape, DEFAULT_POSE_CHANNELS};
use crate::formats::{pose_to_json, read_camera, read_json, read_pose, read_rig, write_decoder, write_json, write_primitives, write_rig};
use crate::imaging::{read_pfm, write_pfm, write_png, Image};
use crate::lbs::{pose_mesh, Pose, RigidTransform, Skeleton, TemplateMesh};
use crate::primitives::{apply_correctives, init_basis, Correctives, Payloads, PrimitiveSet};
use crate::render::RenderConfig;
use crate::scalar::{logit, softplus_inv};

pub use oracle::{OracleRenderer, MIN_ORACLE_SAMPLES};

pub const PRESETS: [&str; 2] = ["quad", "limb"];

/// Floor of the ground-truth opacity, so it stays representable through softplus.
const ALPHA_FLOOR: f64 = 1e-6;

/// Everything needed to regenerate or reload a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub preset: String,
    pub seed: u64,
    pub frames: usize,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    pub texel_resolution: usize,
    pub voxels: usize,
    pub unwrap_resolution: usize,
    pub thickness: f64,
    /// Engine step used for ground truth renders and fitting.
    pub step_size: f64,
    pub oracle_samples: usize,
    pub background: [f64; 3],
    pub holdout_cameras: Vec<usize>,
    pub density: f64,
}

impl SceneManifest {
    pub fn training_cameras(&self) -> Vec<usize> {
        (0..self.cameras).filter(|c| !self.holdout_cameras.contains(c)).collect()
    }

    pub fn render_config(&self) -> RenderConfig<f64> {
        RenderConfig {
            step_size: self.step_size,
            background: Vector3::from(self.background),
            max_steps: 1 << 20,
        }
    }
}

struct Preset {
    texel_resolution: usize,
    voxels: usize,
    unwrap_resolution: usize,
    frames: usize,
    cameras: usize,
    size: usize,
    camera_distance: f64,
    fov_y: f64,
    density: f64,
}

fn preset(name: &str) -> Result<Preset> {
    match name {
        "quad" => Ok(Preset {
            texel_resolution: 4,
            voxels: 4,
            unwrap_resolution: 16,
            frames: 3,
            cameras: 8,
            size: 32,
            camera_distance: 3.0,
            fov_y: 0.8,
            density: 16.0,
        }),
        "limb" => Ok(Preset {
            texel_resolution: 8,
            voxels: 8,
            unwrap_resolution: 64,
            frames: 5,
            cameras: 8,
            size: 64,
            camera_distance: 4.0,
            fov_y: 0.8,
            density: 16.0,
        }),
        other => Err(Error::UnknownPreset(other.to_string(), PRESETS.join(", "))),
    }
}

/// Unit square in the `z = 0` plane, one joint.
pub fn quad_rig() -> (TemplateMesh<f64>, Skeleton<f64>) {
    let template = TemplateMesh::new(
        vec![
            Vector3::new(-0.5, -0.5, 0.0),
            Vector3::new(0.5, -0.5, 0.0),
            Vector3::new(0.5, 0.5, 0.0),
            Vector3::new(-0.5, 0.5, 0.0),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
        vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(0.0, 1.0),
        ],
        vec![vec![(0, 1.0)]; 4],
    )
    .expect("valid quad");
    let skel = Skeleton::new(vec![None], vec![RigidTransform::identity()]).expect("valid skeleton");
    (template, skel)
}

/// Open cylinder of radius 0.5 along `y` in `[-1, 1]`, root at the bottom and a second
/// joint at the middle; weights blend over `|y| < 0.25`. `u` runs around, `v` along.
pub fn limb_rig(around: usize, along: usize) -> (TemplateMesh<f64>, Skeleton<f64>) {
    let radius = 0.5;
    let mut verts = Vec::new();
    let mut uv = Vec::new();
    let mut weights = Vec::new();
    for j in 0..=along {
        let v = j as f64 / along as f64;
        let y = -1.0 + 2.0 * v;
        let s = ((y + 0.25) / 0.5).clamp(0.0, 1.0);
        let w1 = s * s * (3.0 - 2.0 * s);
        for i in 0..=around {
            let u = i as f64 / around as f64;
            let phi = 2.0 * PI * u;
            verts.push(Vector3::new(radius * phi.cos(), y, -radius * phi.sin()));
            uv.push(Vector2::new(u, v));
            weights.push(if w1 <= 0.0 {
                vec![(0, 1.0)]
            } else if w1 >= 1.0 {
                vec![(1, 1.0)]
            } else {
                vec![(0, 1.0 - w1), (1, w1)]
            });
        }
    }
    let row = around + 1;
    let mut tris = Vec::new();
    for j in 0..along {
        for i in 0..around {
            let a = j * row + i;
            let b = a + 1;
            let c = a + row + 1;
            let d = a + row;
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    let template = TemplateMesh::new(verts, tris, uv, weights).expect("valid limb");
    let skel = Skeleton::new(
        vec![None, Some(0)],
        vec![
            RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, -1.0, 0.0)),
            RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 1.0, 0.0)),
        ],
    )
    .expect("valid skeleton");
    (template, skel)
}

fn poses(name: &str, frames: usize) -> Vec<Pose<f64>> {
    (0..frames)
        .map(|f| {
            let s = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.0 };
            match name {
                "quad" => Pose::from_unit_quaternions(
                    vec![UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.3 * s)],
                    Vector3::zeros(),
                ),
                _ => Pose::from_unit_quaternions(
                    vec![
                        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.2 * s),
                        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI / 3.0 * s),
                    ],
                    Vector3::zeros(),
                ),
            }
        })
        .collect()
}

/// Ring of cameras around the origin, slightly above the equator, looking at it.
pub fn camera_ring(count: usize, distance: f64, fov_y: f64, size: usize) -> Result<Vec<Camera<f64>>> {
    (0..count)
        .map(|c| {
            let phi = 2.0 * PI * c as f64 / count as f64;
            let eye = Vector3::new(distance * phi.sin(), 0.3 * distance, distance * phi.cos());
            Camera::look_at(eye, Vector3::zeros(), Vector3::y(), fov_y, size, size)
        })
        .collect()
}

/// Ground-truth payloads: opacity vanishing on the outer voxel layer, smooth color bands.
fn gt_payload(grid: &TexelGrid<f64>, voxels: usize, density: f64, seed: u64) -> Payloads<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1..=2) as f64,
                rng.random_range(1..=2) as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let texels = grid.valid_texels();
    let s = voxels;
    let n = s * s * s;
    let mut p = Payloads::zeros(texels.len(), s);
    let profile = |i: usize| {
        if s <= 2 {
            1.0
        } else {
            (PI * i as f64 / (s - 1) as f64).sin().powi(2)
        }
    };
    for (k, &t) in texels.iter().enumerate() {
        let c = grid.texel_center(t);
        for z in 0..s {
            let lz = -1.0 + (2 * z + 1) as f64 / s as f64;
            for y in 0..s {
                for x in 0..s {
                    let v = (z * s + y) * s + x;
                    p.alpha[k * n + v] = (density * profile(x) * profile(y) * profile(z)).max(ALPHA_FLOOR);
                    for (ch, (fu, fv, ph)) in freq.iter().enumerate() {
                        let arg = 2.0 * PI * (fu * c.x + fv * c.y) + ph + 0.6 * lz;
                        p.rgb[k * 3 * n + ch * n + v] = 0.5 + 0.35 * arg.sin();
                    }
                }
            }
        }
    }
    p
}

/// A generated scene held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub manifest: SceneManifest,
    pub template: TemplateMesh<f64>,
    pub skeleton: Skeleton<f64>,
    pub poses: Vec<Pose<f64>>,
    pub cameras: Vec<Camera<f64>>,
    pub grid: TexelGrid<f64>,
    pub gt_payload: Payloads<f64>,
}

/// Builds a preset scene without touching the disk.
pub fn build_scene(name: &str, seed: u64) -> Result<SyntheticScene> {
    let p = preset(name)?;
    let (template, skeleton) = match name {
        "quad" => quad_rig(),
        _ => limb_rig(16, 16),
    };
    let grid = build_texel_grid(&template, p.texel_resolution)?;
    let gt_payload = gt_payload(&grid, p.voxels, p.density, seed);
    let mut manifest = SceneManifest {
        preset: name.to_string(),
        seed,
        frames: p.frames,
        cameras: p.cameras,
        width: p.size,
        height: p.size,
        texel_resolution: p.texel_resolution,
        voxels: p.voxels,
        unwrap_resolution: p.unwrap_resolution,
        thickness: 1.0,
        step_size: 0.0,
        oracle_samples: 2048,
        background: [0.0; 3],
        holdout_cameras: vec![p.cameras - 1],
        density: p.density,
    };
    let scene = SyntheticScene {
        poses: poses(name, p.frames),
        cameras: camera_ring(p.cameras, p.camera_distance, p.fov_y, p.size)?,
        template,
        skeleton,
        grid,
        gt_payload,
        manifest: manifest.clone(),
    };
    let set = scene.frame_set(0)?;
    manifest.step_size = set.median_half_extent().unwrap_or(1.0) * 0.125;
    Ok(SyntheticScene { manifest, ..scene })
}

impl SyntheticScene {
    /// Ground-truth primitives of `frame`: basis placement, zero correctives.
    pub fn frame_set(&self, frame: usize) -> Result<PrimitiveSet<f64>> {
        frame_set(&self.template, &self.skeleton, &self.grid, &self.poses[frame], &self.manifest, self.gt_payload.clone())
    }

    /// Decoder that ignores its inputs and reproduces the ground truth through its biases.
    pub fn gt_decoder(&self) -> DecoderParams<f64> {
        let shape = DecoderShape {
            pose_channels: DEFAULT_POSE_CHANNELS,
            image_channels: 3,
            voxels: self.manifest.voxels,
            resolution: self.manifest.texel_resolution,
        };
        let proj = random_orthonormal_projection(
            DEFAULT_POSE_CHANNELS,
            pose_channel_count(self.skeleton.joint_count()),
            self.manifest.seed,
        );
        let diag = self.template.rest_posed().map_or(1.0, |m| m.diagonal());
        let mut p = DecoderParams::zeros(shape, self.grid.valid_texels(), 0.05 * diag, proj);
        p.opacity_bias = self.gt_payload.alpha.iter().map(|a| softplus_inv(*a)).collect();
        p.appearance_bias = self.gt_payload.rgb.iter().map(|c| logit(*c)).collect();
        p
    }

    pub fn oracle(&self) -> OracleRenderer {
        OracleRenderer {
            sample_count: self.manifest.oracle_samples,
            background: Vector3::from(self.manifest.background),
        }
    }
}

fn frame_set(
    template: &TemplateMesh<f64>,
    skeleton: &Skeleton<f64>,
    grid: &TexelGrid<f64>,
    pose: &Pose<f64>,
    manifest: &SceneManifest,
    payload: Payloads<f64>,
) -> Result<PrimitiveSet<f64>> {
    let posed = pose_mesh(skeleton, pose, template)?;
    let basis = init_basis(template, &posed, grid, manifest.thickness)?;
    let zero = vec![Correctives::default(); basis.len()];
    apply_correctives(&basis, &zero, payload)
}

/// Paths inside a scene directory.
#[derive(Clone, Debug)]
pub struct SceneLayout {
    pub root: PathBuf,
}

impl SceneLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("scene.json")
    }
    pub fn mesh(&self) -> PathBuf {
        self.root.join("mesh.obj")
    }
    pub fn skeleton(&self) -> PathBuf {
        self.root.join("skeleton.json")
    }
    pub fn pose(&self, frame: usize) -> PathBuf {
        self.root.join(format!("poses/frame_{frame:04}.json"))
    }
    pub fn camera(&self, cam: usize) -> PathBuf {
        self.root.join(format!("cameras/cam_{cam:02}.json"))
    }
    pub fn gt_params(&self) -> PathBuf {
        self.root.join("gt/params.bin")
    }
    pub fn gt_primitives(&self, frame: usize) -> PathBuf {
        self.root.join(format!("gt/primitives_f{frame:04}.bin"))
    }
    pub fn target(&self, frame: usize, cam: usize, ext: &str) -> PathBuf {
        self.root.join(format!("targets/f{frame:04}_c{cam:02}.{ext}"))
    }
    pub fn mask(&self, frame: usize, cam: usize) -> PathBuf {
        self.root.join(format!("masks/f{frame:04}_c{cam:02}.pfm"))
    }
}

/// Generates a preset and writes the full dataset under `out`.
pub fn gen_scene(name: &str, seed: u64, out: &Path) -> Result<SyntheticScene> {
    let scene = build_scene(name, seed)?;
    let layout = SceneLayout::new(out);
    for d in ["poses", "cameras", "gt", "targets", "masks"] {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&layout.manifest(), &scene.manifest)?;
    write_rig(&layout.mesh(), &layout.skeleton(), &scene.template, &scene.skeleton)?;
    for (f, pose) in scene.poses.iter().enumerate() {
        write_json(&layout.pose(f), &pose_to_json(pose))?;
    }
    for (c, cam) in scene.cameras.iter().enumerate() {
        write_json(&layout.camera(c), &cam.to_json())?;
    }
    write_decoder(&layout.gt_params(), &scene.gt_decoder())?;
    let sets = (0..scene.manifest.frames)
        .map(|f| scene.frame_set(f))
        .collect::<Result<Vec<_>>>()?;
    for (f, set) in sets.iter().enumerate() {
        write_primitives(&layout.gt_primitives(f), set, scene.manifest.texel_resolution)?;
    }
    let oracle = scene.oracle();
    let jobs: Vec<(usize, usize)> = (0..scene.manifest.frames)
        .flat_map(|f| (0..scene.manifest.cameras).map(move |c| (f, c)))
        .collect();
    jobs.par_iter()
        .map(|&(f, c)| {
            let out = oracle.render(&sets[f], &scene.cameras[c]);
            let rgb = out.rgb_image();
            let mask = out.alpha_image().map_values(|a| if a > 0.5 { 1.0 } else { 0.0 });
            write_pfm(&layout.target(f, c, "pfm"), &rgb)?;
            write_png(&layout.target(f, c, "png"), &rgb)?;
            write_pfm(&layout.mask(f, c), &mask)
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(scene)
}

/// A scene directory loaded back into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub template: TemplateMesh<f64>,
    pub skeleton: Skeleton<f64>,
    pub poses: Vec<Pose<f64>>,
    pub cameras: Vec<Camera<f64>>,
    /// `[frame][camera]`.
    pub targets: Vec<Vec<Image<f64>>>,
    pub silhouettes: Vec<Vec<Image<f64>>>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let layout = SceneLayout::new(root);
        let manifest: SceneManifest = read_json(&layout.manifest())?;
        let (template, skeleton) = read_rig(&layout.mesh(), &layout.skeleton())?;
        let poses = (0..manifest.frames)
            .map(|f| read_pose(&layout.pose(f)))
            .collect::<Result<Vec<_>>>()?;
        let cameras: Vec<Camera<f64>> = (0..manifest.cameras)
            .map(|c| read_camera(&layout.camera(c)))
            .collect::<Result<Vec<_>>>()?;
        let load = |path: PathBuf, channels: usize, cam: &Camera<f64>| -> Result<Image<f64>> {
            let img = read_pfm(&path)?;
            if img.channels != channels || img.width != cam.width || img.height != cam.height {
                return Err(Error::format(&path, "image does not match its camera"));
            }
            Ok(img.map())
        };
        let mut targets = Vec::with_capacity(manifest.frames);
        let mut silhouettes = Vec::with_capacity(manifest.frames);
        for f in 0..manifest.frames {
            let mut t = Vec::new();
            let mut s = Vec::new();
            for (c, cam) in cameras.iter().enumerate() {
                t.push(load(layout.target(f, c, "pfm"), 3, cam)?);
                s.push(load(layout.mask(f, c), 1, cam)?);
            }
            targets.push(t);
            silhouettes.push(s);
        }
        if poses.iter().any(|p| p.joint_count() != skeleton.joint_count()) {
            return Err(Error::format(layout.root.clone(), "pose joint count differs from skeleton"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            template,
            skeleton,
            poses,
            cameras,
            targets,
            silhouettes,
        })
    }

    pub fn layout(&self) -> SceneLayout {
        SceneLayout::new(&self.root)
    }

    pub fn grid(&self) -> Result<TexelGrid<f64>> {
        build_texel_grid(&self.template, self.manifest.texel_resolution)
    }

    /// Primitives of `frame` placed on the basis with zero correctives.
    pub fn basis_set(&self, frame: usize, payload: Payloads<f64>) -> Result<PrimitiveSet<f64>> {
        frame_set(&self.template, &self.skeleton, &self.grid()?, &self.poses[frame], &self.manifest, payload)
    }
}
