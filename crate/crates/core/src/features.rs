//! Texel-aligned conditioning and the per-texel affine decoder.
//!
//! Feature maps are planar `C x W x W` arrays in texel order. The decoder has three
//! branches with weights shared across texels and one bias vector per valid texel:
//! motion and opacity read `(pose, image)` features, appearance additionally reads
//! the view feature.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::atlas::{warp_to_uv, TexelGrid, UvImage};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::lbs::{Pose, PosedMesh, TemplateMesh};
use crate::primitives::{Correctives, Payloads};
use crate::scalar::{sigmoid, softplus, Real};

/// Default number of projected pose channels.
pub const DEFAULT_POSE_CHANNELS: usize = 16;
/// Largest corrective rotation angle.
pub const MAX_CORRECTIVE_ANGLE: f64 = std::f64::consts::PI - 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps<T> {
    pub resolution: usize,
    pub pose: Vec<T>,
    pub image: Vec<T>,
    pub view: Vec<T>,
}

impl<T: Real> FeatureMaps<T> {
    pub fn pose_channels(&self) -> usize {
        self.pose.len() / (self.resolution * self.resolution)
    }

    pub fn image_channels(&self) -> usize {
        self.image.len() / (self.resolution * self.resolution)
    }

    pub fn zeros(resolution: usize, pose_channels: usize, image_channels: usize) -> Self {
        let n = resolution * resolution;
        Self {
            resolution,
            pose: vec![T::zero(); pose_channels * n],
            image: vec![T::zero(); image_channels * n],
            view: vec![T::zero(); n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.resolution * self.resolution;
        if n == 0 || !self.pose.len().is_multiple_of(n) || !self.image.len().is_multiple_of(n) || self.view.len() != n {
            return Err(Error::Shape("feature maps do not match the texel grid".into()));
        }
        if self.pose.iter().chain(&self.image).chain(&self.view).any(|x| !x.finite()) {
            return Err(Error::Invalid("feature maps must be finite".into()));
        }
        Ok(())
    }
}

/// Pose channels before projection: a quaternion per joint plus the root translation.
pub fn pose_channel_count(joints: usize) -> usize {
    4 * joints + 3
}

/// Seeded random matrix with orthonormal columns (or rows, when wider than tall).
pub fn random_orthonormal_projection<T: Real>(out_channels: usize, in_channels: usize, seed: u64) -> DMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tall = out_channels >= in_channels;
    let (r, c) = if tall { (out_channels, in_channels) } else { (in_channels, out_channels) };
    let m = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let q = m.qr().q();
    let q = if tall { q } else { q.transpose() };
    q.map(T::lit)
}

/// Skinning-weight-masked pose vector of every valid texel, projected to `proj.nrows()` channels.
///
/// Joint 0 is the root, so the translation is masked by the root weight.
pub fn pose_features<T: Real>(
    pose: &Pose<T>,
    template: &TemplateMesh<T>,
    grid: &TexelGrid<T>,
    proj: &DMatrix<T>,
) -> Result<Vec<T>> {
    let joints = pose.joint_count();
    let p = pose_channel_count(joints);
    if proj.ncols() != p {
        return Err(Error::Shape(format!(
            "projection takes {} channels, pose has {p}",
            proj.ncols()
        )));
    }
    let n = grid.len();
    let c_out = proj.nrows();
    let mut out = vec![T::zero(); c_out * n];
    let mut masked = vec![T::zero(); p];
    for t in grid.valid_texels() {
        let e = grid.entry(t).expect("valid texel");
        masked.iter_mut().for_each(|m| *m = T::zero());
        let mut weight = vec![T::zero(); joints];
        for (b, &vi) in template.triangles[e.triangle].iter().enumerate() {
            for &(j, w) in &template.skin_weights[vi] {
                weight[j] += e.barycentric[b] * w;
            }
        }
        for (j, &w) in weight.iter().enumerate() {
            let q = pose.quaternion(j);
            for k in 0..4 {
                masked[4 * j + k] = q[k] * w;
            }
        }
        for k in 0..3 {
            masked[4 * joints + k] = pose.root_translation[k] * weight[0];
        }
        for c in 0..c_out {
            let mut acc = T::zero();
            for (i, m) in masked.iter().enumerate() {
                acc += proj[(c, i)] * *m;
            }
            out[c * n + t] = acc;
        }
    }
    Ok(out)
}

/// Weighted box-downsampling of an unwrapped texture to `W x W`.
pub fn image_features<T: Real>(texture: &UvImage<T>, resolution: usize) -> Result<Vec<T>> {
    let r = texture.resolution;
    if resolution == 0 || r < resolution || !r.is_multiple_of(resolution) {
        return Err(Error::Shape(format!(
            "texture resolution {r} is not a multiple of {resolution}"
        )));
    }
    let f = r / resolution;
    let n_in = r * r;
    let n_out = resolution * resolution;
    let mut out = vec![T::zero(); texture.channels * n_out];
    for j in 0..resolution {
        for i in 0..resolution {
            let mut wsum = T::zero();
            let mut acc = vec![T::zero(); texture.channels];
            for b in 0..f {
                for a in 0..f {
                    let src = (j * f + b) * r + i * f + a;
                    let w = texture.weight[src];
                    wsum += w;
                    for (c, v) in acc.iter_mut().enumerate() {
                        *v += texture.data[c * n_in + src] * w;
                    }
                }
            }
            if wsum > T::zero() {
                for (c, v) in acc.into_iter().enumerate() {
                    out[c * n_out + j * resolution + i] = v / wsum;
                }
            }
        }
    }
    Ok(out)
}

/// Per-triangle `v . n` with `v` the unit direction from the centroid to the camera, warped to UV.
pub fn view_features<T: Real>(
    camera: &Camera<T>,
    posed: &PosedMesh<T>,
    template: &TemplateMesh<T>,
    grid: &TexelGrid<T>,
) -> Vec<T> {
    let eye = camera.center();
    let per_tri: Vec<T> = template
        .triangles
        .iter()
        .zip(&posed.triangle_normals)
        .map(|(tri, n)| {
            let d = eye - posed.centroid(tri);
            let len = d.norm();
            if len <= T::lit(1e-12) {
                T::zero()
            } else {
                (d / len).dot(n)
            }
        })
        .collect();
    warp_to_uv(&per_tri, grid)
}

/// Shapes and hyperparameters of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderShape {
    pub pose_channels: usize,
    pub image_channels: usize,
    pub voxels: usize,
    pub resolution: usize,
}

impl DecoderShape {
    /// Inputs of the motion and opacity branches.
    pub fn inputs(&self) -> usize {
        self.pose_channels + self.image_channels
    }

    pub fn voxels3(&self) -> usize {
        self.voxels * self.voxels * self.voxels
    }
}

/// Weights are row-major `[out][in]`; biases are `[texel][out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T: Real> {
    pub shape: DecoderShape,
    /// Valid texel indices; one bias row per entry.
    pub texels: Vec<usize>,
    /// Multiplier applied to the nine motion outputs.
    pub motion_scale: T,
    /// Fixed pose projection (`pose_channels x pose_channel_count(J)`).
    pub pose_projection: DMatrix<T>,
    pub motion_weight: Vec<T>,
    pub motion_bias: Vec<T>,
    pub opacity_weight: Vec<T>,
    pub opacity_bias: Vec<T>,
    pub appearance_weight: Vec<T>,
    pub appearance_bias: Vec<T>,
}

/// Initialization choices for [`DecoderParams::init`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInit {
    pub weight_std: f64,
    pub opacity_bias: f64,
    pub appearance_bias: f64,
    pub seed: u64,
}

impl Default for DecoderInit {
    fn default() -> Self {
        Self {
            weight_std: 0.01,
            opacity_bias: 0.0,
            appearance_bias: 0.0,
            seed: 0,
        }
    }
}

impl<T: Real> DecoderParams<T> {
    pub fn zeros(shape: DecoderShape, texels: Vec<usize>, motion_scale: T, pose_projection: DMatrix<T>) -> Self {
        let k = texels.len();
        let cin = shape.inputs();
        let v3 = shape.voxels3();
        Self {
            motion_weight: vec![T::zero(); 9 * cin],
            motion_bias: vec![T::zero(); 9 * k],
            opacity_weight: vec![T::zero(); v3 * cin],
            opacity_bias: vec![T::zero(); v3 * k],
            appearance_weight: vec![T::zero(); 3 * v3 * (cin + 1)],
            appearance_bias: vec![T::zero(); 3 * v3 * k],
            shape,
            texels,
            motion_scale,
            pose_projection,
        }
    }

    /// Gaussian weights, constant biases.
    pub fn init(
        shape: DecoderShape,
        texels: Vec<usize>,
        motion_scale: T,
        pose_projection: DMatrix<T>,
        init: &DecoderInit,
    ) -> Self {
        let mut p = Self::zeros(shape, texels, motion_scale, pose_projection);
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let normal = Normal::new(0.0, init.weight_std.max(0.0)).expect("valid std");
        for w in p
            .motion_weight
            .iter_mut()
            .chain(p.opacity_weight.iter_mut())
            .chain(p.appearance_weight.iter_mut())
        {
            *w = T::lit(normal.sample(&mut rng));
        }
        p.opacity_bias.iter_mut().for_each(|b| *b = T::lit(init.opacity_bias));
        p.appearance_bias.iter_mut().for_each(|b| *b = T::lit(init.appearance_bias));
        p
    }

    /// Trainable tensors in serialization order.
    pub fn tensors(&self) -> [&[T]; 6] {
        [
            &self.motion_weight,
            &self.motion_bias,
            &self.opacity_weight,
            &self.opacity_bias,
            &self.appearance_weight,
            &self.appearance_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.motion_weight,
            &mut self.motion_bias,
            &mut self.opacity_weight,
            &mut self.opacity_bias,
            &mut self.appearance_weight,
            &mut self.appearance_bias,
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 6] = [
        "motion_weight",
        "motion_bias",
        "opacity_weight",
        "opacity_bias",
        "appearance_weight",
        "appearance_bias",
    ];

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same shapes, all trainable entries zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.shape.clone(),
            self.texels.clone(),
            self.motion_scale,
            self.pose_projection.clone(),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let z = Self::zeros_like(self);
        for (a, b) in self.tensors().iter().zip(z.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Shape("decoder tensor sizes do not match the shape".into()));
            }
            if a.iter().any(|x| !x.finite()) {
                return Err(Error::Invalid("decoder parameters must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> DecoderParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        DecoderParams {
            shape: self.shape.clone(),
            texels: self.texels.clone(),
            motion_scale: U::lit(self.motion_scale.as_f64()),
            pose_projection: self.pose_projection.map(|x| U::lit(x.as_f64())),
            motion_weight: c(&self.motion_weight),
            motion_bias: c(&self.motion_bias),
            opacity_weight: c(&self.opacity_weight),
            opacity_bias: c(&self.opacity_bias),
            appearance_weight: c(&self.appearance_weight),
            appearance_bias: c(&self.appearance_bias),
        }
    }

    fn check_features(&self, f: &FeatureMaps<T>) -> Result<()> {
        f.validate()?;
        if f.resolution != self.shape.resolution
            || f.pose_channels() != self.shape.pose_channels
            || f.image_channels() != self.shape.image_channels
        {
            return Err(Error::Shape(format!(
                "features ({} res, {}+{} ch) do not match decoder ({} res, {}+{} ch)",
                f.resolution,
                f.pose_channels(),
                f.image_channels(),
                self.shape.resolution,
                self.shape.pose_channels,
                self.shape.image_channels
            )));
        }
        if self.texels.iter().any(|&t| t >= f.resolution * f.resolution) {
            return Err(Error::Shape("decoder texel index outside the grid".into()));
        }
        Ok(())
    }

    /// Branches that do not depend on the view: correctives, opacity, appearance minus the view term.
    pub fn decode_shared(&self, features: &FeatureMaps<T>) -> Result<SharedDecode<T>> {
        self.check_features(features)?;
        let k = self.texels.len();
        let cin = self.shape.inputs();
        let v3 = self.shape.voxels3();
        let n = features.resolution * features.resolution;
        let cp = self.shape.pose_channels;
        let mut inputs = vec![T::zero(); k * cin];
        for (row, &t) in self.texels.iter().enumerate() {
            let x = &mut inputs[row * cin..(row + 1) * cin];
            for c in 0..cp {
                x[c] = features.pose[c * n + t];
            }
            for c in 0..self.shape.image_channels {
                x[cp + c] = features.image[c * n + t];
            }
        }
        let motion_raw = affine(&self.motion_weight, cin, 0, &self.motion_bias, 9, &inputs, cin, k);
        let opacity_pre = affine(&self.opacity_weight, cin, 0, &self.opacity_bias, v3, &inputs, cin, k);
        let appearance_base = affine(&self.appearance_weight, cin + 1, 0, &self.appearance_bias, 3 * v3, &inputs, cin, k);
        let correctives = motion_raw
            .chunks_exact(9)
            .map(|m| {
                let s = self.motion_scale;
                let mut c = Correctives::from_slice(&m.iter().map(|v| *v * s).collect::<Vec<_>>());
                c.delta_rotation = clamp_angle(&c.delta_rotation);
                c
            })
            .collect();
        let mut payload = Payloads::zeros(k, self.shape.voxels);
        for (a, p) in payload.alpha.iter_mut().zip(&opacity_pre) {
            *a = softplus(*p);
        }
        Ok(SharedDecode {
            inputs,
            motion_raw,
            opacity_pre,
            appearance_base,
            correctives,
            payload,
        })
    }

    /// Appearance pre-activations for one view feature map, added onto the shared base.
    pub fn appearance_pre(&self, shared: &SharedDecode<T>, view: &[T]) -> Vec<T> {
        let cin = self.shape.inputs();
        let m = 3 * self.shape.voxels3();
        let mut pre = shared.appearance_base.clone();
        for (row, &t) in self.texels.iter().enumerate() {
            let fv = view[t];
            let out = &mut pre[row * m..(row + 1) * m];
            for (o, v) in out.iter_mut().enumerate() {
                *v += self.appearance_weight[o * (cin + 1) + cin] * fv;
            }
        }
        pre
    }

    /// Full decode for one set of feature maps.
    pub fn decode(&self, features: &FeatureMaps<T>) -> Result<Decoded<T>> {
        let shared = self.decode_shared(features)?;
        let pre = self.appearance_pre(&shared, &features.view);
        let mut payload = shared.payload.clone();
        for (c, p) in payload.rgb.iter_mut().zip(&pre) {
            *c = sigmoid(*p);
        }
        Ok(Decoded {
            correctives: shared.correctives.clone(),
            payload,
            shared,
            appearance_pre: pre,
        })
    }

    /// Exact adjoint of [`decode`](Self::decode).
    pub fn decode_backward(
        &self,
        features: &FeatureMaps<T>,
        decoded: &Decoded<T>,
        upstream: &DecodedGrad<T>,
    ) -> Result<(Self, FeatureMaps<T>)> {
        let mut acc = BackwardAccumulator::new(self);
        acc.add_view(self, &decoded.appearance_pre, &features.view, &upstream.rgb, true);
        acc.finish(self, &decoded.shared, &upstream.correctives, &upstream.alpha, true)
    }
}

fn clamp_angle<T: Real>(r: &nalgebra::Vector3<T>) -> nalgebra::Vector3<T> {
    let n = r.norm();
    let max = T::lit(MAX_CORRECTIVE_ANGLE);
    if n > max {
        r * (max / n)
    } else {
        *r
    }
}

/// `out[row][o] = sum_i weight[o][col_offset + i] * x[row][i] + bias[row][o]`.
#[allow(clippy::too_many_arguments)]
fn affine<T: Real>(
    weight: &[T],
    weight_cols: usize,
    col_offset: usize,
    bias: &[T],
    outputs: usize,
    inputs: &[T],
    cin: usize,
    rows: usize,
) -> Vec<T> {
    let mut out = bias.to_vec();
    for r in 0..rows {
        let x = &inputs[r * cin..(r + 1) * cin];
        let y = &mut out[r * outputs..(r + 1) * outputs];
        for (o, yo) in y.iter_mut().enumerate() {
            let w = &weight[o * weight_cols + col_offset..o * weight_cols + col_offset + cin];
            let mut acc = T::zero();
            for i in 0..cin {
                acc += w[i] * x[i];
            }
            *yo += acc;
        }
    }
    out
}

/// View-independent decoder outputs plus what the adjoint needs.
#[derive(Clone, Debug)]
pub struct SharedDecode<T: Real> {
    /// `[texel][pose ++ image]` inputs of every branch.
    pub inputs: Vec<T>,
    pub motion_raw: Vec<T>,
    pub opacity_pre: Vec<T>,
    pub appearance_base: Vec<T>,
    pub correctives: Vec<Correctives<T>>,
    /// Opacity filled in; `rgb` left zero.
    pub payload: Payloads<T>,
}

impl<T: Real> SharedDecode<T> {
    /// Payload with rgb from the given appearance pre-activations.
    pub fn payload_with_appearance(&self, pre: &[T]) -> Payloads<T> {
        let mut p = self.payload.clone();
        for (c, x) in p.rgb.iter_mut().zip(pre) {
            *c = sigmoid(*x);
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct Decoded<T: Real> {
    pub correctives: Vec<Correctives<T>>,
    pub payload: Payloads<T>,
    pub shared: SharedDecode<T>,
    pub appearance_pre: Vec<T>,
}

/// Upstream gradients w.r.t. decoder outputs (post-activation).
#[derive(Clone, Debug)]
pub struct DecodedGrad<T: Real> {
    pub correctives: Vec<Correctives<T>>,
    pub alpha: Vec<T>,
    pub rgb: Vec<T>,
}

/// Accumulates appearance gradients over views before the shared backward pass.
pub struct BackwardAccumulator<T: Real> {
    appearance_pre_grad: Vec<T>,
    view_column_grad: Vec<T>,
    view_grads: Vec<Vec<T>>,
}

impl<T: Real> BackwardAccumulator<T> {
    pub fn new(params: &DecoderParams<T>) -> Self {
        let m = 3 * params.shape.voxels3();
        Self {
            appearance_pre_grad: vec![T::zero(); params.texels.len() * m],
            view_column_grad: vec![T::zero(); m],
            view_grads: Vec::new(),
        }
    }

    /// Adds one view's rgb gradient; returns nothing, the view-feature gradient is kept
    /// when `feature_grads` is set.
    pub fn add_view(&mut self, params: &DecoderParams<T>, appearance_pre: &[T], view: &[T], rgb_grad: &[T], feature_grads: bool) {
        let cin = params.shape.inputs();
        let m = 3 * params.shape.voxels3();
        let mut fv_grad = if feature_grads { vec![T::zero(); view.len()] } else { Vec::new() };
        for (row, &t) in params.texels.iter().enumerate() {
            let fv = view[t];
            let mut g_fv = T::zero();
            for o in 0..m {
                let idx = row * m + o;
                let s = sigmoid(appearance_pre[idx]);
                let g = rgb_grad[idx] * s * (T::one() - s);
                self.appearance_pre_grad[idx] += g;
                self.view_column_grad[o] += g * fv;
                g_fv += g * params.appearance_weight[o * (cin + 1) + cin];
            }
            if feature_grads {
                fv_grad[t] = g_fv;
            }
        }
        self.view_grads.push(fv_grad);
    }

    /// Parameter gradients and (when requested) feature-map gradients.
    ///
    /// The returned feature gradient carries the view gradient of the first view added.
    pub fn finish(
        self,
        params: &DecoderParams<T>,
        shared: &SharedDecode<T>,
        corr_grad: &[Correctives<T>],
        alpha_grad: &[T],
        feature_grads: bool,
    ) -> Result<(DecoderParams<T>, FeatureMaps<T>)> {
        let k = params.texels.len();
        if corr_grad.len() != k || alpha_grad.len() != shared.opacity_pre.len() {
            return Err(Error::Shape("decoder upstream gradient sizes".into()));
        }
        let cin = params.shape.inputs();
        let v3 = params.shape.voxels3();
        let m = 3 * v3;
        let mut grads = params.zeros_like();
        let scale = params.motion_scale;
        let mut motion_g = vec![T::zero(); 9 * k];
        for (row, g) in corr_grad.iter().enumerate() {
            let raw = &shared.motion_raw[row * 9..(row + 1) * 9];
            let out = &mut motion_g[row * 9..(row + 1) * 9];
            for a in 0..3 {
                out[a] = g.delta_position[a] * scale;
                out[6 + a] = g.delta_scale[a] * scale;
            }
            let r = nalgebra::Vector3::new(raw[3], raw[4], raw[5]) * scale;
            let n = r.norm();
            let max = T::lit(MAX_CORRECTIVE_ANGLE);
            let gr = if n > max {
                let u = r / n;
                let gp = g.delta_rotation - u * u.dot(&g.delta_rotation);
                gp * (max / n)
            } else {
                g.delta_rotation
            };
            for a in 0..3 {
                out[3 + a] = gr[a] * scale;
            }
        }
        let opacity_g: Vec<T> = shared
            .opacity_pre
            .iter()
            .zip(alpha_grad)
            .map(|(p, g)| *g * sigmoid(*p))
            .collect();
        let ap = &self.appearance_pre_grad;
        let mut x_grad = if feature_grads { vec![T::zero(); k * cin] } else { Vec::new() };
        for row in 0..k {
            let x = &shared.inputs[row * cin..(row + 1) * cin];
            let branches: [(&[T], &mut Vec<T>, &[T], usize, usize); 3] = [
                (&motion_g[row * 9..(row + 1) * 9], &mut grads.motion_weight, &params.motion_weight, 9, cin),
                (&opacity_g[row * v3..(row + 1) * v3], &mut grads.opacity_weight, &params.opacity_weight, v3, cin),
                (&ap[row * m..(row + 1) * m], &mut grads.appearance_weight, &params.appearance_weight, m, cin + 1),
            ];
            for (g, gw, w, outputs, cols) in branches {
                for o in 0..outputs {
                    let go = g[o];
                    if go == T::zero() {
                        continue;
                    }
                    let wrow = &mut gw[o * cols..o * cols + cin];
                    for i in 0..cin {
                        wrow[i] += go * x[i];
                    }
                    if feature_grads {
                        let xr = &mut x_grad[row * cin..(row + 1) * cin];
                        let wr = &w[o * cols..o * cols + cin];
                        for i in 0..cin {
                            xr[i] += go * wr[i];
                        }
                    }
                }
            }
        }
        grads.motion_bias = motion_g;
        grads.opacity_bias = opacity_g;
        grads.appearance_bias = self.appearance_pre_grad;
        for o in 0..m {
            grads.appearance_weight[o * (cin + 1) + cin] = self.view_column_grad[o];
        }
        let res = params.shape.resolution;
        let n = res * res;
        let mut fgrad = FeatureMaps::zeros(res, params.shape.pose_channels, params.shape.image_channels);
        if feature_grads {
            let cp = params.shape.pose_channels;
            for (row, &t) in params.texels.iter().enumerate() {
                let xr = &x_grad[row * cin..(row + 1) * cin];
                for c in 0..cp {
                    fgrad.pose[c * n + t] = xr[c];
                }
                for c in 0..params.shape.image_channels {
                    fgrad.image[c * n + t] = xr[cp + c];
                }
            }
            if let Some(v) = self.view_grads.into_iter().next() {
                fgrad.view = v;
            }
        }
        Ok((grads, fgrad))
    }
}

/// Opacity payloads laid out as the `S x (W*S) x (W*S)` slab; invalid texels are zero.
pub fn opacity_slab<T: Real>(payload: &Payloads<T>, texels: &[usize], resolution: usize) -> ([usize; 3], Vec<T>) {
    let s = payload.voxels;
    let side = resolution * s;
    let mut out = vec![T::zero(); s * side * side];
    for (k, &t) in texels.iter().enumerate() {
        let (tx, ty) = (t % resolution, t / resolution);
        let a = payload.alpha_of(k);
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    out[(z * side + ty * s + y) * side + tx * s + x] = a[(z * s + y) * s + x];
                }
            }
        }
    }
    ([s, side, side], out)
}

/// Appearance payloads laid out as the `3 x S x (W*S) x (W*S)` slab.
pub fn appearance_slab<T: Real>(payload: &Payloads<T>, texels: &[usize], resolution: usize) -> ([usize; 4], Vec<T>) {
    let s = payload.voxels;
    let side = resolution * s;
    let plane = s * side * side;
    let n = s * s * s;
    let mut out = vec![T::zero(); 3 * plane];
    for (k, &t) in texels.iter().enumerate() {
        let (tx, ty) = (t % resolution, t / resolution);
        let rgb = payload.rgb_of(k);
        for c in 0..3 {
            for z in 0..s {
                for y in 0..s {
                    for x in 0..s {
                        out[c * plane + (z * side + ty * s + y) * side + tx * s + x] = rgb[c * n + (z * s + y) * s + x];
                    }
                }
            }
        }
    }
    ([3, s, side, side], out)
}
