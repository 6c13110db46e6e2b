//! Cumulative volumetric rendering through the primitive mixture and its adjoint.
//!
//! Samples sit at `t_i = (i + 1/2) * dt` measured from the ray origin and are taken
//! only inside the union of primitive intervals. Accumulated opacity saturates:
//! `T_i = min(1, T_{i-1} + A(x_i) dt)`, each sample contributes color with weight
//! `T_i - T_{i-1}` and the residual `1 - T_N` shows the background. Marching stops
//! once `T` reaches 1.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::accel::{intersect_brute_force, intersect_into, Hit, UniformGrid};
use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::primitives::{PlacementGrad, Primitive, PrimitiveSet};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig<T: Real> {
    pub step_size: T,
    pub background: Vector3<T>,
    pub max_steps: usize,
}

impl<T: Real> RenderConfig<T> {
    pub fn new(step_size: T, background: Vector3<T>, max_steps: usize) -> Result<Self> {
        if !(step_size > T::zero()) || max_steps == 0 {
            return Err(Error::Invalid("step size and max steps must be positive".into()));
        }
        Ok(Self {
            step_size,
            background,
            max_steps,
        })
    }

    /// Step of a quarter of the median primitive half-extent, black background.
    pub fn for_set(set: &PrimitiveSet<T>) -> Self {
        let step = set.median_half_extent().unwrap_or(T::one()) * T::lit(0.25);
        Self {
            step_size: step,
            background: Vector3::zeros(),
            max_steps: 1 << 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major `H x W x 3`.
    pub rgb: Vec<T>,
    /// Row-major `H x W`, accumulated opacity in `[0, 1]`.
    pub alpha: Vec<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn rgb_image(&self) -> Image<T> {
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.rgb.clone(),
        }
    }

    pub fn alpha_image(&self) -> Image<T> {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.alpha.clone(),
        }
    }
}

/// Trilinear stencil of a local point into an `S^3` voxel grid.
///
/// Voxel centers sit at local `-1 + (2i + 1) / S`; outside the outermost centers
/// the lookup clamps (zero derivative).
struct Stencil<T: Real> {
    idx: [usize; 8],
    w: [T; 8],
    dw: [Vector3<T>; 8],
}

#[inline]
fn axis_lookup<T: Real>(l: T, s: usize) -> (usize, usize, T, T) {
    if s == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    let half_s = T::of_usize(s) * T::lit(0.5);
    let g = (l + T::one()) * half_s - T::lit(0.5);
    let top = T::of_usize(s - 1);
    let (g, dg) = if g <= T::zero() {
        (T::zero(), T::zero())
    } else if g >= top {
        (top, T::zero())
    } else {
        (g, half_s)
    };
    let i0 = (g.floor().as_f64() as usize).min(s - 2);
    (i0, i0 + 1, g - T::of_usize(i0), dg)
}

impl<T: Real> Stencil<T> {
    #[inline]
    fn new(l: &Vector3<T>, s: usize) -> Self {
        let ax = [axis_lookup(l.x, s), axis_lookup(l.y, s), axis_lookup(l.z, s)];
        let mut idx = [0usize; 8];
        let mut w = [T::zero(); 8];
        let mut dw = [Vector3::zeros(); 8];
        for corner in 0..8 {
            let bit = |a: usize| (corner >> a) & 1 == 1;
            let mut wa = [T::zero(); 3];
            let mut da = [T::zero(); 3];
            let mut ia = [0usize; 3];
            for a in 0..3 {
                let (i0, i1, f, dg) = ax[a];
                if bit(a) {
                    ia[a] = i1;
                    wa[a] = f;
                    da[a] = dg;
                } else {
                    ia[a] = i0;
                    wa[a] = T::one() - f;
                    da[a] = -dg;
                }
            }
            idx[corner] = (ia[2] * s + ia[1]) * s + ia[0];
            w[corner] = wa[0] * wa[1] * wa[2];
            dw[corner] = Vector3::new(da[0] * wa[1] * wa[2], wa[0] * da[1] * wa[2], wa[0] * wa[1] * da[2]);
        }
        Self { idx, w, dw }
    }

    #[inline]
    fn value(&self, v: &[T]) -> T {
        let mut acc = T::zero();
        for c in 0..8 {
            acc += self.w[c] * v[self.idx[c]];
        }
        acc
    }

    #[inline]
    fn gradient(&self, v: &[T]) -> Vector3<T> {
        let mut acc = Vector3::zeros();
        for c in 0..8 {
            acc += self.dw[c] * v[self.idx[c]];
        }
        acc
    }
}

#[inline]
fn inside_cube<T: Real>(l: &Vector3<T>) -> bool {
    l.x.abs() <= T::one() && l.y.abs() <= T::one() && l.z.abs() <= T::one()
}

/// Calls `visit(t)` for every sample position inside the union of hit intervals,
/// in increasing `t`, until it returns `false` or `max_steps` samples were taken.
fn for_each_sample<T: Real>(hits: &[Hit<T>], config: &RenderConfig<T>, mut visit: impl FnMut(T) -> bool) {
    let dt = config.step_size;
    let half = T::lit(0.5);
    let mut steps = 0usize;
    let mut k = 0;
    while k < hits.len() {
        let a = hits[k].t_enter;
        let mut b = hits[k].t_exit;
        k += 1;
        while k < hits.len() && hits[k].t_enter <= b {
            b = b.max(hits[k].t_exit);
            k += 1;
        }
        let i0 = (a / dt - half).ceil().as_f64().max(0.0) as usize;
        let i1 = (b / dt - half).floor().as_f64();
        if i1 < i0 as f64 {
            continue;
        }
        for i in i0..=(i1 as usize) {
            let t = (T::of_usize(i) + half) * dt;
            if t < a || t > b {
                continue;
            }
            if steps >= config.max_steps {
                return;
            }
            steps += 1;
            if !visit(t) {
                return;
            }
        }
    }
}

/// Aggregate opacity and color at `x`: sums over primitives containing the point.
#[inline]
fn eval_field<T: Real>(x: &Vector3<T>, t: T, hits: &[Hit<T>], set: &PrimitiveSet<T>) -> (T, Vector3<T>) {
    let s = set.payload.voxels;
    let mut a = T::zero();
    let mut c = Vector3::zeros();
    for h in hits {
        if t < h.t_enter || t > h.t_exit {
            continue;
        }
        let prim = &set.primitives[h.primitive];
        let l = prim.world_to_local(x);
        if !inside_cube(&l) {
            continue;
        }
        let st = Stencil::new(&l, s);
        a += st.value(set.payload.alpha_of(h.primitive));
        let rgb = set.payload.rgb_of(h.primitive);
        let n = s * s * s;
        for ch in 0..3 {
            c[ch] += st.value(&rgb[ch * n..(ch + 1) * n]);
        }
    }
    (a, c)
}

#[derive(Clone, Copy, Debug)]
struct Sample<T: Real> {
    t: T,
    density: T,
    color: Vector3<T>,
    saturated: bool,
}

/// Forward march over precomputed hits; optionally records every sample.
fn march_hits<T: Real>(
    ray: &Ray<T>,
    hits: &[Hit<T>],
    set: &PrimitiveSet<T>,
    config: &RenderConfig<T>,
    mut record: Option<&mut Vec<Sample<T>>>,
) -> Result<(Vector3<T>, T)> {
    let dt = config.step_size;
    let mut acc = T::zero();
    let mut rgb = Vector3::zeros();
    let mut bad = false;
    for_each_sample(hits, config, |t| {
        let x = ray.at(t);
        let (a, c) = eval_field(&x, t, hits, set);
        if !a.finite() || !c.iter().all(|v| v.finite()) {
            bad = true;
            return false;
        }
        let u = acc + a * dt;
        let saturated = u >= T::one();
        let next = if saturated { T::one() } else { u };
        rgb += c * (next - acc);
        acc = next;
        if let Some(r) = record.as_deref_mut() {
            r.push(Sample {
                t,
                density: a,
                color: c,
                saturated,
            });
        }
        !saturated
    });
    if bad {
        return Err(Error::NonFiniteField);
    }
    rgb += config.background * (T::one() - acc);
    Ok((rgb, acc))
}

/// Color and accumulated opacity along one ray (brute-force intersection).
pub fn march<T: Real>(ray: &Ray<T>, set: &PrimitiveSet<T>, config: &RenderConfig<T>) -> Result<(Vector3<T>, T)> {
    let hits = intersect_brute_force(ray, set);
    march_hits(ray, &hits, set, config, None)
}

/// Per-sample diagnostic record used by gradient checks to stay away from kinks.
#[derive(Clone, Debug, PartialEq)]
pub struct TracedSample<T> {
    pub t: T,
    /// Accumulated opacity before clamping to 1.
    pub unclamped_opacity: T,
}

pub fn trace_ray<T: Real>(ray: &Ray<T>, set: &PrimitiveSet<T>, config: &RenderConfig<T>) -> Result<Vec<TracedSample<T>>> {
    let hits = intersect_brute_force(ray, set);
    let mut rec = Vec::new();
    march_hits(ray, &hits, set, config, Some(&mut rec))?;
    let mut acc = T::zero();
    Ok(rec
        .into_iter()
        .map(|s| {
            let u = acc + s.density * config.step_size;
            acc = u.min(T::one());
            TracedSample {
                t: s.t,
                unclamped_opacity: u,
            }
        })
        .collect())
}

/// Scene prepared for repeated ray queries.
pub struct Renderer<'a, T: Real> {
    pub set: &'a PrimitiveSet<T>,
    pub accel: UniformGrid<T>,
    pub config: &'a RenderConfig<T>,
}

impl<'a, T: Real> Renderer<'a, T> {
    pub fn new(set: &'a PrimitiveSet<T>, config: &'a RenderConfig<T>) -> Self {
        Self {
            set,
            accel: UniformGrid::build(set),
            config,
        }
    }

    pub fn render(&self, camera: &Camera<T>) -> Result<RenderOutput<T>> {
        let (w, h) = (camera.width, camera.height);
        let rows: Vec<Result<(Vec<T>, Vec<T>)>> = (0..h)
            .into_par_iter()
            .map(|py| {
                let mut cand = Vec::new();
                let mut hits = Vec::new();
                let mut rgb = Vec::with_capacity(w * 3);
                let mut alpha = Vec::with_capacity(w);
                for px in 0..w {
                    let ray = camera.pixel_ray(px, py, self.accel.bounds());
                    intersect_into(&ray, self.set, &self.accel, &mut cand, &mut hits);
                    let (c, a) = march_hits(&ray, &hits, self.set, self.config, None)?;
                    rgb.extend_from_slice(c.as_slice());
                    alpha.push(a);
                }
                Ok((rgb, alpha))
            })
            .collect();
        let mut out = RenderOutput {
            width: w,
            height: h,
            rgb: Vec::with_capacity(w * h * 3),
            alpha: Vec::with_capacity(w * h),
        };
        for r in rows {
            let (rgb, alpha) = r?;
            out.rgb.extend(rgb);
            out.alpha.extend(alpha);
        }
        Ok(out)
    }

    pub fn backward(&self, camera: &Camera<T>, rgb_grad: &[T], alpha_grad: Option<&[T]>) -> Result<RenderGrads<T>> {
        let (w, h) = (camera.width, camera.height);
        if rgb_grad.len() != w * h * 3 || alpha_grad.is_some_and(|a| a.len() != w * h) {
            return Err(Error::Shape("output gradient does not match the camera".into()));
        }
        let tiles = h.min(BACKWARD_TILES);
        let partials: Vec<Result<RenderGrads<T>>> = (0..tiles)
            .into_par_iter()
            .map(|tile| {
                let mut grads = RenderGrads::zeros(self.set);
                let mut cand = Vec::new();
                let mut hits = Vec::new();
                let mut samples = Vec::new();
                for py in (tile..h).step_by(tiles) {
                    for px in 0..w {
                        let p = py * w + px;
                        let g = Vector3::new(rgb_grad[3 * p], rgb_grad[3 * p + 1], rgb_grad[3 * p + 2]);
                        let ga = alpha_grad.map_or(T::zero(), |a| a[p]);
                        if g == Vector3::zeros() && ga == T::zero() {
                            continue;
                        }
                        let ray = camera.pixel_ray(px, py, self.accel.bounds());
                        intersect_into(&ray, self.set, &self.accel, &mut cand, &mut hits);
                        backward_ray(&ray, &hits, self.set, self.config, g, ga, &mut samples, &mut grads)?;
                    }
                }
                Ok(grads)
            })
            .collect();
        let mut total = RenderGrads::zeros(self.set);
        for p in partials {
            total.add(&p?);
        }
        Ok(total)
    }
}

/// Fixed partition of image rows for the backward pass; reduction runs in tile order.
const BACKWARD_TILES: usize = 8;

/// March every pixel of `camera`.
pub fn render<T: Real>(set: &PrimitiveSet<T>, camera: &Camera<T>, config: &RenderConfig<T>) -> Result<RenderOutput<T>> {
    Renderer::new(set, config).render(camera)
}

/// Gradients of a scalar loss w.r.t. payloads and placements.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads<T: Real> {
    pub alpha: Vec<T>,
    pub rgb: Vec<T>,
    pub placement: Vec<PlacementGrad<T>>,
}

impl<T: Real> RenderGrads<T> {
    pub fn zeros(set: &PrimitiveSet<T>) -> Self {
        Self {
            alpha: vec![T::zero(); set.payload.alpha.len()],
            rgb: vec![T::zero(); set.payload.rgb.len()],
            placement: vec![PlacementGrad::default(); set.len()],
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.alpha.iter_mut().zip(&o.alpha).for_each(|(a, b)| *a += *b);
        self.rgb.iter_mut().zip(&o.rgb).for_each(|(a, b)| *a += *b);
        self.placement.iter_mut().zip(&o.placement).for_each(|(a, b)| a.add(b));
    }

    pub fn is_zero(&self) -> bool {
        self.alpha.iter().chain(&self.rgb).all(|x| *x == T::zero())
            && self
                .placement
                .iter()
                .all(|p| p.position == Vector3::zeros() && p.rotation == Vector3::zeros() && p.scale == Vector3::zeros())
    }
}

/// Adjoint of the loss `g . rgb + g_alpha * alpha` for one ray, accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
fn backward_ray<T: Real>(
    ray: &Ray<T>,
    hits: &[Hit<T>],
    set: &PrimitiveSet<T>,
    config: &RenderConfig<T>,
    g: Vector3<T>,
    g_alpha: T,
    samples: &mut Vec<Sample<T>>,
    grads: &mut RenderGrads<T>,
) -> Result<()> {
    samples.clear();
    march_hits(ray, hits, set, config, Some(samples))?;
    let dt = config.step_size;
    // reverse sweep over dL/dT_i
    let mut adj = g_alpha - config.background.dot(&g);
    let mut adj_density = vec![T::zero(); samples.len()];
    for i in (0..samples.len()).rev() {
        let s = &samples[i];
        let q = s.color.dot(&g);
        adj += q;
        if s.saturated {
            adj_density[i] = T::zero();
            adj = -q;
        } else {
            adj_density[i] = adj * dt;
            adj -= q;
        }
    }
    let s_vox = set.payload.voxels;
    let n = s_vox * s_vox * s_vox;
    let mut prev = T::zero();
    for (i, s) in samples.iter().enumerate() {
        let next = if s.saturated { T::one() } else { prev + s.density * dt };
        let weight = next - prev;
        prev = next;
        let da = adj_density[i];
        let dc = g * weight;
        if da == T::zero() && dc == Vector3::zeros() {
            continue;
        }
        let x = ray.at(s.t);
        for h in hits {
            if s.t < h.t_enter || s.t > h.t_exit {
                continue;
            }
            let k = h.primitive;
            let prim = &set.primitives[k];
            let l = prim.world_to_local(&x);
            if !inside_cube(&l) {
                continue;
            }
            let st = Stencil::new(&l, s_vox);
            let alpha = set.payload.alpha_of(k);
            let rgb = set.payload.rgb_of(k);
            let mut adj_l = st.gradient(alpha) * da;
            for ch in 0..3 {
                adj_l += st.gradient(&rgb[ch * n..(ch + 1) * n]) * dc[ch];
            }
            let ga = &mut grads.alpha[k * n..(k + 1) * n];
            for c in 0..8 {
                ga[st.idx[c]] += st.w[c] * da;
            }
            let gr = &mut grads.rgb[k * 3 * n..(k + 1) * 3 * n];
            for ch in 0..3 {
                for c in 0..8 {
                    gr[ch * n + st.idx[c]] += st.w[c] * dc[ch];
                }
            }
            let pg = local_coords_backward(prim, &x, &adj_l);
            grads.placement[k].add(&pg);
        }
    }
    Ok(())
}

/// Adjoint of `l = diag(1/s) R^T (x - t)` w.r.t. `(t, R, s)`, rotation as left perturbation.
#[inline]
pub fn local_coords_backward<T: Real>(prim: &Primitive<T>, x: &Vector3<T>, adj_l: &Vector3<T>) -> PlacementGrad<T> {
    let v = x - prim.position;
    let y = prim.rotation.transpose() * v;
    let adj_y = adj_l.component_div(&prim.scale);
    let r_adj = prim.rotation * adj_y;
    PlacementGrad {
        position: -r_adj,
        rotation: r_adj.cross(&v),
        scale: -adj_y.component_mul(&y).component_div(&prim.scale),
    }
}

/// Gradients of `sum(rgb_grad * rgb) + sum(alpha_grad * alpha)` over the rendered image.
pub fn render_backward<T: Real>(
    set: &PrimitiveSet<T>,
    camera: &Camera<T>,
    config: &RenderConfig<T>,
    rgb_grad: &[T],
    alpha_grad: Option<&[T]>,
) -> Result<RenderGrads<T>> {
    Renderer::new(set, config).backward(camera, rgb_grad, alpha_grad)
}
