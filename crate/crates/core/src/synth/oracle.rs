//! Reference renderer: fixed-lattice quadrature of the saturating opacity integral.
//!
//! Evaluated with its own box test and its own voxel lookup, sampling the whole
//! bounding sphere of the scene without any acceleration.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::primitives::PrimitiveSet;
use crate::render::RenderOutput;

/// Smallest sample count accepted for reference use.
pub const MIN_ORACLE_SAMPLES: usize = 1024;

#[derive(Clone, Debug)]
pub struct OracleRenderer {
    /// Samples across the diameter of the scene's bounding sphere.
    pub sample_count: usize,
    pub background: Vector3<f64>,
}

struct OracleBox {
    center: Vector3<f64>,
    to_local: Matrix3<f64>,
    inv_scale: Vector3<f64>,
}

impl OracleRenderer {
    pub fn new(sample_count: usize) -> Self {
        Self {
            sample_count,
            background: Vector3::zeros(),
        }
    }

    /// Bounding sphere of all box corners.
    fn sphere(set: &PrimitiveSet<f64>) -> Option<(Vector3<f64>, f64)> {
        let corners: Vec<Vector3<f64>> = set
            .primitives
            .iter()
            .flat_map(|p| {
                (0..8).map(move |c| {
                    let l = Vector3::new(
                        if c & 1 == 0 { -1.0 } else { 1.0 },
                        if c & 2 == 0 { -1.0 } else { 1.0 },
                        if c & 4 == 0 { -1.0 } else { 1.0 },
                    );
                    p.position + p.rotation * l.component_mul(&p.scale)
                })
            })
            .collect();
        if corners.is_empty() {
            return None;
        }
        let n = corners.len() as f64;
        let center = corners.iter().fold(Vector3::zeros(), |a, c| a + c) / n;
        let radius = corners.iter().map(|c| (c - center).norm()).fold(0.0, f64::max);
        Some((center, radius * 1.001 + 1e-9))
    }

    /// Quadrature step the renderer uses for `set`.
    pub fn step(&self, set: &PrimitiveSet<f64>) -> f64 {
        Self::sphere(set).map_or(1.0, |(_, r)| 2.0 * r / self.sample_count.max(1) as f64)
    }

    /// Renders with lattice step `dt` (samples at `(i + 1/2) dt` from the eye).
    pub fn render_with_step(&self, set: &PrimitiveSet<f64>, camera: &Camera<f64>, dt: f64) -> RenderOutput<f64> {
        let (w, h) = (camera.width, camera.height);
        let boxes: Vec<OracleBox> = set
            .primitives
            .iter()
            .map(|p| OracleBox {
                center: p.position,
                to_local: p.rotation.transpose(),
                inv_scale: p.scale.map(|s| 1.0 / s),
            })
            .collect();
        let sphere = Self::sphere(set);
        let eye = camera.rotation.transpose() * -camera.translation;
        let pixels: Vec<(Vector3<f64>, f64)> = (0..w * h)
            .into_par_iter()
            .map(|p| {
                let (px, py) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                let d_cam = Vector3::new((px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0);
                let d = (camera.rotation.transpose() * d_cam).normalize();
                let Some((c, r)) = sphere else {
                    return (self.background, 0.0);
                };
                // chord of the sphere along the ray
                let oc = eye - c;
                let b = oc.dot(&d);
                let disc = b * b - (oc.norm_squared() - r * r);
                if disc <= 0.0 {
                    return (self.background, 0.0);
                }
                let t0 = (-b - disc.sqrt()).max(0.0);
                let t1 = -b + disc.sqrt();
                if t1 <= t0 {
                    return (self.background, 0.0);
                }
                let first = (t0 / dt - 0.5).ceil().max(0.0) as usize;
                let mut acc = 0.0;
                let mut rgb = Vector3::zeros();
                let mut i = first;
                loop {
                    let t = (i as f64 + 0.5) * dt;
                    if t > t1 || acc >= 1.0 {
                        break;
                    }
                    let x = eye + d * t;
                    let (a, col) = field(set, &boxes, &x);
                    let next = (acc + a * dt).min(1.0);
                    rgb += col * (next - acc);
                    acc = next;
                    i += 1;
                }
                (rgb + self.background * (1.0 - acc), acc)
            })
            .collect();
        RenderOutput {
            width: w,
            height: h,
            rgb: pixels.iter().flat_map(|(c, _)| [c.x, c.y, c.z]).collect(),
            alpha: pixels.iter().map(|(_, a)| *a).collect(),
        }
    }

    pub fn render(&self, set: &PrimitiveSet<f64>, camera: &Camera<f64>) -> RenderOutput<f64> {
        self.render_with_step(set, camera, self.step(set))
    }
}

/// Density and color at `x`, each summed over the boxes containing it.
fn field(set: &PrimitiveSet<f64>, boxes: &[OracleBox], x: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let s = set.payload.voxels;
    let n = s * s * s;
    let mut a = 0.0;
    let mut c = Vector3::zeros();
    for (k, b) in boxes.iter().enumerate() {
        let l = (b.to_local * (x - b.center)).component_mul(&b.inv_scale);
        if l.iter().any(|v| v.abs() > 1.0) {
            continue;
        }
        let alpha = &set.payload.alpha[k * n..(k + 1) * n];
        let rgb = &set.payload.rgb[k * 3 * n..(k + 1) * 3 * n];
        a += lookup(alpha, s, &l);
        for ch in 0..3 {
            c[ch] += lookup(&rgb[ch * n..(ch + 1) * n], s, &l);
        }
    }
    (a, c)
}

/// Trilinear lookup with voxel centers at `-1 + (2i + 1) / S`, clamped at the outer centers.
fn lookup(grid: &[f64], s: usize, l: &Vector3<f64>) -> f64 {
    let coord = |v: f64| -> (usize, usize, f64) {
        if s == 1 {
            return (0, 0, 0.0);
        }
        let g = ((v + 1.0) * s as f64 / 2.0 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = (g.floor() as usize).min(s - 2);
        (lo, lo + 1, g - lo as f64)
    };
    let (x0, x1, fx) = coord(l.x);
    let (y0, y1, fy) = coord(l.y);
    let (z0, z1, fz) = coord(l.z);
    let at = |x: usize, y: usize, z: usize| grid[(z * s + y) * s + x];
    let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}
