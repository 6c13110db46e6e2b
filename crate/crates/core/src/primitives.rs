//! Volumetric primitives attached to texels of the articulated surface.

use nalgebra::{Matrix3, Vector3};

use crate::atlas::{interpolate, TexelGrid};
use crate::error::{Error, Result};
use crate::lbs::{uv_gradients, PosedMesh, TemplateMesh};
use crate::rotation::{exp_so3, left_jacobian_so3};
use crate::scalar::Real;

/// Smallest half-extent a corrected primitive may have.
pub const SCALE_FLOOR: f64 = 1e-4;
/// Default voxel resolution per axis.
pub const DEFAULT_VOXELS: usize = 16;
/// Normal-axis half-extent relative to the mean tangent half-extent.
pub const DEFAULT_THICKNESS: f64 = 1.0;

/// Articulation-driven placement of one primitive before correctives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimitiveBasis<T: Real> {
    pub texel: usize,
    pub position: Vector3<T>,
    pub orientation: Matrix3<T>,
    /// Half-extents along the local axes.
    pub scale: Vector3<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correctives<T: Real> {
    pub delta_position: Vector3<T>,
    /// Axis-angle, left-composed with the basis orientation.
    pub delta_rotation: Vector3<T>,
    pub delta_scale: Vector3<T>,
}

impl<T: Real> Default for Correctives<T> {
    fn default() -> Self {
        Self {
            delta_position: Vector3::zeros(),
            delta_rotation: Vector3::zeros(),
            delta_scale: Vector3::zeros(),
        }
    }
}

impl<T: Real> Correctives<T> {
    pub fn to_array(&self) -> [T; 9] {
        let mut a = [T::zero(); 9];
        a[0..3].copy_from_slice(self.delta_position.as_slice());
        a[3..6].copy_from_slice(self.delta_rotation.as_slice());
        a[6..9].copy_from_slice(self.delta_scale.as_slice());
        a
    }

    pub fn from_slice(a: &[T]) -> Self {
        Self {
            delta_position: Vector3::new(a[0], a[1], a[2]),
            delta_rotation: Vector3::new(a[3], a[4], a[5]),
            delta_scale: Vector3::new(a[6], a[7], a[8]),
        }
    }
}

/// Final placement of one primitive. The primitive occupies the local cube `[-1, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive<T: Real> {
    pub position: Vector3<T>,
    pub rotation: Matrix3<T>,
    pub scale: Vector3<T>,
}

impl<T: Real> Primitive<T> {
    /// `diag(1/s) R^T (p - t)`.
    #[inline]
    pub fn world_to_local(&self, p: &Vector3<T>) -> Vector3<T> {
        (self.rotation.transpose() * (p - self.position)).component_div(&self.scale)
    }

    #[inline]
    pub fn local_to_world(&self, l: &Vector3<T>) -> Vector3<T> {
        self.rotation * l.component_mul(&self.scale) + self.position
    }

    /// Half extents of the world-space axis-aligned box enclosing the primitive.
    pub fn aabb_half_extents(&self) -> Vector3<T> {
        self.rotation.abs() * self.scale
    }

    pub fn bounding_radius(&self) -> T {
        self.scale.norm()
    }
}

/// Voxel payloads for `count` primitives at `voxels^3` resolution.
///
/// `alpha` is `[K][S^3]`, `rgb` is `[K][3][S^3]`; voxel `(x, y, z)` has index `(z*S + y)*S + x`
/// with `x` along the first local axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Payloads<T> {
    pub voxels: usize,
    pub count: usize,
    pub alpha: Vec<T>,
    pub rgb: Vec<T>,
}

impl<T: Real> Payloads<T> {
    pub fn zeros(count: usize, voxels: usize) -> Self {
        let n = voxels * voxels * voxels;
        Self {
            voxels,
            count,
            alpha: vec![T::zero(); count * n],
            rgb: vec![T::zero(); count * 3 * n],
        }
    }

    #[inline]
    pub fn voxels_per_primitive(&self) -> usize {
        self.voxels * self.voxels * self.voxels
    }

    pub fn alpha_of(&self, k: usize) -> &[T] {
        let n = self.voxels_per_primitive();
        &self.alpha[k * n..(k + 1) * n]
    }

    pub fn rgb_of(&self, k: usize) -> &[T] {
        let n = 3 * self.voxels_per_primitive();
        &self.rgb[k * n..(k + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxels_per_primitive();
        if self.alpha.len() != self.count * n || self.rgb.len() != 3 * self.count * n {
            return Err(Error::Shape("payload arrays do not match count and voxels".into()));
        }
        if self.alpha.iter().any(|a| !a.finite() || *a < T::zero()) {
            return Err(Error::Invalid("alpha payload must be finite and nonnegative".into()));
        }
        if self.rgb.iter().any(|c| !c.finite()) {
            return Err(Error::Invalid("rgb payload must be finite".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Payloads<U> {
        Payloads {
            voxels: self.voxels,
            count: self.count,
            alpha: self.alpha.iter().map(|x| U::lit(x.as_f64())).collect(),
            rgb: self.rgb.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveSet<T: Real> {
    pub primitives: Vec<Primitive<T>>,
    /// Texel index of each primitive.
    pub texels: Vec<usize>,
    pub payload: Payloads<T>,
    /// Number of scale components raised to the floor when correctives were applied.
    pub clamped_scales: usize,
}

impl<T: Real> PrimitiveSet<T> {
    pub fn new(primitives: Vec<Primitive<T>>, texels: Vec<usize>, payload: Payloads<T>) -> Result<Self> {
        if primitives.len() != texels.len() || payload.count != primitives.len() {
            return Err(Error::Shape(format!(
                "{} primitives, {} texels, {} payloads",
                primitives.len(),
                texels.len(),
                payload.count
            )));
        }
        if primitives.iter().any(|p| p.scale.iter().any(|s| !(*s > T::zero()))) {
            return Err(Error::Invalid("primitive scales must be positive".into()));
        }
        Ok(Self {
            primitives,
            texels,
            payload,
            clamped_scales: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Median half-extent over all primitives and axes.
    pub fn median_half_extent(&self) -> Option<T> {
        let mut all: Vec<f64> = self
            .primitives
            .iter()
            .flat_map(|p| p.scale.iter().map(|s| s.as_f64()).collect::<Vec<_>>())
            .collect();
        if all.is_empty() {
            return None;
        }
        all.sort_by(f64::total_cmp);
        Some(T::lit(all[all.len() / 2]))
    }

    /// Same geometry with a different payload.
    pub fn with_payload(&self, payload: Payloads<T>) -> Self {
        Self {
            primitives: self.primitives.clone(),
            texels: self.texels.clone(),
            payload,
            clamped_scales: self.clamped_scales,
        }
    }
}

/// Primitive placement from the texel grid on the posed mesh.
///
/// Scales come from the canonical shape: `|dX/du| / (2W)`, `|dX/dv| / (2W)`, and
/// `thickness` times their mean along the normal.
pub fn init_basis<T: Real>(
    template: &TemplateMesh<T>,
    posed: &PosedMesh<T>,
    grid: &TexelGrid<T>,
    thickness: T,
) -> Result<Vec<PrimitiveBasis<T>>> {
    let two_w = T::lit(2.0) * T::of_usize(grid.resolution());
    let mut tri_scale: Vec<Option<Vector3<T>>> = vec![None; template.triangles.len()];
    grid.valid_texels()
        .into_iter()
        .map(|texel| {
            let e = grid.entry(texel).expect("valid texel");
            let tri = &template.triangles[e.triangle];
            let scale = match tri_scale[e.triangle] {
                Some(s) => s,
                None => {
                    let v = &template.vertices;
                    let uv = &template.uv;
                    let (du, dv) = uv_gradients(
                        [&v[tri[0]], &v[tri[1]], &v[tri[2]]],
                        [&uv[tri[0]], &uv[tri[1]], &uv[tri[2]]],
                    )
                    .ok_or(Error::DegenerateUv(e.triangle))?;
                    let sx = du.norm() / two_w;
                    let sy = dv.norm() / two_w;
                    let s = Vector3::new(sx, sy, thickness * (sx + sy) / T::lit(2.0));
                    tri_scale[e.triangle] = Some(s);
                    s
                }
            };
            Ok(PrimitiveBasis {
                texel,
                position: interpolate(&posed.vertices, tri, &e.barycentric),
                orientation: posed.triangle_frames[e.triangle],
                scale,
            })
        })
        .collect()
}

/// `t = dt + t^`, `R = exp(dR) R^`, `s = max(ds + s^, floor)`.
pub fn apply_correctives<T: Real>(
    basis: &[PrimitiveBasis<T>],
    corr: &[Correctives<T>],
    payload: Payloads<T>,
) -> Result<PrimitiveSet<T>> {
    if basis.len() != corr.len() {
        return Err(Error::Shape(format!(
            "{} basis entries, {} correctives",
            basis.len(),
            corr.len()
        )));
    }
    let floor = T::lit(SCALE_FLOOR);
    let mut clamped = 0;
    let primitives = basis
        .iter()
        .zip(corr)
        .map(|(b, c)| {
            let raw = b.scale + c.delta_scale;
            let scale = raw.map(|s| {
                if s < floor {
                    clamped += 1;
                    floor
                } else {
                    s
                }
            });
            Primitive {
                position: b.position + c.delta_position,
                rotation: exp_so3(&c.delta_rotation) * b.orientation,
                scale,
            }
        })
        .collect();
    let texels = basis.iter().map(|b| b.texel).collect();
    let mut set = PrimitiveSet::new(primitives, texels, payload)?;
    set.clamped_scales = clamped;
    Ok(set)
}

/// Gradient of a loss w.r.t. one primitive's placement.
///
/// `rotation` is w.r.t. a left perturbation `R -> exp(w) R` at `w = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacementGrad<T: Real> {
    pub position: Vector3<T>,
    pub rotation: Vector3<T>,
    pub scale: Vector3<T>,
}

impl<T: Real> Default for PlacementGrad<T> {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Vector3::zeros(),
            scale: Vector3::zeros(),
        }
    }
}

impl<T: Real> PlacementGrad<T> {
    pub fn add(&mut self, o: &Self) {
        self.position += o.position;
        self.rotation += o.rotation;
        self.scale += o.scale;
    }
}

/// Adjoint of [`apply_correctives`] w.r.t. the correctives.
pub fn apply_correctives_backward<T: Real>(
    basis: &[PrimitiveBasis<T>],
    corr: &[Correctives<T>],
    grads: &[PlacementGrad<T>],
) -> Vec<Correctives<T>> {
    let floor = T::lit(SCALE_FLOOR);
    basis
        .iter()
        .zip(corr)
        .zip(grads)
        .map(|((b, c), g)| {
            let raw = b.scale + c.delta_scale;
            Correctives {
                delta_position: g.position,
                delta_rotation: left_jacobian_so3(&c.delta_rotation).transpose() * g.rotation,
                delta_scale: Vector3::from_fn(|i, _| if raw[i] < floor { T::zero() } else { g.scale[i] }),
            }
        })
        .collect()
}
