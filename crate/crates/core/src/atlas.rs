//! Texel grid over UV space, multi-view texture unwrapping and UV warping.
//!
//! Texel `(i, j)` has UV center `((i + 0.5) / W, (j + 0.5) / W)` and flat index
//! `j * W + i`. Every downstream feature map and the primitive set use this order.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::lbs::{PosedMesh, TemplateMesh};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexelEntry<T: Real> {
    pub triangle: usize,
    pub barycentric: Vector3<T>,
}

#[derive(Clone, Debug)]
pub struct TexelGrid<T: Real> {
    resolution: usize,
    entries: Vec<Option<TexelEntry<T>>>,
}

impl<T: Real> TexelGrid<T> {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, texel: usize) -> Option<&TexelEntry<T>> {
        self.entries.get(texel).and_then(|e| e.as_ref())
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.is_some()).collect()
    }

    /// Flat indices of valid texels in increasing order.
    pub fn valid_texels(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|_| i))
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn texel_center(&self, texel: usize) -> Vector2<T> {
        let w = T::of_usize(self.resolution);
        let half = T::lit(0.5);
        Vector2::new(
            (T::of_usize(texel % self.resolution) + half) / w,
            (T::of_usize(texel / self.resolution) + half) / w,
        )
    }
}

fn barycentric_2d<T: Real>(p: &Vector2<T>, a: &Vector2<T>, b: &Vector2<T>, c: &Vector2<T>) -> Option<Vector3<T>> {
    let v0 = b - a;
    let v1 = c - a;
    let v2 = p - a;
    let det = v0.x * v1.y - v1.x * v0.y;
    if det.abs() < T::lit(1e-18) {
        return None;
    }
    let l1 = (v2.x * v1.y - v1.x * v2.y) / det;
    let l2 = (v0.x * v2.y - v2.x * v0.y) / det;
    Some(Vector3::new(T::one() - l1 - l2, l1, l2))
}

/// Maps every texel center to the lowest-indexed triangle whose UV footprint contains it.
pub fn build_texel_grid<T: Real>(template: &TemplateMesh<T>, resolution: usize) -> Result<TexelGrid<T>> {
    if resolution == 0 {
        return Err(Error::Invalid("texel grid resolution must be positive".into()));
    }
    let w = resolution;
    let wf = T::of_usize(w);
    let eps = T::lit(-1e-12);
    let mut entries: Vec<Option<TexelEntry<T>>> = vec![None; w * w];
    for (ti, tri) in template.triangles.iter().enumerate() {
        let (a, b, c) = (&template.uv[tri[0]], &template.uv[tri[1]], &template.uv[tri[2]]);
        let lo = a.inf(b).inf(c);
        let hi = a.sup(b).sup(c);
        // texel centers (i + 0.5) / W inside [lo, hi]
        let range = |l: T, h: T| {
            let i0 = ((l * wf - T::lit(0.5)).ceil().as_f64().max(0.0)) as usize;
            let i1 = ((h * wf - T::lit(0.5)).floor().as_f64()).min((w - 1) as f64);
            (i0, i1)
        };
        let (i0, i1) = range(lo.x, hi.x);
        let (j0, j1) = range(lo.y, hi.y);
        if i1 < 0.0 || j1 < 0.0 {
            continue;
        }
        for j in j0..=(j1 as usize) {
            for i in i0..=(i1 as usize) {
                let idx = j * w + i;
                if entries[idx].is_some() {
                    continue;
                }
                let p = Vector2::new(
                    (T::of_usize(i) + T::lit(0.5)) / wf,
                    (T::of_usize(j) + T::lit(0.5)) / wf,
                );
                let Some(l) = barycentric_2d(&p, a, b, c) else {
                    continue;
                };
                if l.x >= eps && l.y >= eps && l.z >= eps {
                    let l = l.map(|x| x.max(T::zero()));
                    let s = l.x + l.y + l.z;
                    entries[idx] = Some(TexelEntry {
                        triangle: ti,
                        barycentric: l / s,
                    });
                }
            }
        }
    }
    if entries.iter().all(|e| e.is_none()) {
        return Err(Error::EmptyAtlas);
    }
    Ok(TexelGrid { resolution, entries })
}

/// Barycentric interpolation of the owning posed triangle.
pub fn texel_surface_point<T: Real>(
    grid: &TexelGrid<T>,
    template: &TemplateMesh<T>,
    posed: &PosedMesh<T>,
    texel: usize,
) -> Result<Vector3<T>> {
    let e = grid.entry(texel).ok_or(Error::InvalidTexel(texel))?;
    Ok(interpolate(&posed.vertices, &template.triangles[e.triangle], &e.barycentric))
}

#[inline]
pub(crate) fn interpolate<T: Real>(v: &[Vector3<T>], tri: &[usize; 3], b: &Vector3<T>) -> Vector3<T> {
    v[tri[0]] * b.x + v[tri[1]] * b.y + v[tri[2]] * b.z
}

/// Each valid texel takes the value of its owning triangle; invalid texels take 0.
pub fn warp_to_uv<T: Real>(per_triangle: &[T], grid: &TexelGrid<T>) -> Vec<T> {
    grid.entries
        .iter()
        .map(|e| e.as_ref().map_or(T::zero(), |e| per_triangle[e.triangle]))
        .collect()
}

/// Multi-view texture in UV space; `data` is planar `C x R x R`.
#[derive(Clone, Debug, PartialEq)]
pub struct UvImage<T> {
    pub channels: usize,
    pub resolution: usize,
    pub data: Vec<T>,
    /// Number of views that contributed to each texel.
    pub weight: Vec<T>,
}

impl<T: Real> UvImage<T> {
    pub fn zeros(channels: usize, resolution: usize) -> Self {
        Self {
            channels,
            resolution,
            data: vec![T::zero(); channels * resolution * resolution],
            weight: vec![T::zero(); resolution * resolution],
        }
    }

    /// Planar data as an interleaved image (texel row `j` is image row `j`).
    pub fn to_image(&self) -> Image<T> {
        let n = self.resolution * self.resolution;
        let mut img = Image::new(self.resolution, self.resolution, self.channels);
        for t in 0..n {
            for c in 0..self.channels {
                img.data[t * self.channels + c] = self.data[c * n + t];
            }
        }
        img
    }

    pub fn weight_image(&self) -> Image<T> {
        Image {
            width: self.resolution,
            height: self.resolution,
            channels: 1,
            data: self.weight.clone(),
        }
    }

    pub fn from_images(color: &Image<T>, weight: &Image<T>) -> Result<Self> {
        if color.width != color.height || weight.width != color.width || weight.height != color.height || weight.channels != 1 {
            return Err(Error::Shape("uv image and weight map must be square and matching".into()));
        }
        let n = color.width * color.height;
        let mut data = vec![T::zero(); n * color.channels];
        for t in 0..n {
            for c in 0..color.channels {
                data[c * n + t] = color.data[t * color.channels + c];
            }
        }
        Ok(Self {
            channels: color.channels,
            resolution: color.width,
            data,
            weight: weight.data.clone(),
        })
    }
}

/// Un-normalized single-view contribution: summed color and hit count per texel.
#[derive(Clone, Debug, PartialEq)]
pub struct UvAccumulation<T> {
    pub channels: usize,
    pub resolution: usize,
    pub sum: Vec<T>,
    pub weight: Vec<T>,
}

impl<T: Real> UvAccumulation<T> {
    pub fn zeros(channels: usize, resolution: usize) -> Self {
        Self {
            channels,
            resolution,
            sum: vec![T::zero(); channels * resolution * resolution],
            weight: vec![T::zero(); resolution * resolution],
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += *b);
        self.weight.iter_mut().zip(&other.weight).for_each(|(a, b)| *a += *b);
    }

    /// Average color per texel; texels nobody saw stay zero.
    pub fn normalize(&self) -> UvImage<T> {
        let n = self.resolution * self.resolution;
        let mut data = self.sum.clone();
        for c in 0..self.channels {
            for t in 0..n {
                let w = self.weight[t];
                data[c * n + t] = if w > T::zero() { data[c * n + t] / w } else { T::zero() };
            }
        }
        UvImage {
            channels: self.channels,
            resolution: self.resolution,
            data,
            weight: self.weight.clone(),
        }
    }
}

/// Occlusion queries against a posed triangle mesh.
pub struct Occluder<'a, T: Real> {
    vertices: &'a [Vector3<T>],
    triangles: &'a [[usize; 3]],
    tolerance: T,
}

impl<'a, T: Real> Occluder<'a, T> {
    /// `tolerance` defaults to `1e-3` of the posed bounding box diagonal.
    pub fn new(posed: &'a PosedMesh<T>, template: &'a TemplateMesh<T>) -> Self {
        Self {
            vertices: &posed.vertices,
            triangles: &template.triangles,
            tolerance: posed.diagonal() * T::lit(1e-3),
        }
    }

    /// True when nothing blocks the segment from `eye` to `p` (up to the tolerance).
    pub fn visible(&self, eye: &Vector3<T>, p: &Vector3<T>) -> bool {
        let d = p - eye;
        let dist = d.norm();
        if dist <= self.tolerance {
            return true;
        }
        let dir = d / dist;
        let limit = dist - self.tolerance;
        !self.triangles.iter().any(|tri| {
            ray_triangle(eye, &dir, &self.vertices[tri[0]], &self.vertices[tri[1]], &self.vertices[tri[2]])
                .is_some_and(|t| t > T::zero() && t < limit)
        })
    }
}

/// Moller-Trumbore, two-sided.
fn ray_triangle<T: Real>(o: &Vector3<T>, d: &Vector3<T>, a: &Vector3<T>, b: &Vector3<T>, c: &Vector3<T>) -> Option<T> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < T::lit(1e-14) {
        return None;
    }
    let inv = T::one() / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if u < T::zero() || u > T::one() {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < T::zero() || u + v > T::one() {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Back-projects one view onto the texels of `grid`.
///
/// A texel contributes when its posed surface point projects inside the image,
/// faces the camera and is not occluded by the posed mesh.
pub fn unwrap_view<T: Real>(
    posed: &PosedMesh<T>,
    template: &TemplateMesh<T>,
    grid: &TexelGrid<T>,
    camera: &Camera<T>,
    image: &Image<T>,
) -> Result<UvAccumulation<T>> {
    if image.width != camera.width || image.height != camera.height {
        return Err(Error::Shape(format!(
            "image {}x{} does not match camera {}x{}",
            image.width, image.height, camera.width, camera.height
        )));
    }
    let res = grid.resolution();
    let n = res * res;
    let channels = image.channels;
    let occluder = Occluder::new(posed, template);
    let eye = camera.center();
    let samples: Vec<Option<Vec<T>>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let e = grid.entry(t)?;
            let tri = &template.triangles[e.triangle];
            let p = interpolate(&posed.vertices, tri, &e.barycentric);
            if (eye - p).dot(&posed.triangle_normals[e.triangle]) <= T::zero() {
                return None;
            }
            let (px, _) = camera.project(&p)?;
            let mut color = vec![T::zero(); channels];
            if !image.sample_bilinear(px.x, px.y, &mut color) {
                return None;
            }
            occluder.visible(&eye, &p).then_some(color)
        })
        .collect();
    let mut acc = UvAccumulation::zeros(channels, res);
    for (t, s) in samples.into_iter().enumerate() {
        if let Some(color) = s {
            acc.weight[t] = T::one();
            for (c, v) in color.into_iter().enumerate() {
                acc.sum[c * n + t] = v;
            }
        }
    }
    Ok(acc)
}

/// Average of all views' back-projections at an `R x R` texel grid.
pub fn unwrap_views<T: Real>(
    posed: &PosedMesh<T>,
    template: &TemplateMesh<T>,
    cameras: &[Camera<T>],
    images: &[Image<T>],
    resolution: usize,
) -> Result<UvImage<T>> {
    let grid = build_texel_grid(template, resolution)?;
    unwrap_views_on_grid(posed, template, &grid, cameras, images)
}

pub fn unwrap_views_on_grid<T: Real>(
    posed: &PosedMesh<T>,
    template: &TemplateMesh<T>,
    grid: &TexelGrid<T>,
    cameras: &[Camera<T>],
    images: &[Image<T>],
) -> Result<UvImage<T>> {
    if cameras.len() != images.len() {
        return Err(Error::Shape(format!(
            "{} cameras but {} images",
            cameras.len(),
            images.len()
        )));
    }
    let channels = images.first().map_or(3, |i| i.channels);
    let mut acc = UvAccumulation::zeros(channels, grid.resolution());
    for (cam, img) in cameras.iter().zip(images) {
        if img.channels != channels {
            return Err(Error::Shape("images disagree on channel count".into()));
        }
        acc.add(&unwrap_view(posed, template, grid, cam, img)?);
    }
    Ok(acc.normalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(u_max: f64) -> TemplateMesh<f64> {
        TemplateMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![
                Vector2::new(0.0, 0.0),
                Vector2::new(u_max, 0.0),
                Vector2::new(u_max, 1.0),
                Vector2::new(0.0, 1.0),
            ],
            vec![vec![(0, 1.0)]; 4],
        )
        .unwrap()
    }

    #[test]
    fn full_quad_covers_every_texel() {
        let g = build_texel_grid(&quad(1.0), 2).unwrap();
        assert_eq!(g.valid_count(), 4);
        for t in 0..4 {
            let b = g.entry(t).unwrap().barycentric;
            assert!((b.sum() - 1.0).abs() < 1e-12 && b.min() >= 0.0);
        }
    }

    #[test]
    fn half_quad_leaves_right_column_invalid() {
        let g = build_texel_grid(&quad(0.5), 2).unwrap();
        assert_eq!(g.valid_mask(), vec![true, false, true, false]);
    }

    #[test]
    fn zero_resolution_and_empty_atlas_fail() {
        assert!(build_texel_grid(&quad(1.0), 0).is_err());
        let mut m = quad(1.0);
        for p in &mut m.uv {
            p.x *= 0.01;
            p.y *= 0.01;
        }
        assert!(matches!(build_texel_grid(&m, 4), Err(Error::EmptyAtlas)));
    }

    #[test]
    fn shared_edge_goes_to_lowest_triangle() {
        // texel centers on the diagonal of the quad at W=2
        let g = build_texel_grid(&quad(1.0), 2).unwrap();
        assert_eq!(g.entry(0).unwrap().triangle, 0);
        assert_eq!(g.entry(3).unwrap().triangle, 0);
    }

    #[test]
    fn warp_one_hot() {
        let g = build_texel_grid(&quad(1.0), 4).unwrap();
        let w = warp_to_uv(&[0.0, 2.0], &g);
        for (t, v) in w.iter().enumerate() {
            assert_eq!(*v != 0.0, g.entry(t).unwrap().triangle == 1);
        }
    }

    #[test]
    fn surface_point_vertex_and_centroid() {
        let m = quad(1.0);
        let posed = m.rest_posed().unwrap();
        let mut g = build_texel_grid(&m, 2).unwrap();
        g.entries[0] = Some(TexelEntry { triangle: 1, barycentric: Vector3::new(1.0, 0.0, 0.0) });
        assert_eq!(texel_surface_point(&g, &m, &posed, 0).unwrap(), m.vertices[0]);
        let third = 1.0 / 3.0;
        g.entries[0] = Some(TexelEntry { triangle: 1, barycentric: Vector3::new(third, third, third) });
        let c = texel_surface_point(&g, &m, &posed, 0).unwrap();
        assert!((c - posed.centroid(&[0, 2, 3])).norm() < 1e-15);
        g.entries[1] = None;
        assert!(matches!(texel_surface_point(&g, &m, &posed, 1), Err(Error::InvalidTexel(1))));
    }
}
