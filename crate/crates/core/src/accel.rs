//! Ray/primitive intersection: oriented slab test and a uniform grid over primitive AABBs.

use nalgebra::Vector3;

use crate::camera::{Ray, SceneBounds};
use crate::primitives::{Primitive, PrimitiveSet};
use crate::scalar::Real;

/// One primitive crossed by a ray, with its entry/exit parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit<T: Real> {
    pub primitive: usize,
    pub t_enter: T,
    pub t_exit: T,
}

/// Slab test of `ray` against the primitive's local cube `[-1, 1]^3`,
/// clipped to the ray's `[t_min, t_max]`.
pub fn slab_interval<T: Real>(ray: &Ray<T>, prim: &Primitive<T>) -> Option<(T, T)> {
    let rt = prim.rotation.transpose();
    let o = (rt * (ray.origin - prim.position)).component_div(&prim.scale);
    let d = (rt * ray.direction).component_div(&prim.scale);
    let mut t0 = ray.t_min;
    let mut t1 = ray.t_max;
    for a in 0..3 {
        if d[a] == T::zero() {
            if o[a].abs() > T::one() {
                return None;
            }
            continue;
        }
        let inv = T::one() / d[a];
        let mut ta = (-T::one() - o[a]) * inv;
        let mut tb = (T::one() - o[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

fn sort_hits<T: Real>(hits: &mut [Hit<T>]) {
    hits.sort_by(|a, b| {
        a.t_enter
            .partial_cmp(&b.t_enter)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.primitive.cmp(&b.primitive))
    });
}

/// Reference intersection against every primitive.
pub fn intersect_brute_force<T: Real>(ray: &Ray<T>, set: &PrimitiveSet<T>) -> Vec<Hit<T>> {
    let mut hits: Vec<Hit<T>> = set
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            slab_interval(ray, p).map(|(t_enter, t_exit)| Hit {
                primitive: i,
                t_enter,
                t_exit,
            })
        })
        .collect();
    sort_hits(&mut hits);
    hits
}

/// Uniform world-space grid; each cell lists the primitives whose AABB overlaps it.
#[derive(Clone, Debug)]
pub struct UniformGrid<T: Real> {
    lo: Vector3<T>,
    cell: Vector3<T>,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
    bounds: Option<SceneBounds<T>>,
}

impl<T: Real> UniformGrid<T> {
    pub fn build(set: &PrimitiveSet<T>) -> Self {
        let n = set.len();
        if n == 0 {
            return Self {
                lo: Vector3::zeros(),
                cell: Vector3::repeat(T::one()),
                dims: [1, 1, 1],
                cells: vec![Vec::new()],
                bounds: None,
            };
        }
        let boxes: Vec<(Vector3<T>, Vector3<T>)> = set
            .primitives
            .iter()
            .map(|p| {
                let h = p.aabb_half_extents();
                (p.position - h, p.position + h)
            })
            .collect();
        let mut lo = boxes[0].0;
        let mut hi = boxes[0].1;
        for (a, b) in &boxes {
            lo = lo.inf(a);
            hi = hi.sup(b);
        }
        let extent = hi - lo;
        let pad = extent.max() * T::lit(1e-6) + T::lit(1e-12);
        lo -= Vector3::repeat(pad);
        hi += Vector3::repeat(pad);
        let extent = hi - lo;
        // about two primitives per cell along the densest axis
        let target = (T::of_usize(n).cbrt() * T::lit(2.0)).max(T::one());
        let longest = extent.max();
        let mut dims = [1usize; 3];
        for a in 0..3 {
            let d = (target * extent[a] / longest).ceil().as_f64();
            dims[a] = (d as usize).clamp(1, 128);
        }
        let cell = Vector3::new(
            extent.x / T::of_usize(dims[0]),
            extent.y / T::of_usize(dims[1]),
            extent.z / T::of_usize(dims[2]),
        );
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, (a, b)) in boxes.iter().enumerate() {
            let c0 = cell_coords(&(a - Vector3::repeat(pad)), &lo, &cell, &dims);
            let c1 = cell_coords(&(b + Vector3::repeat(pad)), &lo, &cell, &dims);
            for z in c0[2]..=c1[2] {
                for y in c0[1]..=c1[1] {
                    for x in c0[0]..=c1[0] {
                        cells[(z * dims[1] + y) * dims[0] + x].push(i as u32);
                    }
                }
            }
        }
        Self {
            lo,
            cell,
            dims,
            cells,
            bounds: Some(scene_bounds(set)),
        }
    }

    /// Bounding sphere of all primitives, padded by 1%.
    pub fn bounds(&self) -> Option<&SceneBounds<T>> {
        self.bounds.as_ref()
    }

    fn hi(&self) -> Vector3<T> {
        self.lo
            + Vector3::new(
                self.cell.x * T::of_usize(self.dims[0]),
                self.cell.y * T::of_usize(self.dims[1]),
                self.cell.z * T::of_usize(self.dims[2]),
            )
    }

    /// Candidate primitive indices along the ray (superset of the true hits, deduplicated).
    pub fn candidates(&self, ray: &Ray<T>, out: &mut Vec<u32>) {
        out.clear();
        if self.bounds.is_none() {
            return;
        }
        let lo = self.lo;
        let hi = self.hi();
        let mut t0 = ray.t_min;
        let mut t1 = ray.t_max;
        for a in 0..3 {
            let d = ray.direction[a];
            if d == T::zero() {
                if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                    return;
                }
                continue;
            }
            let mut ta = (lo[a] - ray.origin[a]) / d;
            let mut tb = (hi[a] - ray.origin[a]) / d;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t0 > t1 {
            return;
        }
        let p = ray.at(t0);
        let mut c = cell_coords(&p, &lo, &self.cell, &self.dims);
        let mut step = [0isize; 3];
        let mut t_next = [T::max_value().unwrap(); 3];
        let mut t_delta = [T::max_value().unwrap(); 3];
        for a in 0..3 {
            let d = ray.direction[a];
            if d > T::zero() {
                step[a] = 1;
                let boundary = lo[a] + self.cell[a] * T::of_usize(c[a] + 1);
                t_next[a] = t0 + (boundary - p[a]) / d;
                t_delta[a] = self.cell[a] / d;
            } else if d < T::zero() {
                step[a] = -1;
                let boundary = lo[a] + self.cell[a] * T::of_usize(c[a]);
                t_next[a] = t0 + (boundary - p[a]) / d;
                t_delta[a] = -self.cell[a] / d;
            }
        }
        loop {
            out.extend_from_slice(&self.cells[(c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]]);
            let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            if t_next[a] > t1 {
                break;
            }
            let nc = c[a] as isize + step[a];
            if nc < 0 || nc >= self.dims[a] as isize {
                break;
            }
            c[a] = nc as usize;
            t_next[a] += t_delta[a];
        }
        out.sort_unstable();
        out.dedup();
    }
}

fn cell_coords<T: Real>(p: &Vector3<T>, lo: &Vector3<T>, cell: &Vector3<T>, dims: &[usize; 3]) -> [usize; 3] {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let f = ((p[a] - lo[a]) / cell[a]).floor().as_f64();
        c[a] = if f.is_nan() || f < 0.0 {
            0
        } else {
            (f as usize).min(dims[a] - 1)
        };
    }
    c
}

/// Sphere enclosing every primitive's bounding sphere, radius padded by 1%.
pub fn scene_bounds<T: Real>(set: &PrimitiveSet<T>) -> SceneBounds<T> {
    let mut lo = Vector3::repeat(T::max_value().unwrap());
    let mut hi = -lo;
    for p in &set.primitives {
        let r = Vector3::repeat(p.bounding_radius());
        lo = lo.inf(&(p.position - r));
        hi = hi.sup(&(p.position + r));
    }
    let center = (lo + hi) / T::lit(2.0);
    let radius = set
        .primitives
        .iter()
        .map(|p| (p.position - center).norm() + p.bounding_radius())
        .fold(T::zero(), |a, b| a.max(b));
    SceneBounds {
        center,
        radius: radius * T::lit(1.01),
    }
}

/// Every primitive whose box the ray crosses within `[t_min, t_max]`, sorted by entry.
pub fn intersect_primitives<T: Real>(ray: &Ray<T>, set: &PrimitiveSet<T>, accel: &UniformGrid<T>) -> Vec<Hit<T>> {
    let mut cand = Vec::new();
    let mut hits = Vec::new();
    intersect_into(ray, set, accel, &mut cand, &mut hits);
    hits
}

pub(crate) fn intersect_into<T: Real>(
    ray: &Ray<T>,
    set: &PrimitiveSet<T>,
    accel: &UniformGrid<T>,
    cand: &mut Vec<u32>,
    hits: &mut Vec<Hit<T>>,
) {
    hits.clear();
    accel.candidates(ray, cand);
    for &i in cand.iter() {
        let i = i as usize;
        if let Some((t_enter, t_exit)) = slab_interval(ray, &set.primitives[i]) {
            hits.push(Hit {
                primitive: i,
                t_enter,
                t_exit,
            });
        }
    }
    sort_hits(hits);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::Payloads;
    use nalgebra::Matrix3;

    #[test]
    fn axis_aligned_unit_box() {
        let prim = Primitive {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
            scale: Vector3::repeat(1.0),
        };
        let ray = Ray::new(Vector3::new(-2.0, 0.0, 0.0), Vector3::x(), 0.0, 100.0);
        assert_eq!(slab_interval(&ray, &prim), Some((1.0, 3.0)));
        let miss = Ray::new(Vector3::new(-2.0, 1.5, 0.0), Vector3::x(), 0.0, 100.0);
        assert_eq!(slab_interval(&miss, &prim), None);
        let set = PrimitiveSet::new(vec![prim], vec![0], Payloads::zeros(1, 1)).unwrap();
        let grid = UniformGrid::build(&set);
        assert!(intersect_primitives(&miss, &set, &grid).is_empty());
        let h = intersect_primitives(&ray, &set, &grid);
        assert_eq!(h.len(), 1);
        assert_eq!((h[0].t_enter, h[0].t_exit), (1.0, 3.0));
    }

    #[test]
    fn empty_set_has_no_hits() {
        let set = PrimitiveSet::<f64>::new(vec![], vec![], Payloads::zeros(0, 2)).unwrap();
        let grid = UniformGrid::build(&set);
        let ray = Ray::new(Vector3::zeros(), Vector3::x(), 0.0, 10.0);
        assert!(intersect_primitives(&ray, &set, &grid).is_empty());
    }
}
