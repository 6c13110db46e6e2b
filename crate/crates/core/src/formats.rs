//! On-disk formats: OBJ meshes, skeleton/pose/camera JSON, and the float32 binaries
//! for primitive sets and decoder parameters (each with a JSON manifest beside it).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::atlas::UvImage;
use crate::camera::{Camera, CameraJson};
use crate::error::{Error, Result};
use crate::features::{DecoderParams, DecoderShape};
use crate::imaging::{read_pfm, write_pfm};
use crate::lbs::{Pose, RigidTransform, Skeleton, TemplateMesh};
use crate::primitives::{Payloads, Primitive, PrimitiveSet};
use crate::rotation::{exp_so3, log_so3, matrix_to_quat, quat_to_matrix};
use crate::scalar::Real;

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Manifest path paired with a binary file.
pub fn manifest_path(binary: &Path) -> PathBuf {
    binary.with_extension("json")
}

/// Vertices, per-vertex texture coordinates and triangles. Faces must use the same
/// index for position and texture coordinate.
pub fn write_obj<T: Real>(path: &Path, template: &TemplateMesh<T>) -> Result<()> {
    let mut s = String::new();
    for v in &template.vertices {
        writeln!(s, "v {:.9} {:.9} {:.9}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64()).expect("string write");
    }
    for t in &template.uv {
        writeln!(s, "vt {:.9} {:.9}", t.x.as_f64(), t.y.as_f64()).expect("string write");
    }
    for f in &template.triangles {
        let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
        writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}").expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Geometry of an OBJ file: positions, texture coordinates, triangles.
pub type ObjGeometry<T> = (Vec<Vector3<T>>, Vec<Vector2<T>>, Vec<[usize; 3]>);

pub fn read_obj<T: Real>(path: &Path) -> Result<ObjGeometry<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::format(path, format!("line {}: {msg}", line + 1));
    let mut verts = Vec::new();
    let mut uvs = Vec::new();
    let mut tris = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let nums = |it: std::str::SplitWhitespace, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = it.take(n).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(ln, "bad number"))?;
            if v.len() == n {
                Ok(v)
            } else {
                Err(bad(ln, "too few values"))
            }
        };
        match tag {
            "v" => {
                let v = nums(it, 3)?;
                verts.push(Vector3::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2])));
            }
            "vt" => {
                let v = nums(it, 2)?;
                uvs.push(Vector2::new(T::lit(v[0]), T::lit(v[1])));
            }
            "f" => {
                let mut idx = [0usize; 3];
                let corners: Vec<&str> = it.collect();
                if corners.len() != 3 {
                    return Err(bad(ln, "only triangles are supported"));
                }
                for (k, c) in corners.iter().enumerate() {
                    let mut parts = c.split('/');
                    let v: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad(ln, "bad face index"))?;
                    let t: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad(ln, "faces need texture indices"))?;
                    if v != t || v == 0 {
                        return Err(bad(ln, "position and texture indices must agree"));
                    }
                    idx[k] = v - 1;
                }
                tris.push(idx);
            }
            _ => {}
        }
    }
    if verts.len() != uvs.len() {
        return Err(Error::format(path, "vertex and texture coordinate counts differ"));
    }
    Ok((verts, uvs, tris))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JointJson {
    /// `-1` for the root.
    pub parent: i64,
    /// `[w, x, y, z]`.
    pub rest_rotation: [f64; 4],
    pub rest_translation: [f64; 3],
}

/// Skeleton plus per-vertex skinning weights as `[joint, weight]` pairs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkeletonJson {
    pub joints: Vec<JointJson>,
    pub weights: Vec<Vec<(usize, f64)>>,
}

pub fn skeleton_to_json<T: Real>(skel: &Skeleton<T>, template: &TemplateMesh<T>) -> SkeletonJson {
    SkeletonJson {
        joints: (0..skel.joint_count())
            .map(|j| {
                let r = skel.rest_local(j);
                let q = matrix_to_quat(&r.rotation);
                JointJson {
                    parent: skel.parent(j).map_or(-1, |p| p as i64),
                    rest_rotation: q.map(|x| x.as_f64()),
                    rest_translation: [r.translation.x.as_f64(), r.translation.y.as_f64(), r.translation.z.as_f64()],
                }
            })
            .collect(),
        weights: template
            .skin_weights
            .iter()
            .map(|w| w.iter().map(|(j, x)| (*j, x.as_f64())).collect())
            .collect(),
    }
}

/// Loads `mesh.obj` + `skeleton.json` into a template and skeleton.
pub fn read_rig<T: Real>(obj: &Path, skeleton: &Path) -> Result<(TemplateMesh<T>, Skeleton<T>)> {
    let (verts, uvs, tris) = read_obj::<T>(obj)?;
    let sj: SkeletonJson = read_json(skeleton)?;
    let parents = sj
        .joints
        .iter()
        .map(|j| match j.parent {
            -1 => Ok(None),
            p if p >= 0 => Ok(Some(p as usize)),
            _ => Err(Error::format(skeleton, "parent must be -1 or a joint index")),
        })
        .collect::<Result<Vec<_>>>()?;
    let rest = sj
        .joints
        .iter()
        .map(|j| {
            let q = j.rest_rotation.map(T::lit);
            let n = q.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt();
            if (n.as_f64() - 1.0).abs() > 1e-6 {
                return Err(Error::format(skeleton, "joint rotations must be unit quaternions"));
            }
            Ok(RigidTransform::new(
                quat_to_matrix(&q.map(|x| x / n)),
                Vector3::from(j.rest_translation.map(T::lit)),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let skel = Skeleton::new(parents, rest)?;
    let weights = sj
        .weights
        .iter()
        .map(|w| w.iter().map(|(j, x)| (*j, T::lit(*x))).collect())
        .collect();
    let template = TemplateMesh::new(verts, tris, uvs, weights)?;
    if template.max_joint().is_some_and(|j| j >= skel.joint_count()) {
        return Err(Error::format(skeleton, "skin weight refers to a missing joint"));
    }
    Ok((template, skel))
}

pub fn write_rig<T: Real>(obj: &Path, skeleton: &Path, template: &TemplateMesh<T>, skel: &Skeleton<T>) -> Result<()> {
    write_obj(obj, template)?;
    write_json(skeleton, &skeleton_to_json(skel, template))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseJson {
    /// One `[w, x, y, z]` per joint.
    pub rotations: Vec<[f64; 4]>,
    pub root_translation: [f64; 3],
}

pub fn pose_to_json<T: Real>(pose: &Pose<T>) -> PoseJson {
    PoseJson {
        rotations: (0..pose.joint_count()).map(|j| pose.quaternion(j).map(|x| x.as_f64())).collect(),
        root_translation: [
            pose.root_translation.x.as_f64(),
            pose.root_translation.y.as_f64(),
            pose.root_translation.z.as_f64(),
        ],
    }
}

pub fn read_pose<T: Real>(path: &Path) -> Result<Pose<T>> {
    let pj: PoseJson = read_json(path)?;
    let rots: Vec<[T; 4]> = pj.rotations.iter().map(|q| q.map(T::lit)).collect();
    Pose::new(&rots, Vector3::from(pj.root_translation.map(T::lit))).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_camera<T: Real>(path: &Path) -> Result<Camera<T>> {
    let cj: CameraJson = read_json(path)?;
    Camera::from_json(&cj).map_err(|e| Error::format(path, e.to_string()))
}

fn push_f32<T: Real>(out: &mut Vec<u8>, values: impl IntoIterator<Item = T>) {
    for v in values {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated binary"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes in binary"));
        }
        Ok(())
    }
}

/// Manifest written beside every parameter binary.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamsManifest {
    Primitives(PrimitivesManifest),
    Decoder(DecoderManifest),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PrimitivesManifest {
    #[serde(rename = "K")]
    pub count: usize,
    #[serde(rename = "S")]
    pub voxels: usize,
    #[serde(rename = "W")]
    pub resolution: usize,
    pub texel_indices: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecoderManifest {
    #[serde(rename = "C_theta")]
    pub pose_channels: usize,
    #[serde(rename = "C_I")]
    pub image_channels: usize,
    #[serde(rename = "S")]
    pub voxels: usize,
    #[serde(rename = "W")]
    pub resolution: usize,
    pub texel_count: usize,
    pub sigma_m: f64,
    /// Unprojected pose channels (columns of the projection).
    pub pose_inputs: usize,
    pub texel_indices: Vec<usize>,
}

/// Binary layout: `u32 K`, `u32 S`, `K x 9` placements `(t, axis-angle, s)`, all opacity, all rgb.
pub fn encode_primitives<T: Real>(set: &PrimitiveSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.payload.voxels as u32).to_le_bytes());
    for p in &set.primitives {
        let w = log_so3(&p.rotation);
        push_f32(&mut out, p.position.iter().chain(w.iter()).chain(p.scale.iter()).copied());
    }
    push_f32(&mut out, set.payload.alpha.iter().copied());
    push_f32(&mut out, set.payload.rgb.iter().copied());
    out
}

pub fn write_primitives<T: Real>(path: &Path, set: &PrimitiveSet<T>, resolution: usize) -> Result<()> {
    fs::write(path, encode_primitives(set)).map_err(|e| Error::io(path, e))?;
    let manifest = ParamsManifest::Primitives(PrimitivesManifest {
        count: set.len(),
        voxels: set.payload.voxels,
        resolution,
        texel_indices: set.texels.clone(),
    });
    write_json(&manifest_path(path), &manifest)
}

pub fn read_primitives<T: Real>(path: &Path) -> Result<PrimitiveSet<T>> {
    let m = match read_json::<ParamsManifest>(&manifest_path(path))? {
        ParamsManifest::Primitives(m) => m,
        ParamsManifest::Decoder(_) => return Err(Error::format(path, "manifest describes decoder parameters")),
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let k = r.u32()? as usize;
    let s = r.u32()? as usize;
    if k != m.count || s != m.voxels || m.texel_indices.len() != k {
        return Err(Error::format(path, "binary header disagrees with manifest"));
    }
    let place: Vec<T> = r.f32s(9 * k)?;
    let n = s * s * s;
    let alpha = r.f32s(k * n)?;
    let rgb = r.f32s(3 * k * n)?;
    r.finish()?;
    let prims = place
        .chunks_exact(9)
        .map(|c| Primitive {
            position: Vector3::new(c[0], c[1], c[2]),
            rotation: exp_so3(&Vector3::new(c[3], c[4], c[5])),
            scale: Vector3::new(c[6], c[7], c[8]),
        })
        .collect();
    let payload = Payloads {
        voxels: s,
        count: k,
        alpha,
        rgb,
    };
    payload.validate().map_err(|e| Error::format(path, e.to_string()))?;
    PrimitiveSet::new(prims, m.texel_indices, payload).map_err(|e| Error::format(path, e.to_string()))
}

/// Binary layout: the six trainable tensors in order, then the row-major projection.
pub fn encode_decoder<T: Real>(params: &DecoderParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in params.tensors() {
        push_f32(&mut out, t.iter().copied());
    }
    let p = &params.pose_projection;
    push_f32(&mut out, (0..p.nrows()).flat_map(|i| (0..p.ncols()).map(move |j| p[(i, j)])));
    out
}

pub fn write_decoder<T: Real>(path: &Path, params: &DecoderParams<T>) -> Result<()> {
    fs::write(path, encode_decoder(params)).map_err(|e| Error::io(path, e))?;
    let manifest = ParamsManifest::Decoder(DecoderManifest {
        pose_channels: params.shape.pose_channels,
        image_channels: params.shape.image_channels,
        voxels: params.shape.voxels,
        resolution: params.shape.resolution,
        texel_count: params.texels.len(),
        sigma_m: params.motion_scale.as_f64(),
        pose_inputs: params.pose_projection.ncols(),
        texel_indices: params.texels.clone(),
    });
    write_json(&manifest_path(path), &manifest)
}

pub fn read_decoder<T: Real>(path: &Path) -> Result<DecoderParams<T>> {
    let m = match read_json::<ParamsManifest>(&manifest_path(path))? {
        ParamsManifest::Decoder(m) => m,
        ParamsManifest::Primitives(_) => return Err(Error::format(path, "manifest describes a primitive set")),
    };
    if m.texel_indices.len() != m.texel_count {
        return Err(Error::format(path, "texel_count disagrees with texel_indices"));
    }
    let shape = DecoderShape {
        pose_channels: m.pose_channels,
        image_channels: m.image_channels,
        voxels: m.voxels,
        resolution: m.resolution,
    };
    let mut params = DecoderParams::zeros(
        shape,
        m.texel_indices,
        T::lit(m.sigma_m),
        DMatrix::zeros(m.pose_channels, m.pose_inputs),
    );
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    for t in params.tensors_mut() {
        let n = t.len();
        *t = r.f32s(n)?;
    }
    let proj: Vec<T> = r.f32s(m.pose_channels * m.pose_inputs)?;
    r.finish()?;
    params.pose_projection = DMatrix::from_row_slice(m.pose_channels, m.pose_inputs, &proj);
    params.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(params)
}

/// Either kind of parameter file, told apart by its manifest.
pub enum ParamsFile<T: Real> {
    Primitives(PrimitiveSet<T>),
    Decoder(DecoderParams<T>),
}

pub fn read_params<T: Real>(path: &Path) -> Result<ParamsFile<T>> {
    match read_json::<ParamsManifest>(&manifest_path(path))? {
        ParamsManifest::Primitives(_) => read_primitives(path).map(ParamsFile::Primitives),
        ParamsManifest::Decoder(_) => read_decoder(path).map(ParamsFile::Decoder),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct UvHeader {
    pub channels: usize,
    pub resolution: usize,
}

/// Color PFM at `path`, header at `<stem>.json`, weight PFM at `<stem>_weight.pfm`.
pub fn write_uv_image<T: Real>(path: &Path, uv: &UvImage<T>) -> Result<()> {
    write_pfm(path, &uv.to_image())?;
    write_pfm(&weight_path(path), &uv.weight_image())?;
    write_json(
        &manifest_path(path),
        &UvHeader {
            channels: uv.channels,
            resolution: uv.resolution,
        },
    )
}

pub fn read_uv_image(path: &Path) -> Result<UvImage<f32>> {
    let header: UvHeader = read_json(&manifest_path(path))?;
    let color = read_pfm(path)?;
    let weight = read_pfm(&weight_path(path))?;
    if color.channels != header.channels || color.width != header.resolution {
        return Err(Error::format(path, "texture disagrees with its header"));
    }
    UvImage::from_images(&color, &weight).map_err(|e| Error::format(path, e.to_string()))
}

fn weight_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_weight.pfm"))
}
