//! Image, mask and volume losses with their gradients.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::primitives::PrimitiveSet;
use crate::render::RenderOutput;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub lambda_m: f64,
    pub lambda_vol: f64,
    /// Multi-scale L1 image term (off by default).
    pub lambda_ms: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            lambda_m: 0.1,
            lambda_vol: 0.01,
            lambda_ms: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rgb, self.lambda_m, self.lambda_vol, self.lambda_ms];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Invalid("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

fn check_rgb<T: Real>(render: &RenderOutput<T>, target: &Image<T>) -> Result<()> {
    if target.width != render.width || target.height != render.height || target.channels != 3 {
        return Err(Error::Shape(format!(
            "render {}x{} vs target {}x{}x{}",
            render.width, render.height, target.width, target.height, target.channels
        )));
    }
    Ok(())
}

fn check_mask<T: Real>(render: &RenderOutput<T>, mask: &Image<T>) -> Result<()> {
    if mask.width != render.width || mask.height != render.height || mask.channels != 1 {
        return Err(Error::Shape(format!(
            "render {}x{} vs mask {}x{}x{}",
            render.width, render.height, mask.width, mask.height, mask.channels
        )));
    }
    Ok(())
}

/// Mean squared error over pixels and channels, optionally weighted per pixel by `mask`.
pub fn loss_rgb<T: Real>(render: &RenderOutput<T>, target: &Image<T>, mask: Option<&Image<T>>) -> Result<T> {
    Ok(loss_rgb_grad(render, target, mask)?.0)
}

/// [`loss_rgb`] and its gradient w.r.t. `render.rgb`.
pub fn loss_rgb_grad<T: Real>(
    render: &RenderOutput<T>,
    target: &Image<T>,
    mask: Option<&Image<T>>,
) -> Result<(T, Vec<T>)> {
    check_rgb(render, target)?;
    if let Some(m) = mask {
        check_mask(render, m)?;
    }
    let weight = |p: usize| mask.map_or(T::one(), |m| m.data[p]);
    let denom = (0..render.alpha.len()).fold(T::zero(), |a, p| a + weight(p)) * T::lit(3.0);
    let mut grad = vec![T::zero(); render.rgb.len()];
    if denom <= T::zero() {
        return Ok((T::zero(), grad));
    }
    let mut sum = T::zero();
    for (i, (r, t)) in render.rgb.iter().zip(&target.data).enumerate() {
        let w = weight(i / 3);
        let d = *r - *t;
        sum += w * d * d;
        grad[i] = T::lit(2.0) * w * d / denom;
    }
    Ok((sum / denom, grad))
}

/// Mean absolute error between accumulated opacity and a silhouette.
pub fn loss_mask<T: Real>(render: &RenderOutput<T>, silhouette: &Image<T>) -> Result<T> {
    Ok(loss_mask_grad(render, silhouette)?.0)
}

/// [`loss_mask`] and its (sign) subgradient w.r.t. `render.alpha`; zero at ties.
pub fn loss_mask_grad<T: Real>(render: &RenderOutput<T>, silhouette: &Image<T>) -> Result<(T, Vec<T>)> {
    check_mask(render, silhouette)?;
    let n = T::of_usize(render.alpha.len().max(1));
    let mut sum = T::zero();
    let grad = render
        .alpha
        .iter()
        .zip(&silhouette.data)
        .map(|(a, s)| {
            let d = *a - *s;
            sum += d.abs();
            if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Mean box volume `prod(2 s)` over primitives.
pub fn loss_vol<T: Real>(set: &PrimitiveSet<T>) -> T {
    loss_vol_grad(set).0
}

/// [`loss_vol`] and its gradient w.r.t. each primitive's scale.
pub fn loss_vol_grad<T: Real>(set: &PrimitiveSet<T>) -> (T, Vec<Vector3<T>>) {
    if set.is_empty() {
        return (T::zero(), Vec::new());
    }
    let k = T::of_usize(set.len());
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let grad = set
        .primitives
        .iter()
        .map(|p| {
            let s = p.scale;
            sum += two * s.x * two * s.y * two * s.z;
            Vector3::new(
                T::lit(8.0) * s.y * s.z,
                T::lit(8.0) * s.x * s.z,
                T::lit(8.0) * s.x * s.y,
            ) / k
        })
        .collect();
    (sum / k, grad)
}

/// Number of pyramid levels in the multi-scale L1 term.
pub const PYRAMID_LEVELS: usize = 3;

/// 2x2 box downsample of an interleaved image (odd trailing row/column dropped).
fn half<T: Real>(data: &[T], w: usize, h: usize, c: usize) -> (Vec<T>, usize, usize) {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![T::zero(); w2 * h2 * c];
    for y in 0..h2 {
        for x in 0..w2 {
            for ch in 0..c {
                let mut acc = T::zero();
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    acc += data[((2 * y + dy) * w + 2 * x + dx) * c + ch];
                }
                out[(y * w2 + x) * c + ch] = acc * T::lit(0.25);
            }
        }
    }
    (out, w2, h2)
}

/// Mean over pyramid levels of the per-level mean absolute rgb error.
pub fn loss_multiscale_l1_grad<T: Real>(render: &RenderOutput<T>, target: &Image<T>) -> Result<(T, Vec<T>)> {
    check_rgb(render, target)?;
    let mut a = render.rgb.clone();
    let mut b = target.data.clone();
    let (mut w, mut h) = (render.width, render.height);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); a.len()];
    let mut levels = 0;
    // level l pixel (x, y) averages a 2^l block of the full image
    for level in 0..PYRAMID_LEVELS {
        if w == 0 || h == 0 {
            break;
        }
        levels += 1;
        let n = T::of_usize(w * h * 3);
        let f = 1usize << level;
        let share = T::one() / T::of_usize(f * f);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    let d = a[i] - b[i];
                    total += d.abs() / n;
                    let s = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    if s == T::zero() {
                        continue;
                    }
                    for yy in y * f..(y + 1) * f {
                        for xx in x * f..(x + 1) * f {
                            grad[(yy * render.width + xx) * 3 + c] += s * share / n;
                        }
                    }
                }
            }
        }
        let (a2, w2, h2) = half(&a, w, h, 3);
        let (b2, _, _) = half(&b, w, h, 3);
        a = a2;
        b = b2;
        w = w2;
        h = h2;
    }
    let l = T::of_usize(levels.max(1));
    grad.iter_mut().for_each(|g| *g /= l);
    Ok((total / l, grad))
}

/// Per-term values of the composite loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub rgb: f64,
    pub mask: f64,
    pub vol: f64,
    pub ms: f64,
}

pub struct CompositeLoss<T: Real> {
    pub total: T,
    pub terms: LossTerms,
    /// Per-view gradient w.r.t. rendered rgb.
    pub rgb_grads: Vec<Vec<T>>,
    /// Per-view gradient w.r.t. rendered alpha.
    pub alpha_grads: Vec<Vec<T>>,
    /// Gradient w.r.t. each primitive's scale.
    pub scale_grads: Vec<Vector3<T>>,
}

/// `l_rgb L_rgb + l_m L_m + l_ms L_ms` averaged over views, plus `l_vol L_vol` of the set.
pub fn composite_loss<T: Real>(
    renders: &[RenderOutput<T>],
    targets: &[Image<T>],
    silhouettes: &[Image<T>],
    set: &PrimitiveSet<T>,
    weights: &LossWeights,
) -> Result<CompositeLoss<T>> {
    weights.validate()?;
    if renders.len() != targets.len() || renders.len() != silhouettes.len() {
        return Err(Error::Shape(format!(
            "{} renders, {} targets, {} silhouettes",
            renders.len(),
            targets.len(),
            silhouettes.len()
        )));
    }
    let views = T::of_usize(renders.len().max(1));
    let (l_rgb, l_m, l_ms) = (T::lit(weights.lambda_rgb), T::lit(weights.lambda_m), T::lit(weights.lambda_ms));
    let mut terms = LossTerms::default();
    let mut rgb_grads = Vec::with_capacity(renders.len());
    let mut alpha_grads = Vec::with_capacity(renders.len());
    let mut total = T::zero();
    for ((r, t), s) in renders.iter().zip(targets).zip(silhouettes) {
        let (lr, gr) = loss_rgb_grad(r, t, None)?;
        let (lm, gm) = loss_mask_grad(r, s)?;
        let mut rgb_grad: Vec<T> = gr.iter().map(|g| *g * l_rgb / views).collect();
        if weights.lambda_ms > 0.0 {
            let (lms, gms) = loss_multiscale_l1_grad(r, t)?;
            terms.ms += lms.as_f64() / renders.len() as f64;
            total += l_ms * lms / views;
            rgb_grad.iter_mut().zip(&gms).for_each(|(a, b)| *a += *b * l_ms / views);
        }
        terms.rgb += lr.as_f64() / renders.len() as f64;
        terms.mask += lm.as_f64() / renders.len() as f64;
        total += (l_rgb * lr + l_m * lm) / views;
        rgb_grads.push(rgb_grad);
        alpha_grads.push(gm.iter().map(|g| *g * l_m / views).collect());
    }
    let (lv, gv) = loss_vol_grad(set);
    terms.vol = lv.as_f64();
    let l_vol = T::lit(weights.lambda_vol);
    total += l_vol * lv;
    Ok(CompositeLoss {
        total,
        terms,
        rgb_grads,
        alpha_grads,
        scale_grads: gv.into_iter().map(|g| g * l_vol).collect(),
    })
}

/// Peak signal-to-noise ratio in dB with peak 1; `+inf` for identical images.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::Shape("psnr operands differ in shape".into()));
    }
    if a.data.is_empty() {
        return Err(Error::Shape("psnr of an empty image".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
