//! Float images with PFM (linear) and PNG (preview) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major interleaved image, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![T::zero(); width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[T]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image with {} values",
                width,
                height,
                channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut T {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear lookup at continuous pixel coordinates (centers at `+0.5`),
    /// clamped at the border. `None` when the point lies outside the image.
    pub fn sample_bilinear(&self, u: T, v: T, out: &mut [T]) -> bool {
        let w = T::of_usize(self.width);
        let h = T::of_usize(self.height);
        if !(u >= T::zero() && v >= T::zero() && u <= w && v <= h) {
            return false;
        }
        let half = T::lit(0.5);
        let fx = (u - half).max(T::zero()).min(w - T::one());
        let fy = (v - half).max(T::zero()).min(h - T::one());
        let x0 = fx.floor().as_f64() as usize;
        let y0 = fy.floor().as_f64() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - T::of_usize(x0);
        let ay = fy - T::of_usize(y0);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.at(x0, y0, c) * (T::one() - ax) + self.at(x1, y0, c) * ax;
            let bot = self.at(x0, y1, c) * (T::one() - ax) + self.at(x1, y1, c) * ax;
            *o = top * (T::one() - ay) + bot * ay;
        }
        true
    }

    pub fn map<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        out
    }
}

/// Writes a little-endian PFM (`PF` for 3 channels, `Pf` for 1).
pub fn write_pfm<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    let bytes = encode_pfm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pfm<T: Real>(img: &Image<T>) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let mut out = Vec::with_capacity(img.data.len() * 4 + 32);
    write!(out, "{tag}\n{} {}\n-1.0\n", img.width, img.height).expect("vec write");
    // PFM stores scanlines bottom to top.
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * img.channels..(y + 1) * img.width * img.channels];
        for v in row {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<Image<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|m| Error::format(path, m))
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Image<f32>, String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PFM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(format!("unknown PFM tag {t}")),
    };
    let width: usize = fields[1].parse().map_err(|_| "bad PFM width")?;
    let height: usize = fields[2].parse().map_err(|_| "bad PFM height")?;
    let scale: f32 = fields[3].parse().map_err(|_| "bad PFM scale")?;
    let little = scale < 0.0;
    let n = width * height * channels;
    if bytes.len() < pos + n * 4 {
        return Err("truncated PFM data".into());
    }
    let mut data = vec![0f32; n];
    let stride = width * channels;
    for (i, chunk) in bytes[pos..pos + n * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = i / stride;
        let y = height - 1 - file_row;
        data[y * stride + i % stride] = v;
    }
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

/// 8-bit PNG preview with gamma 2.2.
pub fn write_png<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    let gamma = |x: T| -> u8 {
        let v = x.as_f64().clamp(0.0, 1.0).powf(1.0 / 2.2);
        (v * 255.0).round() as u8
    };
    match img.channels {
        1 => {
            let buf: Vec<u8> = img.data.iter().map(|&x| gamma(x)).collect();
            image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("sized buffer")
                .save(path)?;
        }
        3 => {
            let buf: Vec<u8> = img.data.iter().map(|&x| gamma(x)).collect();
            image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("sized buffer")
                .save(path)?;
        }
        c => return Err(Error::Shape(format!("PNG preview supports 1 or 3 channels, got {c}"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_header_and_row_order() {
        let img = Image::from_vec(2, 2, 1, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        let body = &bytes[12..];
        // bottom row first
        assert_eq!(f32::from_le_bytes(body[0..4].try_into().unwrap()), 3.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn pfm_rejects_two_channels() {
        assert!(encode_pfm(&Image::<f32>::new(1, 1, 2)).is_err());
    }

    #[test]
    fn bilinear_at_center_and_between() {
        let img = Image::from_vec(2, 1, 1, vec![0.0f64, 1.0]).unwrap();
        let mut o = [0.0];
        assert!(img.sample_bilinear(0.5, 0.5, &mut o));
        assert_eq!(o[0], 0.0);
        assert!(img.sample_bilinear(1.0, 0.5, &mut o));
        assert!((o[0] - 0.5).abs() < 1e-15);
        assert!(!img.sample_bilinear(2.5, 0.5, &mut o));
    }
}
