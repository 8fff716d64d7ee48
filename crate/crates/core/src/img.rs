//! Float images (HWC, values in [0,1]), PNG and raw-float I/O, and binary
//! mask morphology.

use std::path::Path;

use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let off = (y * self.w + x) * self.c;
        &self.data[off..off + self.c]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.h, self.w, self.c), (other.h, other.w, other.c));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / self.data.len() as f64
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!((self.h, self.w, self.c), (other.h, other.w, other.c));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / self.data.len() as f64
    }

    /// 8-bit PNG. 1 channel saves as grayscale, 3 as RGB.
    pub fn save_png(&self, path: &Path) -> Result<(), Error> {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.c {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, buf)
                    .ok_or_else(|| Error::Invalid("image buffer size".into()))?;
                img.save(path).map_err(|e| Error::Invalid(e.to_string()))
            }
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
                let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, buf)
                    .ok_or_else(|| Error::Invalid("image buffer size".into()))?;
                img.save(path).map_err(|e| Error::Invalid(e.to_string()))
            }
            c => Err(Error::Invalid(format!("cannot save {}-channel PNG", c))),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self, Error> {
        let img = image::open(path).map_err(|e| Error::Invalid(e.to_string()))?;
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
                Ok(Self { h, w, c: 1, data })
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let data = rgb.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
                Ok(Self { h, w, c: 3, data })
            }
        }
    }

    /// Raw 32-bit float container (NPY v1.0, C order, shape (h, w, c)) for
    /// lossless metric computation.
    pub fn save_npy(&self, path: &Path) -> Result<(), Error> {
        let mut header = format!(
            "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
            self.h, self.w, self.c
        );
        // pad header so magic+header is a multiple of 64, newline-terminated
        let base = 10 + header.len() + 1;
        let pad = (64 - base % 64) % 64;
        header.push_str(&" ".repeat(pad));
        header.push('\n');
        let mut buf = Vec::with_capacity(10 + header.len() + self.data.len() * 4);
        buf.extend_from_slice(b"\x93NUMPY\x01\x00");
        buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_npy(path: &Path) -> Result<Self, Error> {
        let buf = std::fs::read(path)?;
        if buf.len() < 12 || &buf[..6] != b"\x93NUMPY" {
            return Err(Error::Invalid("not an NPY file".into()));
        }
        let hlen = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        let header = std::str::from_utf8(&buf[10..10 + hlen])
            .map_err(|_| Error::Invalid("bad NPY header".into()))?;
        let shape_str = header
            .split("'shape':")
            .nth(1)
            .and_then(|s| s.split('(').nth(1))
            .and_then(|s| s.split(')').next())
            .ok_or_else(|| Error::Invalid("bad NPY shape".into()))?;
        let dims: Vec<usize> = shape_str
            .split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect();
        if dims.len() != 3 || !header.contains("<f4") {
            return Err(Error::Invalid(format!("unsupported NPY layout: {}", header.trim())));
        }
        let (h, w, c) = (dims[0], dims[1], dims[2]);
        let body = &buf[10 + hlen..];
        if body.len() != h * w * c * 4 {
            return Err(Error::Invalid("NPY payload size mismatch".into()));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Self { h, w, c, data })
    }
}

/// Binary erosion with a square structuring element of radius `r`.
pub fn erode(mask: &Image, r: usize) -> Image {
    morph(mask, r, true)
}

/// Binary dilation with a square structuring element of radius `r`.
pub fn dilate(mask: &Image, r: usize) -> Image {
    morph(mask, r, false)
}

fn morph(mask: &Image, r: usize, is_erode: bool) -> Image {
    assert_eq!(mask.c, 1, "morphology expects a single-channel mask");
    let mut out = Image::new(mask.h, mask.w, 1);
    let r = r as isize;
    for y in 0..mask.h as isize {
        for x in 0..mask.w as isize {
            let mut v = is_erode;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && yy < mask.h as isize && xx >= 0 && xx < mask.w as isize;
                    let on = inside && mask.get(yy as usize, xx as usize, 0) > 0.5;
                    if is_erode && !on {
                        v = false;
                        break 'win;
                    }
                    if !is_erode && on {
                        v = true;
                        break 'win;
                    }
                }
            }
            out.set(y as usize, x as usize, 0, if v { 1.0 } else { 0.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(3, 5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.01).sin().abs();
        }
        let p = dir.path().join("x.npy");
        img.save_npy(&p).unwrap();
        let back = Image::load_npy(&p).unwrap();
        assert_eq!((back.h, back.w, back.c), (3, 5, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn png_roundtrip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 4, 3);
        img.set(1, 2, 0, 1.0);
        img.set(3, 3, 2, 0.5);
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.get(1, 2, 0), 1.0);
        assert!((back.get(3, 3, 2) - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn erosion_shrinks_dilation_grows() {
        let mut m = Image::new(7, 7, 1);
        for y in 2..5 {
            for x in 2..5 {
                m.set(y, x, 0, 1.0);
            }
        }
        let e = erode(&m, 1);
        assert_eq!(e.data.iter().filter(|&&v| v > 0.5).count(), 1);
        assert_eq!(e.get(3, 3, 0), 1.0);
        let d = dilate(&m, 1);
        assert_eq!(d.data.iter().filter(|&&v| v > 0.5).count(), 25);
    }
}
