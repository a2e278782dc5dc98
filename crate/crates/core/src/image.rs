//! RGB float images plus their on-disk encodings.
//!
//! Raw float format (`.f32` files), all little-endian:
//!
//! ```text
//! magic     4 bytes  "RGBF"
//! width     u32
//! height    u32
//! channels  u32
//! data      channels × height × width f32, planar (channel-major, rows top to bottom)
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::NdArray;

const RAW_MAGIC: &[u8; 4] = b"RGBF";

/// Interleaved `height × width × 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_ndarray(&self) -> NdArray {
        NdArray::new(vec![self.height, self.width, 3], self.data.clone()).expect("image shape")
    }

    pub fn from_ndarray(a: &NdArray) -> Result<Self> {
        match a.shape() {
            [h, w, 3] => Ok(Self {
                width: *w,
                height: *h,
                data: a.data().to_vec(),
            }),
            s => Err(Error::shape("Image::from_ndarray", format!("expected H x W x 3, got {s:?}"))),
        }
    }

    /// Channel-planar little-endian f32 encoding.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(RAW_MAGIC);
        for v in [self.width as u32, self.height as u32, 3u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for ch in 0..3 {
            for p in 0..self.width * self.height {
                out.extend_from_slice(&(self.data[p * 3 + ch] as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
            return Err(Error::format(origin, "not an RGBF raw float image"));
        }
        let u = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        let (w, h, c) = (u(4), u(8), u(12));
        if c != 3 {
            return Err(Error::format(origin, format!("expected 3 channels, got {c}")));
        }
        if bytes.len() != 16 + w * h * c * 4 {
            return Err(Error::format(origin, "raw image length does not match header"));
        }
        let mut data = vec![0.0; w * h * 3];
        for ch in 0..3 {
            for p in 0..w * h {
                let o = 16 + (ch * w * h + p) * 4;
                data[p * 3 + ch] =
                    f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64;
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_raw_bytes())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes, path)
    }

    /// 8-bit RGB PNG preview; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }
}

/// Binary mask stored as an 8-bit grayscale PNG (0 or 255).
pub fn save_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, width, height, png::ColorType::Grayscale, &bytes)
}

pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "mask must be 8-bit grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok((w, h, buf[..w * h].iter().map(|&v| v >= 128).collect()))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let tmp = crate::io::temp_path(path);
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_planar() {
        let mut img = Image::filled(3, 2, [0.0; 3]);
        img.set_pixel(1, 0, [0.25, 0.5, 0.75]);
        let bytes = img.to_raw_bytes();
        // red plane, pixel (1,0) is the second f32 after the header
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0.25);
        // green plane starts after 6 red values
        assert_eq!(f32::from_le_bytes(bytes[16 + 24 + 4..16 + 24 + 8].try_into().unwrap()), 0.5);
        assert_eq!(Image::from_raw_bytes(&bytes, Path::new("m")).unwrap(), img);
        assert!(Image::from_raw_bytes(&bytes[..20], Path::new("m")).is_err());
    }
}
