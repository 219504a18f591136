use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Single-channel image, row-major, intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// `[1, H, W]` tensor for the backbone.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("sized")
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            out.data[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for r in (0..self.height).rev() {
            out.extend_from_slice(&self.data[r * self.width..(r + 1) * self.width]);
        }
        ImageTensor {
            data: out,
            ..*self
        }
    }

    /// Bilinear sample at fractional pixel coordinates; zero outside.
    pub fn sample(&self, y: f64, x: f64) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let px = |r: f64, c: f64| -> f32 {
            if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
                0.0
            } else {
                self.at(r as usize, c as usize)
            }
        };
        let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1.0) * fx;
        let bottom = px(y0 + 1.0, x0) * (1.0 - fx) + px(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with pixel-centre alignment and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = ImageTensor::zeros(height, width);
        for r in 0..height {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for c in 0..width {
                let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
                let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
                let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
                let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
                out.data[r * width + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
        out
    }
}

/// Write an 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dimension {
            op: "write_pgm",
            lhs: vec![height, width],
            rhs: vec![pixels.len()],
        });
    }
    let mut out = Vec::with_capacity(pixels.len() + 20);
    write!(out, "P5\n{width} {height}\n255\n").expect("in-memory write");
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse a binary PGM (`P5`, maxval up to 65535) into `[0, 1]` intensities.
pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 0;
    let mut fields = Vec::new();
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(decode_err(path, "missing P5 magic"));
    }
    pos += 2;
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, "malformed header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| decode_err(path, "header value out of range"))?;
        fields.push(v);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, "header not terminated"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(decode_err(path, format!("bad header {width}×{height} max {maxval}")));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bpp))
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(decode_err(path, format!("expected {need} pixel bytes, found {}", body.len())));
    }
    let scale = 1.0 / maxval as f32;
    let data = if bpp == 1 {
        body[..need].iter().map(|&v| (v as f32 * scale).min(1.0)).collect()
    } else {
        body[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 * scale).min(1.0))
            .collect()
    };
    Ok(ImageTensor { height, width, data })
}

/// Read an image and bring it to `size = [height, width]`.
pub fn load_image(path: &Path, size: [usize; 2]) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pgm(path, &bytes)?.resize(size[0], size[1]))
}
