//! Grayscale images in `[0, 1]` and the binary PGM (P5) file format.
//!
//! The in-memory pipeline stays in 64-bit floats; 8-bit quantization happens
//! only at the file boundary. Generated datasets snap pixel values onto the
//! 8-bit grid when they are created, so write-then-read is the identity for
//! every generated image.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A grayscale raster with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pix: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pix: Vec<f64>) -> Result<Self> {
        if pix.len() != width * height {
            return Err(Error::invalid(format!(
                "image data length {} does not match {}x{}",
                pix.len(),
                width,
                height
            )));
        }
        Ok(Image { width, height, pix })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            pix: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Side length of a square image.
    pub fn side(&self) -> usize {
        debug_assert_eq!(self.width, self.height);
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pix
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pix
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pix
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pix[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pix[y * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for &v in &self.pix {
            mn = mn.min(v);
            mx = mx.max(v);
        }
        (mn, mx)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.pix {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Snap every pixel to the nearest 8-bit level `k/255`.
    pub fn snap_to_u8_grid(&mut self) {
        for v in &mut self.pix {
            let q = (v.clamp(0.0, 1.0) * 255.0).round();
            *v = q / 255.0;
        }
    }

    /// Area-weighted box filter down to `side`×`side` (handles non-integer
    /// scale factors exactly), then row-major order.
    pub fn box_downscale(&self, side: usize) -> Result<Image> {
        if side == 0 || side > self.width || side > self.height {
            return Err(Error::invalid(format!(
                "box_downscale: target side {} out of range for {}x{}",
                side, self.width, self.height
            )));
        }
        if side == self.width && side == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / side as f64;
        let sy = self.height as f64 / side as f64;
        let mut out = vec![0.0; side * side];
        for oy in 0..side {
            let y0 = oy as f64 * sy;
            let y1 = (oy + 1) as f64 * sy;
            for ox in 0..side {
                let x0 = ox as f64 * sx;
                let x1 = (ox + 1) as f64 * sx;
                let mut acc = 0.0;
                let mut area = 0.0;
                let yi0 = y0.floor() as usize;
                let yi1 = (y1.ceil() as usize).min(self.height);
                let xi0 = x0.floor() as usize;
                let xi1 = (x1.ceil() as usize).min(self.width);
                for yy in yi0..yi1 {
                    let wy = overlap(y0, y1, yy as f64, yy as f64 + 1.0);
                    if wy <= 0.0 {
                        continue;
                    }
                    for xx in xi0..xi1 {
                        let wx = overlap(x0, x1, xx as f64, xx as f64 + 1.0);
                        if wx <= 0.0 {
                            continue;
                        }
                        acc += self.pix[yy * self.width + xx] * wx * wy;
                        area += wx * wy;
                    }
                }
                out[oy * side + ox] = acc / area;
            }
        }
        Image::new(side, side, out)
    }

    /// Bilinear resize to `side`×`side` (used for analysis-side resampling,
    /// both up and down).
    pub fn resize_bilinear(&self, side: usize) -> Result<Image> {
        if side == 0 {
            return Err(Error::invalid("resize_bilinear: side must be positive"));
        }
        if side == self.width && side == self.height {
            return Ok(self.clone());
        }
        let mut out = vec![0.0; side * side];
        let fx = self.width as f64 / side as f64;
        let fy = self.height as f64 / side as f64;
        for oy in 0..side {
            let cy = (oy as f64 + 0.5) * fy - 0.5;
            let y0 = cy.floor().max(0.0) as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (cy - y0 as f64).clamp(0.0, 1.0);
            for ox in 0..side {
                let cx = (ox as f64 + 0.5) * fx - 0.5;
                let x0 = cx.floor().max(0.0) as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (cx - x0 as f64).clamp(0.0, 1.0);
                let a = self.pix[y0 * self.width + x0];
                let b = self.pix[y0 * self.width + x1];
                let c = self.pix[y1 * self.width + x0];
                let d = self.pix[y1 * self.width + x1];
                out[oy * side + ox] =
                    a * (1.0 - tx) * (1.0 - ty) + b * tx * (1.0 - ty) + c * (1.0 - tx) * ty + d * tx * ty;
            }
        }
        Image::new(side, side, out)
    }

    /// 256-bin histogram equalization: each value maps to the empirical CDF
    /// of its bin. A constant image is returned unchanged.
    pub fn equalize_histogram(&self) -> Image {
        let (mn, mx) = self.min_max();
        if mx - mn <= f64::EPSILON {
            return self.clone();
        }
        const BINS: usize = 256;
        let mut counts = [0usize; BINS];
        for &v in &self.pix {
            let b = (((v - mn) / (mx - mn)) * (BINS as f64 - 1.0)).round() as usize;
            counts[b.min(BINS - 1)] += 1;
        }
        let mut cdf = [0.0f64; BINS];
        let mut acc = 0usize;
        let n = self.pix.len() as f64;
        for (b, &cnt) in counts.iter().enumerate() {
            acc += cnt;
            cdf[b] = acc as f64 / n;
        }
        let pix = self
            .pix
            .iter()
            .map(|&v| {
                let b = (((v - mn) / (mx - mn)) * (BINS as f64 - 1.0)).round() as usize;
                cdf[b.min(BINS - 1)]
            })
            .collect();
        Image {
            width: self.width,
            height: self.height,
            pix,
        }
    }

    /// Linear contrast stretch to exactly `[0, 1]`; constant images are
    /// returned unchanged.
    pub fn stretch_contrast(&self) -> Image {
        let (mn, mx) = self.min_max();
        if mx - mn <= f64::EPSILON {
            return self.clone();
        }
        let pix = self.pix.iter().map(|&v| (v - mn) / (mx - mn)).collect();
        Image {
            width: self.width,
            height: self.height,
            pix,
        }
    }

    // ── PGM (P5) ───────────────────────────────────────────────────

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pix.len() + 32);
        write!(buf, "P5\n{} {}\n255\n", self.width, self.height)?;
        for &v in &self.pix {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::parse_pgm(&bytes).map_err(|e| {
            Error::data(format!("{}: {}", path.display(), e))
        })
    }

    pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
        let mut pos = 0usize;
        let magic = take_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(format!("byte 0: expected magic P5, got {:?}", String::from_utf8_lossy(magic)));
        }
        let width = parse_number(bytes, &mut pos)?;
        let height = parse_number(bytes, &mut pos)?;
        let maxval = parse_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(format!("byte {pos}: only maxval 255 is supported, got {maxval}"));
        }
        // exactly one whitespace byte separates the header from raster data
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(format!("byte {pos}: missing separator before raster data"));
        }
        pos += 1;
        let need = width * height;
        if bytes.len() - pos < need {
            return Err(format!(
                "byte {pos}: raster truncated, need {need} bytes, have {}",
                bytes.len() - pos
            ));
        }
        let pix = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Image::new(width, height, pix).map_err(|e| e.to_string())
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn take_token<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a [u8], String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format!("byte {start}: unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    let at = *pos;
    let tok = take_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("byte {at}: expected an integer in header"))
}
