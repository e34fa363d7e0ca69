//! RGB images stored as `f64` in `[0, 1]`, plus PPM and raw float I/O.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// `height × width × 3` row-major RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Values are clamped to `[0, 1]`; NaN becomes 0.
    pub fn new(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                what: "image",
                expected: format!("{}", width * height * 3),
                got: format!("{}", data.len()),
            });
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data).expect("consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Binary PPM (P6), 8 bits per channel, `round(255 · v)`.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::invalid("PPM data", reason.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("expected P6 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        pos += 1;
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
        Self::new(w, h, body.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(Error::io(path))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_ppm(&bytes)
    }

    /// Loads any raster format the `image` crate decodes, resized to
    /// `width × height` with a triangle filter.
    pub fn read_raster(path: &Path, width: usize, height: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let img = img
            .resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        Self::new(width, height, img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("consistent size");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FloatSidecar {
    shape: Vec<usize>,
    dtype: String,
}

/// Writes `values` as little-endian `f32` to `path` and the shape to `path.json`.
pub fn write_float_dump(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    f.write_all(&bytes).map_err(Error::io(path))?;
    let side = path.with_extension(format!(
        "{}json",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    let meta = FloatSidecar {
        shape: shape.to_vec(),
        dtype: "f32le".into(),
    };
    std::fs::write(&side, serde_json::to_string_pretty(&meta).expect("serializable")).map_err(Error::io(&side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_on_ingest() {
        let img = ImageTensor::new(1, 1, vec![-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        assert!(ImageTensor::new(2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn ppm_round_trip_is_exact_for_quantized_images() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i as f64 * 0.071).fract()).collect();
        let img = ImageTensor::new(4, 3, data).unwrap().quantized();
        let back = ImageTensor::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_encoding_rounds() {
        let img = ImageTensor::new(1, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let ppm = img.to_ppm();
        assert_eq!(&ppm[..11], b"P6\n1 1\n255\n");
        assert_eq!(&ppm[11..], &[0, 128, 255]);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let img = ImageTensor::filled(2, 2, [0.2, 0.4, 0.6]);
        let ppm = img.to_ppm();
        assert!(ImageTensor::from_ppm(&ppm[..ppm.len() - 1]).is_err());
        assert!(ImageTensor::from_ppm(b"P5\n1 1\n255\n\0").is_err());
    }
}
