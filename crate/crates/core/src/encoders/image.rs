//! RGB pixel buffers, boolean masks and binary PPM I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::EncoderError;

/// Row-major interleaved RGB, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, EncoderError> {
        if width == 0 || height == 0 {
            return Err(EncoderError::Input(format!(
                "image has zero dimension {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(EncoderError::Input(format!(
                "pixel buffer holds {} bytes, {width}x{height} RGB needs {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, EncoderError> {
        let n = width as usize * height as usize;
        Self::new(
            width,
            height,
            rgb.iter().copied().cycle().take(n * 3).collect(),
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// SHA-256 of dimensions and pixels, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), EncoderError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut reader = BufReader::new(bytes);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(EncoderError::Input("truncated PPM header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" {
            return Err(EncoderError::Input(format!(
                "unsupported PPM magic {:?}",
                fields[0]
            )));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| EncoderError::Input(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(EncoderError::Input(format!(
                "unsupported PPM maxval {maxval}"
            )));
        }
        let mut data = Vec::new();
        reader.read_to_end(&mut data)?;
        Self::new(width, height, data)
    }

    pub fn read_ppm(path: &Path) -> Result<Self, EncoderError> {
        let bytes = std::fs::read(path)
            .map_err(|e| EncoderError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_ppm(&bytes)
    }

    /// Box-filtered resample to `side`×`side`, as normalized floats in
    /// `[-0.5, 0.5]`, row-major RGB.
    pub fn downsample(&self, side: u32) -> Vec<f64> {
        let mut out = Vec::with_capacity((side * side * 3) as usize);
        for cy in 0..side {
            let y0 = cy * self.height / side;
            let y1 = ((cy + 1) * self.height / side).max(y0 + 1).min(self.height);
            for cx in 0..side {
                let x0 = cx * self.width / side;
                let x1 = ((cx + 1) * self.width / side).max(x0 + 1).min(self.width);
                let mut acc = [0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = self.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                out.extend(acc.iter().map(|a| a / n / 255.0 - 0.5));
            }
        }
        out
    }
}

/// A boolean segmentation mask with the dimensions of its image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, EncoderError> {
        if bits.len() != width as usize * height as usize {
            return Err(EncoderError::Input(format!(
                "mask has {} cells, {width}x{height} needs {}",
                bits.len(),
                width as usize * height as usize
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }
}
