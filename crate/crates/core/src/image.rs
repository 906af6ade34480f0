//! Surrogate 8-bit grayscale images and the container formats they are stored in.
//!
//! The canonical container is binary PGM (`P5`). Three invented containers
//! stand in for the `.bmp`, `.tiff` and `.jpeg` variety found in clinical
//! storage. All of them are lossless, so any re-encoding round-trips
//! pixel-exact:
//!
//! | ext    | magic  | body                                            |
//! |--------|--------|-------------------------------------------------|
//! | `pgm`  | `P5\n` | ASCII `W H\n255\n`, raw rows top-down           |
//! | `bmp`  | `SBMP` | u16le width, u16le height, raw rows bottom-up   |
//! | `tiff` | `STIF` | u16le width, u16le height, run-length (n, v)    |
//! | `jpeg` | `SJPG` | u16le width, u16le height, wrapping byte deltas |

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of every freshly generated image.
pub const CANONICAL_SIDE: u32 = 32;

/// Allowed deviation of mean and stddev when checking a normalized image.
pub const PROFILE_TOLERANCE: f64 = 1.0;

/// Byte sequences that identify an encoded image in any supported container.
pub const IMAGE_MAGICS: [&[u8]; 4] = [b"P5\n", b"SBMP", b"STIF", b"SJPG"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("unrecognized image container")]
    UnknownFormat,
    #[error("truncated or malformed {0} data")]
    Malformed(&'static str),
    #[error("image dimensions {0}x{1} are not supported")]
    BadDimensions(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Pgm,
    Bmp,
    Tiff,
    Jpeg,
}

impl ImageFormat {
    pub const ALL: [ImageFormat; 4] = [Self::Pgm, Self::Bmp, Self::Tiff, Self::Jpeg];

    pub fn extension(self) -> &'static str {
        match self {
            Self::Pgm => "pgm",
            Self::Bmp => "bmp",
            Self::Tiff => "tiff",
            Self::Jpeg => "jpeg",
        }
    }

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "pgm" => Some(Self::Pgm),
            "bmp" => Some(Self::Bmp),
            "tif" | "tiff" => Some(Self::Tiff),
            "jpg" | "jpeg" => Some(Self::Jpeg),
            _ => None,
        }
    }

    /// Sniffs the container from the leading bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"P5") {
            Some(Self::Pgm)
        } else if bytes.starts_with(b"SBMP") {
            Some(Self::Bmp)
        } else if bytes.starts_with(b"STIF") {
            Some(Self::Tiff)
        } else if bytes.starts_with(b"SJPG") {
            Some(Self::Jpeg)
        } else {
            None
        }
    }
}

impl std::fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.extension())
    }
}

/// True when `name` carries an extension of a supported image container.
pub fn is_image_name(name: &str) -> bool {
    name.rsplit_once('.')
        .and_then(|(_, ext)| ImageFormat::from_extension(ext))
        .is_some()
}

/// Row-major 8-bit grayscale grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize, "pixel count mismatch");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self::new(width, height, vec![value; (width * height) as usize])
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    /// Population mean and standard deviation of the intensities.
    pub fn stats(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
        let var = self
            .pixels
            .iter()
            .map(|&p| (p as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    /// Block-average downsampling by an integer factor.
    pub fn downsample(&self, factor: u32) -> GrayImage {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0);
        let (w, h) = (self.width / factor, self.height / factor);
        let area = (factor * factor) as u32;
        let mut out = Vec::with_capacity((w * h) as usize);
        for by in 0..h {
            for bx in 0..w {
                let mut sum = 0u32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += self.get(bx * factor + dx, by * factor + dy) as u32;
                    }
                }
                out.push(((sum + area / 2) / area) as u8);
            }
        }
        GrayImage::new(w, h, out)
    }

    /// Resamples to `width`×`height`: block averaging for integer shrink
    /// factors, pixel replication otherwise.
    pub fn resize(&self, width: u32, height: u32) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        if width < self.width
            && self.width % width == 0
            && self.height % height == 0
            && self.width / width == self.height / height
        {
            return self.downsample(self.width / width);
        }
        let mut out = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            let sy = (y as u64 * self.height as u64 / height as u64) as u32;
            for x in 0..width {
                let sx = (x as u64 * self.width as u64 / width as u64) as u32;
                out.push(self.get(sx, sy));
            }
        }
        GrayImage::new(width, height, out)
    }

    /// Linear remap to the requested mean and stddev, rounded and clamped.
    pub fn standardize(&self, mean: f64, std: f64) -> GrayImage {
        let (m, s) = self.stats();
        let pixels = self
            .pixels
            .iter()
            .map(|&p| {
                let z = if s > 0.0 { (p as f64 - m) / s } else { 0.0 };
                (mean + std * z).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        GrayImage::new(self.width, self.height, pixels)
    }

    /// Scales deviations from the image mean by `gain`, keeping the mean.
    pub fn scale_contrast(&self, gain: f64) -> GrayImage {
        let (m, _) = self.stats();
        let pixels = self
            .pixels
            .iter()
            .map(|&p| (m + gain * (p as f64 - m)).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::new(self.width, self.height, pixels)
    }

    pub fn encode(&self, format: ImageFormat) -> Vec<u8> {
        match format {
            ImageFormat::Pgm => {
                let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
                out.extend_from_slice(&self.pixels);
                out
            }
            ImageFormat::Bmp => {
                let mut out = self.binary_header(b"SBMP");
                for row in self.pixels.chunks(self.width as usize).rev() {
                    out.extend_from_slice(row);
                }
                out
            }
            ImageFormat::Tiff => {
                let mut out = self.binary_header(b"STIF");
                let mut iter = self.pixels.iter().peekable();
                while let Some(&v) = iter.next() {
                    let mut run = 1u8;
                    while run < u8::MAX && iter.peek() == Some(&&v) {
                        iter.next();
                        run += 1;
                    }
                    out.push(run);
                    out.push(v);
                }
                out
            }
            ImageFormat::Jpeg => {
                let mut out = self.binary_header(b"SJPG");
                let mut prev = 0u8;
                for &p in &self.pixels {
                    out.push(p.wrapping_sub(prev));
                    prev = p;
                }
                out
            }
        }
    }

    fn binary_header(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.pixels.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(GrayImage, ImageFormat), ImageError> {
        let format = ImageFormat::sniff(bytes).ok_or(ImageError::UnknownFormat)?;
        let image = match format {
            ImageFormat::Pgm => decode_pgm(bytes)?,
            ImageFormat::Bmp => {
                let (w, h, body) = binary_body(bytes, "bmp")?;
                let n = (w * h) as usize;
                if body.len() != n {
                    return Err(ImageError::Malformed("bmp"));
                }
                let mut pixels = Vec::with_capacity(n);
                for row in body.chunks(w as usize).rev() {
                    pixels.extend_from_slice(row);
                }
                GrayImage::new(w, h, pixels)
            }
            ImageFormat::Tiff => {
                let (w, h, body) = binary_body(bytes, "tiff")?;
                if body.len() % 2 != 0 {
                    return Err(ImageError::Malformed("tiff"));
                }
                let mut pixels = Vec::with_capacity((w * h) as usize);
                for pair in body.chunks(2) {
                    if pair[0] == 0 {
                        return Err(ImageError::Malformed("tiff"));
                    }
                    pixels.extend(std::iter::repeat_n(pair[1], pair[0] as usize));
                }
                if pixels.len() != (w * h) as usize {
                    return Err(ImageError::Malformed("tiff"));
                }
                GrayImage::new(w, h, pixels)
            }
            ImageFormat::Jpeg => {
                let (w, h, body) = binary_body(bytes, "jpeg")?;
                if body.len() != (w * h) as usize {
                    return Err(ImageError::Malformed("jpeg"));
                }
                let mut prev = 0u8;
                let pixels = body
                    .iter()
                    .map(|&d| {
                        prev = prev.wrapping_add(d);
                        prev
                    })
                    .collect();
                GrayImage::new(w, h, pixels)
            }
        };
        Ok((image, format))
    }
}

fn binary_body<'a>(bytes: &'a [u8], name: &'static str) -> Result<(u32, u32, &'a [u8]), ImageError> {
    if bytes.len() < 8 {
        return Err(ImageError::Malformed(name));
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]) as u32;
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as u32;
    if w == 0 || h == 0 {
        return Err(ImageError::BadDimensions(w, h));
    }
    Ok((w, h, &bytes[8..]))
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    // header: three whitespace-terminated tokens after the magic
    let mut fields = Vec::with_capacity(3);
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(ImageError::Malformed("pgm"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| ImageError::Malformed("pgm"))?;
        fields.push(text.parse::<u32>().map_err(|_| ImageError::Malformed("pgm"))?);
    }
    pos += 1; // single whitespace byte before raster
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 || maxval != 255 {
        return Err(ImageError::BadDimensions(w, h));
    }
    let body = bytes.get(pos..).ok_or(ImageError::Malformed("pgm"))?;
    if body.len() != (w * h) as usize {
        return Err(ImageError::Malformed("pgm"));
    }
    Ok(GrayImage::new(w, h, body.to_vec()))
}

/// Target container, resolution and intensity distribution after preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalProfile {
    pub format: ImageFormat,
    pub width: u32,
    pub height: u32,
    pub mean: f64,
    pub std: f64,
}

impl Default for CanonicalProfile {
    fn default() -> Self {
        Self {
            format: ImageFormat::Pgm,
            width: CANONICAL_SIDE,
            height: CANONICAL_SIDE,
            mean: 128.0,
            std: 32.0,
        }
    }
}

impl CanonicalProfile {
    /// Whether a decoded image stored with `format` already satisfies the profile.
    pub fn matches(&self, image: &GrayImage, format: ImageFormat) -> bool {
        if format != self.format || image.width != self.width || image.height != self.height {
            return false;
        }
        let (m, s) = image.stats();
        (m - self.mean).abs() <= PROFILE_TOLERANCE && (s - self.std).abs() <= PROFILE_TOLERANCE
    }

    pub fn apply(&self, image: &GrayImage) -> GrayImage {
        image.resize(self.width, self.height).standardize(self.mean, self.std)
    }
}
