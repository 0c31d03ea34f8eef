//! Grayscale raster type and PNG/PGM file I/O.
//!
//! Pixel values live in the data range `[0, 1]`; intermediate results (an
//! unclamped counterfactual, a signed attribution map) may leave it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};
use crate::tensor::Tensor;

pub const DATA_MIN: f32 = 0.0;
pub const DATA_MAX: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(VadeError::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(VadeError::Shape(format!(
                "image size mismatch {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn clamped(&self, lo: f32, hi: f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn to_data_range(&self) -> Image {
        self.clamped(DATA_MIN, DATA_MAX)
    }

    /// `[1, h, w]` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.pixels.clone())
            .expect("consistent shape")
    }

    /// `[h, w]` double-precision tensor for metrics.
    pub fn to_tensor_f64(&self) -> Tensor<f64> {
        Tensor::new(
            vec![self.height, self.width],
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
        .expect("consistent shape")
    }

    /// Accepts `[h, w]` or `[1, h, w]` tensors.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Image> {
        match *t.shape() {
            [h, w] | [1, h, w] => Image::new(w, h, t.data().to_vec()),
            _ => Err(VadeError::Shape(format!(
                "expected a single-channel image, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Hex SHA-256 over the size and little-endian pixel bytes.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        for p in &self.pixels {
            h.update(p.to_le_bytes());
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Bit depth used when writing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

fn quantize(v: f32, maxval: u32) -> u32 {
    let v = if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    };
    (v as f64 * maxval as f64).round() as u32
}

enum Format {
    Png,
    Pgm,
}

fn format_of(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
    {
        Some(e) if e == "png" => Ok(Format::Png),
        Some(e) if e == "pgm" => Ok(Format::Pgm),
        _ => Err(VadeError::ImageFormat(format!(
            "unsupported image extension: {}",
            path.display()
        ))),
    }
}

pub fn write_image(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format_of(path)? {
        Format::Png => encode_png(img, depth)?,
        Format::Pgm => encode_pgm(img, depth),
    };
    let file = File::create(path).map_err(|e| VadeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| VadeError::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| VadeError::io(path, e))?;
    match format {
        Format::Png => decode_png(&bytes),
        Format::Pgm => decode_pgm(&bytes),
    }
}

pub fn encode_png(img: &Image, depth: BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        let maxval = depth.maxval();
        let data: Vec<u8> = match depth {
            BitDepth::Eight => {
                enc.set_depth(png::BitDepth::Eight);
                img.pixels
                    .iter()
                    .map(|&v| quantize(v, maxval) as u8)
                    .collect()
            }
            BitDepth::Sixteen => {
                enc.set_depth(png::BitDepth::Sixteen);
                img.pixels
                    .iter()
                    .flat_map(|&v| (quantize(v, maxval) as u16).to_be_bytes())
                    .collect()
            }
        };
        let mut writer = enc
            .write_header()
            .map_err(|e| VadeError::ImageFormat(e.to_string()))?;
        writer
            .write_image_data(&data)
            .map_err(|e| VadeError::ImageFormat(e.to_string()))?;
    }
    Ok(out)
}

/// Writes an 8-bit RGB PNG from interleaved bytes.
pub fn encode_rgb_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(VadeError::Shape("rgb buffer size mismatch".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| VadeError::ImageFormat(e.to_string()))?;
        writer
            .write_image_data(rgb)
            .map_err(|e| VadeError::ImageFormat(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let fmt = |e: png::DecodingError| VadeError::ImageFormat(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(VadeError::ImageFormat(format!(
            "expected grayscale png, got {color:?}"
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VadeError::ImageFormat("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels: Vec<f32> = match depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0) as f32)
            .collect(),
        other => {
            return Err(VadeError::ImageFormat(format!(
                "unsupported png bit depth {other:?}"
            )))
        }
    };
    Image::new(w, h, pixels)
}

pub fn encode_pgm(img: &Image, depth: BitDepth) -> Vec<u8> {
    let maxval = depth.maxval();
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    for &v in &img.pixels {
        let q = quantize(v, maxval);
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| VadeError::ImageFormat(format!("pgm: {m}"));
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad(&format!("unsupported magic {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bpp;
    if bytes.len() < pos + need {
        return Err(bad("truncated raster"));
    }
    let raster = &bytes[pos..pos + need];
    let m = maxval as f64;
    let pixels = if bpp == 1 {
        raster.iter().map(|&b| (b as f64 / m) as f32).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / m) as f32)
            .collect()
    };
    Image::new(w, h, pixels)
}
