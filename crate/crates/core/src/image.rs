//! Dense image maps and 8-bit PNG I/O.

use crate::error::{Error, Result};
use sharecmp_nn::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// An `H×W×C` map of `f64` values, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Map {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "map data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds a map from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map { data: self.data.iter().map(|&v| f(v)).collect(), ..self.empty_like() }
    }

    /// Element-wise combination of two maps of identical shape.
    pub fn zip(&self, other: &Map, f: impl Fn(f64, f64) -> f64) -> Result<Map> {
        self.check_same_dims(other)?;
        Ok(Map { data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(), ..self.empty_like() })
    }

    pub fn check_same_dims(&self, other: &Map) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::InvalidInput(format!("map shapes differ: {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    fn empty_like(&self) -> Map {
        Map { height: self.height, width: self.width, channels: self.channels, data: Vec::new() }
    }

    /// Single-channel map with one weighted sum per pixel.
    pub fn weighted_channels(&self, weights: &[f64]) -> Result<Map> {
        if weights.len() != self.channels {
            return Err(Error::InvalidInput(format!(
                "{} channel weights for a {}-channel map",
                weights.len(),
                self.channels
            )));
        }
        let data = self.data.chunks(self.channels).map(|px| px.iter().zip(weights).map(|(v, w)| v * w).sum()).collect();
        Ok(Map { height: self.height, width: self.width, channels: 1, data })
    }

    /// One channel as a single-channel map.
    pub fn channel(&self, c: usize) -> Map {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Map { height: self.height, width: self.width, channels: 1, data }
    }

    /// Stacks maps of equal spatial size along the channel axis.
    pub fn stack(maps: &[&Map]) -> Result<Map> {
        let first = maps.first().ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
        let (h, w) = (first.height, first.width);
        if maps.iter().any(|m| (m.height, m.width) != (h, w)) {
            return Err(Error::InvalidInput("stacked maps differ in spatial size".into()));
        }
        let channels = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for m in maps {
                data.extend_from_slice(&m.data[p * m.channels..(p + 1) * m.channels]);
            }
        }
        Ok(Map { height: h, width: w, channels, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Planar `(1, C, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; h * w * c];
        for (p, px) in self.data.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + p] = v;
            }
        }
        Tensor::new(vec![1, c, h, w], out)
    }

    /// Inverse of [`Map::to_tensor`] for one batch item.
    pub fn from_tensor(t: &Tensor, item: usize) -> Map {
        let (_, c, h, w) = t.dims4();
        let plane = h * w;
        let base = item * c * plane;
        Map::from_fn(h, w, c, |y, x, ch| t.data()[base + ch * plane + y * w + x])
    }

    pub fn read_png(path: &Path) -> Result<Map> {
        let raw = read_png_raw(path)?;
        let scale = if raw.sixteen_bit { 65535.0 } else { 255.0 };
        let data = raw.samples.iter().map(|&v| v as f64 / scale).collect();
        Ok(Map { height: raw.height, width: raw.width, channels: raw.channels, data })
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| unit_to_u8(v)).collect();
        write_png_u8(path, self.height, self.width, self.channels, &bytes)
    }
}

pub(crate) fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An `H×W` map of class ids; 255 marks pixels to ignore.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub const IGNORE_LABEL: u8 = 255;

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!("mask has {} values, expected {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Errors if any non-ignored id is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= num_classes) {
            Some(v) => Err(Error::InvalidInput(format!("class id {v} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    pub fn read_png(path: &Path) -> Result<Mask> {
        let raw = read_png_raw(path)?;
        if raw.channels != 1 || raw.sixteen_bit {
            return Err(Error::dataset(path, "label image must be 8-bit single-channel"));
        }
        Ok(Mask { height: raw.height, width: raw.width, data: raw.samples.iter().map(|&v| v as u8).collect() })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_png_u8(path, self.height, self.width, 1, &self.data)
    }

    /// Writes an RGB PNG with each class drawn in its palette colour; ignored
    /// pixels and classes without a colour are black.
    pub fn write_color_png(&self, path: &Path, palette: &[[u8; 3]]) -> Result<()> {
        let rgb: Vec<u8> = self.data.iter().flat_map(|&v| palette.get(v as usize).copied().unwrap_or([0; 3])).collect();
        write_png_u8(path, self.height, self.width, 3, &rgb)
    }
}

struct RawPng {
    height: usize,
    width: usize,
    channels: usize,
    sixteen_bit: bool,
    samples: Vec<u16>,
}

fn read_png_raw(path: &Path) -> Result<RawPng> {
    let file = File::open(path).map_err(|e| Error::dataset(path, format!("cannot open: {e}")))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let bad = |e: png::DecodingError| Error::dataset(path, format!("cannot decode PNG: {e}"));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::dataset(path, "PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.line_size * info.height as usize);
    let sixteen_bit = info.bit_depth == png::BitDepth::Sixteen;
    let mut samples: Vec<u16> = if sixteen_bit {
        buf.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        buf.iter().map(|&b| b as u16).collect()
    };
    let stored = info.color_type.samples();
    // Alpha carries no intensity information.
    let channels = match info.color_type {
        png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgba => 3,
        _ => stored,
    };
    if channels != stored {
        samples = samples.chunks(stored).flat_map(|px| px[..channels].to_vec()).collect();
    }
    Ok(RawPng { height: info.height as usize, width: info.width as usize, channels, sixteen_bit, samples })
}

pub(crate) fn write_png_u8(path: &Path, height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::InvalidInput(format!("cannot write a {c}-channel PNG"))),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
