//! Planar RGB images with values in `[0, 1]` and their 8-bit PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB image stored channel-major (`c * h * w + y * w + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(
                format!("{} values for {height}x{width}x3", CHANNELS * height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for value in rgb {
            data.extend(std::iter::repeat_n(value, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Mean of each channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        std::array::from_fn(|c| self.channel(c).iter().sum::<f64>() / n)
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect(),
        }
    }

    /// Interleaved 8-bit RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(CHANNELS * plane);
        for i in 0..plane {
            for c in 0..CHANNELS {
                out.push(to_u8(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let plane = height * width;
        if bytes.len() != CHANNELS * plane {
            return Err(Error::shape(
                format!("{} bytes", CHANNELS * plane),
                format!("{} bytes", bytes.len()),
            ));
        }
        let mut data = vec![0.0; CHANNELS * plane];
        for (i, px) in bytes.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_png(&mut buf, self).expect("png encoding into memory cannot fail");
        buf
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        write_png(&mut writer, self).map_err(|e| Error::CorruptImage {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::CorruptImage {
            path: path.to_owned(),
            message,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| corrupt(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| corrupt("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| corrupt(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(corrupt(format!(
                "expected 8-bit RGB, found {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Image::from_rgb8(info.height as usize, info.width as usize, &buf)
    }
}

impl Default for Image {
    fn default() -> Self {
        Image::filled(0, 0, [0.0; 3])
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png<W: Write>(w: W, image: &Image) -> Result<(), png::EncodingError> {
    let mut encoder = png::Encoder::new(w, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&image.to_rgb8())?;
    writer.finish()
}
