use crate::error::{Error, Result};

/// 8-bit raster, row-major with interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(ImageU8 {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Single-channel intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_plane(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("gray value {v} outside [0, 1]")));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Quantizes back to 8 bits: `round(255 v)`.
    pub fn to_u8(&self) -> ImageU8 {
        let data = self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        ImageU8::gray(self.width, self.height, data).expect("dimensions already validated")
    }
}

/// Per-pixel vessel probability from the network's sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_plane(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap { width, height, data })
    }

    pub fn to_u8(&self) -> ImageU8 {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
        .to_u8()
    }
}

/// Strictly binary plane; 1 marks vessel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_plane(width, height, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Parameter(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// {0, 1} -> {0, 255} for writing to disk.
    pub fn to_u8(&self) -> ImageU8 {
        let data = self.data.iter().map(|&v| v * 255).collect();
        ImageU8::gray(self.width, self.height, data).expect("dimensions already validated")
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

fn check_plane(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Shape(format!("empty plane {width}x{height}")));
    }
    if len != width * height {
        return Err(Error::Shape(format!(
            "{width}x{height} plane needs {} values, got {len}",
            width * height
        )));
    }
    Ok(())
}
