//! Radiance accumulation buffers and 8-bit display images.

use thiserror::Error;

use crate::camera::Dims;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BufferError {
    #[error("dimension mismatch: {expected:?} vs {found:?}")]
    Dims { expected: Dims, found: Dims },
    #[error("sample count mismatch: {expected} vs {found}")]
    Spp { expected: u32, found: u32 },
    #[error("frame mismatch: {expected} vs {found}")]
    Frame { expected: u64, found: u64 },
    #[error("sample count must be at least 1")]
    ZeroSpp,
    #[error("pixel data holds {found} values, expected {expected}")]
    Length { expected: usize, found: usize },
}

/// Per-pixel radiance summed over `spp` samples. The mean is `rgb / spp`; storing sums
/// makes merging sample slices a plain addition.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceBuffer {
    pub dims: Dims,
    pub spp: u32,
    pub frame_id: u64,
    pub rgb: Vec<[f32; 3]>,
}

impl RadianceBuffer {
    pub fn new(dims: Dims, spp: u32, frame_id: u64) -> RadianceBuffer {
        RadianceBuffer { dims, spp, frame_id, rgb: vec![[0.0; 3]; dims.pixel_count()] }
    }

    pub fn from_sums(dims: Dims, spp: u32, frame_id: u64, rgb: Vec<[f32; 3]>) -> Result<RadianceBuffer, BufferError> {
        if spp == 0 {
            return Err(BufferError::ZeroSpp);
        }
        if rgb.len() != dims.pixel_count() {
            return Err(BufferError::Length { expected: dims.pixel_count(), found: rgb.len() });
        }
        Ok(RadianceBuffer { dims, spp, frame_id, rgb })
    }

    pub fn width(&self) -> u32 {
        self.dims.width
    }

    pub fn height(&self) -> u32 {
        self.dims.height
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.dims.width as usize + x as usize
    }

    pub fn sum(&self, x: u32, y: u32) -> [f32; 3] {
        self.rgb[self.index(x, y)]
    }

    pub fn mean(&self, x: u32, y: u32) -> [f32; 3] {
        let s = self.sum(x, y);
        let k = self.spp as f32;
        [s[0] / k, s[1] / k, s[2] / k]
    }

    pub fn means(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        let k = self.spp as f32;
        self.rgb.iter().map(move |s| [s[0] / k, s[1] / k, s[2] / k])
    }

    /// Size of the radiance payload in bytes (three 32-bit floats per pixel).
    pub fn payload_bytes(&self) -> usize {
        self.rgb.len() * 12
    }

    pub fn all_finite(&self) -> bool {
        self.rgb.iter().flatten().all(|c| c.is_finite())
    }

    /// Bitwise equality of the sums (treats `-0.0` and `0.0` as different).
    pub fn bitwise_eq(&self, other: &RadianceBuffer) -> bool {
        self.dims == other.dims
            && self.spp == other.spp
            && self.rgb.len() == other.rgb.len()
            && self.rgb.iter().flatten().zip(other.rgb.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// 8-bit sRGB image, row-major RGB triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub dims: Dims,
    pub data: Vec<u8>,
}

/// sRGB transfer function for a linear value in `[0, 1]`.
#[inline]
pub fn srgb_encode(linear: f32) -> f32 {
    if linear <= 0.003_130_8 {
        12.92 * linear
    } else {
        1.055 * linear.powf(1.0 / 2.4) - 0.055
    }
}

/// Reinhard `m / (1 + m)` on the per-pixel mean, sRGB encode, round half up.
pub fn tone_map(rb: &RadianceBuffer) -> Image8 {
    let mut data = Vec::with_capacity(rb.rgb.len() * 3);
    for m in rb.means() {
        for c in m {
            let c = if c.is_finite() { c.max(0.0) } else if c > 0.0 { f32::MAX } else { 0.0 };
            let r = c / (1.0 + c);
            let e = srgb_encode(r).clamp(0.0, 1.0);
            data.push((e * 255.0 + 0.5).floor().min(255.0) as u8);
        }
    }
    Image8 { dims: rb.dims, data }
}
