//! Denoising, encoding and decoding of merged frames.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context};
use clusterpt_core::protocol::{Encoding, FrameImage};
use clusterpt_core::{tone_map, Dims, Image8, RadianceBuffer};
use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

pub const JPEG_QUALITY: u8 = 85;

const KERNEL: [f32; 5] = [1.0 / 16.0, 1.0 / 4.0, 3.0 / 8.0, 1.0 / 4.0, 1.0 / 16.0];

/// Edge-aware à-trous wavelet filter over per-pixel means: three passes of a 5x5
/// B3-spline kernel with hole spacing 1, 2, 4 and a colour-distance stopping weight.
/// Each output is the centre plus a weighted mean of differences, so a constant
/// image is an exact fixed point.
pub fn denoise(buf: &RadianceBuffer) -> RadianceBuffer {
    let (w, h) = (buf.dims.width as i64, buf.dims.height as i64);
    let mut cur: Vec<[f32; 3]> = buf.means().collect();
    let mut next = cur.clone();
    let mut sigma = 0.5f32;
    for pass in 0..3 {
        let step = 1i64 << pass;
        let inv = 1.0 / (sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let c = cur[(y * w + x) as usize];
                let mut acc = [0.0f32; 3];
                let mut wsum = 0.0f32;
                for (j, ky) in KERNEL.iter().enumerate() {
                    let sy = (y + (j as i64 - 2) * step).clamp(0, h - 1);
                    for (i, kx) in KERNEL.iter().enumerate() {
                        let sx = (x + (i as i64 - 2) * step).clamp(0, w - 1);
                        let q = cur[(sy * w + sx) as usize];
                        let d = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
                        let dist = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                        let wt = kx * ky * (-dist * inv).exp();
                        for k in 0..3 {
                            acc[k] += wt * d[k];
                        }
                        wsum += wt;
                    }
                }
                let out = &mut next[(y * w + x) as usize];
                for k in 0..3 {
                    out[k] = c[k] + acc[k] / wsum;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
        sigma *= 0.5;
    }
    let spp = buf.spp as f32;
    let rgb = cur.into_iter().map(|m| [m[0] * spp, m[1] * spp, m[2] * spp]).collect();
    RadianceBuffer { dims: buf.dims, spp: buf.spp, frame_id: buf.frame_id, rgb }
}

/// Encodes a tone-mapped image (or, for the radiance dump, the means of `buf`).
pub fn encode(buf: &RadianceBuffer, image: &Image8, encoding: Encoding) -> anyhow::Result<Vec<u8>> {
    let Dims { width, height } = image.dims;
    Ok(match encoding {
        Encoding::RawRgb8 => image.data.clone(),
        Encoding::Png => {
            let mut out = Vec::new();
            PngEncoder::new(&mut out).write_image(&image.data, width, height, ExtendedColorType::Rgb8)?;
            out
        }
        Encoding::Jpeg => {
            let mut out = Vec::new();
            JpegEncoder::new_with_quality(&mut out, JPEG_QUALITY).write_image(
                &image.data,
                width,
                height,
                ExtendedColorType::Rgb8,
            )?;
            out
        }
        Encoding::RadianceF32 => {
            let mut out = Vec::with_capacity(buf.rgb.len() * 12);
            for m in buf.means() {
                for c in m {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            out
        }
    })
}

pub fn encode_frame(buf: &RadianceBuffer, encoding: Encoding) -> anyhow::Result<FrameImage> {
    let image = tone_map(buf);
    Ok(FrameImage {
        frame_id: buf.frame_id,
        encoding,
        width: buf.dims.width,
        height: buf.dims.height,
        bytes: encode(buf, &image, encoding)?,
    })
}

/// A decoded frame: 8-bit sRGB or linear float radiance.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Rgb8 { dims: Dims, data: Vec<u8> },
    Radiance { dims: Dims, rgb: Vec<[f32; 3]> },
}

impl Decoded {
    pub fn dims(&self) -> Dims {
        match self {
            Decoded::Rgb8 { dims, .. } | Decoded::Radiance { dims, .. } => *dims,
        }
    }

    /// Pixels as floats: radiance as is, 8-bit values scaled to [0, 1].
    pub fn to_f32(&self) -> Vec<[f32; 3]> {
        match self {
            Decoded::Radiance { rgb, .. } => rgb.clone(),
            Decoded::Rgb8 { data, .. } => data
                .chunks_exact(3)
                .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
                .collect(),
        }
    }
}

pub fn decode_frame(f: &FrameImage) -> anyhow::Result<Decoded> {
    let dims = Dims::new(f.width, f.height);
    let expect = |n: usize| -> anyhow::Result<()> {
        if f.bytes.len() != n {
            bail!("frame {} carries {} bytes, expected {n}", f.frame_id, f.bytes.len());
        }
        Ok(())
    };
    match f.encoding {
        Encoding::RawRgb8 => {
            expect(dims.pixel_count() * 3)?;
            Ok(Decoded::Rgb8 { dims, data: f.bytes.clone() })
        }
        Encoding::Png | Encoding::Jpeg => {
            let format = if f.encoding == Encoding::Png { image::ImageFormat::Png } else { image::ImageFormat::Jpeg };
            let img = image::load_from_memory_with_format(&f.bytes, format)?.to_rgb8();
            if img.dimensions() != (f.width, f.height) {
                bail!("decoded image is {:?}, header says {}x{}", img.dimensions(), f.width, f.height);
            }
            Ok(Decoded::Rgb8 { dims, data: img.into_raw() })
        }
        Encoding::RadianceF32 => {
            expect(dims.pixel_count() * 12)?;
            let rgb = f
                .bytes
                .chunks_exact(12)
                .map(|c| {
                    let g = |k: usize| f32::from_le_bytes(c[k..k + 4].try_into().unwrap());
                    [g(0), g(4), g(8)]
                })
                .collect();
            Ok(Decoded::Radiance { dims, rgb })
        }
    }
}

pub fn file_extension(e: Encoding) -> &'static str {
    match e {
        Encoding::RawRgb8 => "rgb",
        Encoding::Png => "png",
        Encoding::Jpeg => "jpg",
        Encoding::RadianceF32 => "pfm",
    }
}

/// Writes a frame to disk: radiance dumps as PFM, compressed images verbatim,
/// raw 8-bit frames as PNG.
pub fn save_frame(f: &FrameImage, path: &Path) -> anyhow::Result<()> {
    match decode_frame(f)? {
        Decoded::Radiance { dims, rgb } => write_pfm(path, dims, &rgb)?,
        Decoded::Rgb8 { dims, data } if f.encoding == Encoding::RawRgb8 => {
            image::save_buffer(path.with_extension("png"), &data, dims.width, dims.height, ExtendedColorType::Rgb8)?
        }
        Decoded::Rgb8 { .. } => std::fs::write(path, &f.bytes)?,
    }
    Ok(())
}

/// Portable float map, little endian, rows stored bottom to top.
pub fn write_pfm(path: &Path, dims: Dims, rgb: &[[f32; 3]]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "PF\n{} {}\n-1.0\n", dims.width, dims.height)?;
    for y in (0..dims.height as usize).rev() {
        for p in &rgb[y * dims.width as usize..(y + 1) * dims.width as usize] {
            for c in p {
                f.write_all(&c.to_le_bytes())?;
            }
        }
    }
    f.flush()
}

pub fn read_pfm(path: &Path) -> anyhow::Result<(Dims, Vec<[f32; 3]>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?);
    let mut line = String::new();
    let mut next_line = |r: &mut std::io::BufReader<std::fs::File>| -> anyhow::Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "PF" {
        bail!("{} is not an RGB PFM file", path.display());
    }
    let size = next_line(&mut r)?;
    let mut it = size.split_whitespace().map(str::parse::<u32>);
    let (Some(Ok(w)), Some(Ok(h))) = (it.next(), it.next()) else { bail!("bad PFM size line {size:?}") };
    let scale: f32 = next_line(&mut r)?.parse()?;
    let little = scale < 0.0;
    let mut data = Vec::new();
    std::io::Read::read_to_end(&mut r, &mut data)?;
    let n = w as usize * h as usize;
    if data.len() != n * 12 {
        bail!("PFM body has {} bytes, expected {}", data.len(), n * 12);
    }
    let mut rgb = vec![[0.0f32; 3]; n];
    for (i, c) in data.chunks_exact(12).enumerate() {
        let g = |k: usize| {
            let b: [u8; 4] = c[k..k + 4].try_into().unwrap();
            if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
        };
        let (x, y) = (i % w as usize, h as usize - 1 - i / w as usize);
        rgb[y * w as usize + x] = [g(0), g(4), g(8)];
    }
    Ok((Dims::new(w, h), rgb))
}

/// Loads a reference image: PFM as linear radiance, anything else as 8-bit.
pub fn load_reference(path: &Path) -> anyhow::Result<Decoded> {
    if path.extension().is_some_and(|e| e == "pfm") {
        let (dims, rgb) = read_pfm(path)?;
        return Ok(Decoded::Radiance { dims, rgb });
    }
    let img = image::open(path).with_context(|| format!("open {}", path.display()))?.to_rgb8();
    let dims = Dims::new(img.width(), img.height());
    Ok(Decoded::Rgb8 { dims, data: img.into_raw() })
}
