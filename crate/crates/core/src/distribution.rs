//! Planning and merging render work across participants.
//!
//! Three strategies are supported:
//!
//! * **tile**: the image is cut into fixed-size rectangles dealt round-robin;
//! * **sample**: every participant renders every pixel with a disjoint slice of
//!   the global sample indices, and buffers are sum-merged;
//! * **stride**: with `n = w_n * h_n` participants, participant `k` renders a
//!   `width/w_n x height/h_n` image whose pixel `(i, j)` samples the `k`-th cell of
//!   block `(i, j)` in the final image. Sample bounds are scaled by
//!   `(1/w_n, 1/h_n)` and translated to the cell.
//!
//! Participant 0 is the master; workers follow in connection order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, RadianceBuffer};
use crate::camera::{Camera, Dims, PixelTransform};
use crate::render::{render_region, Rect, Region, RenderOutput, RenderSettings, SampleRange};
use crate::scene::Scene;

pub const DEFAULT_TILE_SIZE: (u32, u32) = (64, 64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistributionError {
    #[error("at least one participant is required")]
    NoParticipants,
    #[error("participant {k} out of range for {n} participants")]
    OutOfRange { k: u32, n: u32 },
    #[error(
        "cannot stride {width}x{height} across {participants} participants: no factor pair (w_n, h_n) \
         divides the image (width must be divisible by w_n and height by h_n)"
    )]
    NoFeasibleLayout { participants: u32, width: u32, height: u32 },
    #[error("stride layout {w_n}x{h_n} does not divide {width}x{height}")]
    Indivisible { w_n: u32, h_n: u32, width: u32, height: u32 },
    #[error("samples per pixel must be at least 1")]
    ZeroSpp,
    #[error("tile size must be positive")]
    ZeroTile,
    #[error("no buffer for participant {0}")]
    MissingBuffer(u32),
    #[error("more than one buffer for participant {0}")]
    DuplicateBuffer(u32),
    #[error("at least one buffer is required")]
    NoBuffers,
    #[error("tiles overlap at pixel ({0}, {1})")]
    TileOverlap(u32, u32),
    #[error("pixel ({0}, {1}) is not covered by any tile")]
    TileGap(u32, u32),
    #[error("tile {0:?} lies outside the image")]
    TileOutside(Rect),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Tile,
    Sample,
    Stride,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tile" => Ok(Strategy::Tile),
            "sample" => Ok(Strategy::Sample),
            "stride" => Ok(Strategy::Stride),
            _ => Err(format!("unknown strategy {s:?} (expected tile, sample or stride)")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Tile => "tile",
            Strategy::Sample => "sample",
            Strategy::Stride => "stride",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideLayout {
    pub w_n: u32,
    pub h_n: u32,
    pub full: Dims,
}

impl StrideLayout {
    pub fn new(w_n: u32, h_n: u32, full: Dims) -> Result<StrideLayout, DistributionError> {
        if w_n == 0 || h_n == 0 {
            return Err(DistributionError::NoParticipants);
        }
        if full.width % w_n != 0 || full.height % h_n != 0 {
            return Err(DistributionError::Indivisible { w_n, h_n, width: full.width, height: full.height });
        }
        Ok(StrideLayout { w_n, h_n, full })
    }

    /// Factor pair of `participants` whose ratio `w_n / h_n` is closest (in log space)
    /// to the image aspect, among pairs that divide the image. Ties prefer `w_n >= h_n`.
    pub fn choose(participants: u32, full: Dims) -> Result<StrideLayout, DistributionError> {
        if participants == 0 {
            return Err(DistributionError::NoParticipants);
        }
        let aspect = (full.width as f64 / full.height as f64).ln();
        (1..=participants)
            .filter(|w| participants % w == 0)
            .map(|w| (w, participants / w))
            .filter(|&(w, h)| full.width % w == 0 && full.height % h == 0)
            .min_by(|a, b| {
                let da = ((a.0 as f64 / a.1 as f64).ln() - aspect).abs();
                let db = ((b.0 as f64 / b.1 as f64).ln() - aspect).abs();
                da.partial_cmp(&db).unwrap().then((b.0 >= b.1).cmp(&(a.0 >= a.1)))
            })
            .map(|(w_n, h_n)| StrideLayout { w_n, h_n, full })
            .ok_or(DistributionError::NoFeasibleLayout { participants, width: full.width, height: full.height })
    }

    pub fn participants(&self) -> u32 {
        self.w_n * self.h_n
    }

    pub fn sub_dims(&self) -> Dims {
        Dims::new(self.full.width / self.w_n, self.full.height / self.h_n)
    }

    /// Intra-block cell `(x, y)` rendered by participant `k` (row-major).
    pub fn block_offset(&self, k: u32) -> (u32, u32) {
        (k % self.w_n, k / self.w_n)
    }

    /// Final-image pixel for participant `k`'s pixel `(i, j)`.
    pub fn final_pixel(&self, k: u32, i: u32, j: u32) -> (u32, u32) {
        let (ox, oy) = self.block_offset(k);
        (i * self.w_n + ox, j * self.h_n + oy)
    }

    /// Participant and sub-image pixel that own final pixel `(x, y)`.
    pub fn owner(&self, x: u32, y: u32) -> (u32, u32, u32) {
        let k = (y % self.h_n) * self.w_n + x % self.w_n;
        (k, x / self.w_n, y / self.h_n)
    }
}

/// Transform and sub-image size for participant `k`.
pub fn stride_transform(k: u32, layout: &StrideLayout) -> Result<(PixelTransform, Dims), DistributionError> {
    let n = layout.participants();
    if k >= n {
        return Err(DistributionError::OutOfRange { k, n });
    }
    let sx = 1.0 / layout.w_n as f32;
    let sy = 1.0 / layout.h_n as f32;
    let (ox, oy) = layout.block_offset(k);
    let transform = PixelTransform { scale: (sx, sy), translate: (sx * ox as f32, sy * oy as f32) };
    Ok((transform, layout.sub_dims()))
}

fn check_same(expected: &RadianceBuffer, b: &RadianceBuffer, dims: Dims) -> Result<(), DistributionError> {
    if b.dims != dims {
        return Err(BufferError::Dims { expected: dims, found: b.dims }.into());
    }
    if b.spp != expected.spp {
        return Err(BufferError::Spp { expected: expected.spp, found: b.spp }.into());
    }
    if b.frame_id != expected.frame_id {
        return Err(BufferError::Frame { expected: expected.frame_id, found: b.frame_id }.into());
    }
    Ok(())
}

fn collect_parts<'a>(
    parts: impl IntoIterator<Item = (u32, &'a RadianceBuffer)>,
    n: u32,
) -> Result<Vec<&'a RadianceBuffer>, DistributionError> {
    let mut map = BTreeMap::new();
    for (k, b) in parts {
        if k >= n {
            return Err(DistributionError::OutOfRange { k, n });
        }
        if map.insert(k, b).is_some() {
            return Err(DistributionError::DuplicateBuffer(k));
        }
    }
    (0..n).map(|k| map.get(&k).copied().ok_or(DistributionError::MissingBuffer(k))).collect()
}

/// Interleaves strided sub-buffers into the full image. Every output pixel is written
/// by exactly one participant, so rows are filled in parallel.
pub fn merge_stride<'a>(
    parts: impl IntoIterator<Item = (u32, &'a RadianceBuffer)>,
    layout: &StrideLayout,
) -> Result<RadianceBuffer, DistributionError> {
    let parts = collect_parts(parts, layout.participants())?;
    let first = parts[0];
    for b in &parts {
        check_same(first, b, layout.sub_dims())?;
    }
    let mut out = RadianceBuffer::new(layout.full, first.spp, first.frame_id);
    let width = layout.full.width as usize;
    out.rgb.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            let (k, i, j) = layout.owner(x as u32, y as u32);
            *px = parts[k as usize].sum(i, j);
        }
    });
    Ok(out)
}

/// `(seed, global sample range)` per participant: participant `p` gets samples
/// `[p * per_node_spp, (p + 1) * per_node_spp)` of the shared seed namespace.
pub fn split_samples(participants: u32, per_node_spp: u32, seed: u64) -> Vec<(u64, SampleRange)> {
    (0..participants).map(|p| (seed, SampleRange::new(p * per_node_spp, per_node_spp))).collect()
}

/// Sum-merge of full-resolution buffers: sums add, sample counts add.
pub fn merge_samples<'a>(
    buffers: impl IntoIterator<Item = &'a RadianceBuffer>,
) -> Result<RadianceBuffer, DistributionError> {
    let mut it = buffers.into_iter();
    let first = it.next().ok_or(DistributionError::NoBuffers)?;
    let mut out = first.clone();
    for b in it {
        if b.dims != out.dims {
            return Err(BufferError::Dims { expected: out.dims, found: b.dims }.into());
        }
        if b.frame_id != out.frame_id {
            return Err(BufferError::Frame { expected: out.frame_id, found: b.frame_id }.into());
        }
        for (o, s) in out.rgb.iter_mut().zip(&b.rgb) {
            o[0] += s[0];
            o[1] += s[1];
            o[2] += s[2];
        }
        out.spp += b.spp;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub dims: Dims,
    pub tiles: Vec<Rect>,
}

impl TileGrid {
    /// Row-major tiles of `tile_size`; edge tiles are clipped to the image.
    pub fn new(dims: Dims, tile_size: (u32, u32)) -> Result<TileGrid, DistributionError> {
        let (tw, th) = tile_size;
        if tw == 0 || th == 0 {
            return Err(DistributionError::ZeroTile);
        }
        let mut tiles = Vec::new();
        for y in (0..dims.height).step_by(th as usize) {
            for x in (0..dims.width).step_by(tw as usize) {
                tiles.push(Rect::new(x, y, tw.min(dims.width - x), th.min(dims.height - y)));
            }
        }
        Ok(TileGrid { dims, tiles })
    }

    /// Accepts an arbitrary rectangle list if it partitions the image exactly.
    pub fn from_rects(dims: Dims, tiles: Vec<Rect>) -> Result<TileGrid, DistributionError> {
        let mut cover = vec![false; dims.pixel_count()];
        for t in &tiles {
            if t.x + t.width > dims.width || t.y + t.height > dims.height {
                return Err(DistributionError::TileOutside(*t));
            }
            for y in t.y..t.y + t.height {
                for x in t.x..t.x + t.width {
                    let i = (y * dims.width + x) as usize;
                    if cover[i] {
                        return Err(DistributionError::TileOverlap(x, y));
                    }
                    cover[i] = true;
                }
            }
        }
        if let Some(i) = cover.iter().position(|c| !c) {
            return Err(DistributionError::TileGap(i as u32 % dims.width, i as u32 / dims.width));
        }
        Ok(TileGrid { dims, tiles })
    }
}

pub fn make_tiles(dims: Dims, tile_size: (u32, u32)) -> Result<TileGrid, DistributionError> {
    TileGrid::new(dims, tile_size)
}

/// Writes each tile buffer into its rectangle. `parts` is keyed by tile index.
pub fn merge_tiles<'a>(
    parts: impl IntoIterator<Item = (u32, &'a RadianceBuffer)>,
    grid: &TileGrid,
) -> Result<RadianceBuffer, DistributionError> {
    let parts = collect_parts(parts, grid.tiles.len() as u32)?;
    let first = parts[0];
    let mut out = RadianceBuffer::new(grid.dims, first.spp, first.frame_id);
    for (t, b) in grid.tiles.iter().zip(&parts) {
        check_same(first, b, t.dims())?;
        blit(&mut out, t, &b.rgb);
    }
    Ok(out)
}

fn blit(out: &mut RadianceBuffer, t: &Rect, src: &[[f32; 3]]) {
    let w = out.dims.width as usize;
    for row in 0..t.height as usize {
        let dst = (t.y as usize + row) * w + t.x as usize;
        out.rgb[dst..dst + t.width as usize].copy_from_slice(&src[row * t.width as usize..(row + 1) * t.width as usize]);
    }
}

/// What one participant renders.
#[derive(Debug, Clone, PartialEq)]
pub enum ParticipantWork {
    /// Tiles in render order; the participant ships them packed into one buffer of
    /// `(total pixels) x 1`, tile after tile, each tile row-major.
    Tiles { tiles: Vec<Rect>, samples: SampleRange },
    Samples { seed: u64, samples: SampleRange },
    Stride { k: u32, transform: PixelTransform, sub_dims: Dims, samples: SampleRange },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkAssignment {
    pub strategy: Strategy,
    pub dims: Dims,
    pub seed: u64,
    /// Samples each participant takes per pixel it renders.
    pub per_node_spp: u32,
    pub stride: Option<StrideLayout>,
    pub grid: Option<TileGrid>,
    pub participants: Vec<ParticipantWork>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub tile_size: (u32, u32),
    pub seed: u64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { tile_size: DEFAULT_TILE_SIZE, seed: 0 }
    }
}

/// Splits a frame of `dims` at `per_node_spp` across `participants`.
pub fn plan(
    strategy: Strategy,
    participants: u32,
    dims: Dims,
    per_node_spp: u32,
    options: PlanOptions,
) -> Result<WorkAssignment, DistributionError> {
    if participants == 0 {
        return Err(DistributionError::NoParticipants);
    }
    if per_node_spp == 0 {
        return Err(DistributionError::ZeroSpp);
    }
    let samples = SampleRange::spp(per_node_spp);
    let mut stride = None;
    let mut grid = None;
    let work = match strategy {
        Strategy::Tile => {
            let g = make_tiles(dims, options.tile_size)?;
            let mut per: Vec<Vec<Rect>> = vec![Vec::new(); participants as usize];
            for (i, t) in g.tiles.iter().enumerate() {
                per[i % participants as usize].push(*t);
            }
            grid = Some(g);
            per.into_iter().map(|tiles| ParticipantWork::Tiles { tiles, samples }).collect()
        }
        Strategy::Sample => split_samples(participants, per_node_spp, options.seed)
            .into_iter()
            .map(|(seed, samples)| ParticipantWork::Samples { seed, samples })
            .collect(),
        Strategy::Stride => {
            let layout = StrideLayout::choose(participants, dims)?;
            stride = Some(layout);
            (0..participants)
                .map(|k| {
                    let (transform, sub_dims) = stride_transform(k, &layout)?;
                    Ok(ParticipantWork::Stride { k, transform, sub_dims, samples })
                })
                .collect::<Result<Vec<_>, DistributionError>>()?
        }
    };
    Ok(WorkAssignment { strategy, dims, seed: options.seed, per_node_spp, stride, grid, participants: work })
}

impl WorkAssignment {
    pub fn participant_count(&self) -> u32 {
        self.participants.len() as u32
    }

    /// Dimensions of the buffer participant `p` ships.
    pub fn share_dims(&self, p: u32) -> Dims {
        match &self.participants[p as usize] {
            ParticipantWork::Tiles { tiles, .. } => Dims::new(tiles.iter().map(Rect::area).sum::<usize>() as u32, 1),
            ParticipantWork::Samples { .. } => self.dims,
            ParticipantWork::Stride { sub_dims, .. } => *sub_dims,
        }
    }

    /// Pixel-samples participant `p` computes per frame.
    pub fn pixel_samples(&self, p: u32) -> u64 {
        self.share_dims(p).pixel_count() as u64 * self.per_node_spp as u64
    }

    /// Total samples per pixel of the merged frame.
    pub fn total_spp(&self) -> u32 {
        match self.strategy {
            Strategy::Sample => self.per_node_spp * self.participant_count(),
            Strategy::Tile | Strategy::Stride => self.per_node_spp,
        }
    }

    /// Renders participant `p`'s share.
    pub fn render_share(&self, p: u32, scene: &Scene, camera: &Camera, max_depth: u32) -> RenderOutput {
        let settings = RenderSettings { seed: self.seed, max_depth };
        match &self.participants[p as usize] {
            ParticipantWork::Samples { seed, samples } => {
                let settings = RenderSettings { seed: *seed, max_depth };
                render_region(scene, camera, &Region::full(self.dims), *samples, &settings)
            }
            ParticipantWork::Stride { transform, sub_dims, samples, .. } => {
                render_region(scene, camera, &Region::strided(*sub_dims, *transform), *samples, &settings)
            }
            ParticipantWork::Tiles { tiles, samples } => {
                let mut rgb = Vec::with_capacity(self.share_dims(p).pixel_count());
                let mut bad = 0;
                for t in tiles {
                    let out = render_region(scene, camera, &Region::tile(self.dims, *t), *samples, &settings);
                    rgb.extend_from_slice(&out.buffer.rgb);
                    bad += out.nonfinite_samples;
                }
                let buffer = RadianceBuffer { dims: self.share_dims(p), spp: samples.count, frame_id: scene.frame_time(), rgb };
                RenderOutput { buffer, nonfinite_samples: bad }
            }
        }
    }

    /// Merges one buffer per participant into the full frame.
    pub fn merge<'a>(
        &self,
        parts: impl IntoIterator<Item = (u32, &'a RadianceBuffer)>,
    ) -> Result<RadianceBuffer, DistributionError> {
        let n = self.participant_count();
        match self.strategy {
            Strategy::Stride => merge_stride(parts, self.stride.as_ref().expect("stride plan has a layout")),
            Strategy::Sample => {
                let parts = collect_parts(parts, n)?;
                merge_samples(parts)
            }
            Strategy::Tile => {
                let parts = collect_parts(parts, n)?;
                let grid = self.grid.as_ref().expect("tile plan has a grid");
                let first = parts[0];
                let mut out = RadianceBuffer::new(self.dims, first.spp, first.frame_id);
                for (p, b) in parts.iter().enumerate() {
                    check_same(first, b, self.share_dims(p as u32))?;
                    let ParticipantWork::Tiles { tiles, .. } = &self.participants[p] else { unreachable!() };
                    let mut offset = 0;
                    for t in tiles {
                        blit(&mut out, t, &b.rgb[offset..offset + t.area()]);
                        offset += t.area();
                    }
                }
                debug_assert_eq!(grid.tiles.len(), self.participants.iter().map(|w| match w {
                    ParticipantWork::Tiles { tiles, .. } => tiles.len(),
                    _ => 0,
                }).sum::<usize>());
                Ok(out)
            }
        }
    }
}
