//! Contrast limited adaptive histogram equalization on 8-bit images.
//!
//! Tiles: `tiles_x * tiles_y` regions, the last row/column of tiles absorbs
//! the remainder pixels. Each tile histogram is clipped at
//! `max(1, floor(clip_limit * area / 256))`; the clipped mass is spread as
//! `excess / 256` per bin plus one extra unit on bins `0..excess % 256`.
//! Pixels are mapped by bilinear interpolation between the four nearest tile
//! centres, clamped to the nearest mapping outside the centre lattice. The
//! interpolation is done in exact integer arithmetic and rounded half-up.

use serde::{Deserialize, Serialize};

use super::{GrayImage, ImageError};

pub const BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub clip_limit: f64,
    /// `(tiles_x, tiles_y)`
    pub grid: (usize, usize),
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self { clip_limit: 2.0, grid: (8, 8) }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<(), ImageError> {
        if !(self.clip_limit > 0.0) || !self.clip_limit.is_finite() {
            return Err(ImageError::InvalidParam(format!("clip_limit must be positive, got {}", self.clip_limit)));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(ImageError::InvalidParam("CLAHE grid must be at least 1x1".into()));
        }
        Ok(())
    }
}

/// Tile boundaries along one axis: `bounds[t]..bounds[t + 1]`.
fn tile_bounds(len: usize, tiles: usize) -> Vec<usize> {
    let step = len / tiles;
    let mut b: Vec<usize> = (0..tiles).map(|t| t * step).collect();
    b.push(len);
    b
}

/// Per-tile lookup tables, row-major over tiles.
#[derive(Debug, Clone)]
pub struct TileMappings {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tables: Vec<[u8; BINS]>,
}

impl TileMappings {
    pub fn table(&self, tx: usize, ty: usize) -> &[u8; BINS] {
        &self.tables[ty * self.tiles_x + tx]
    }
}

fn tile_table(hist: &mut [u32; BINS], area: u32, clip_limit: f64) -> [u8; BINS] {
    let clip = ((clip_limit * area as f64 / BINS as f64).floor() as u32).max(1);
    let mut excess = 0u32;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let batch = excess / BINS as u32;
    let residual = (excess % BINS as u32) as usize;
    for (i, h) in hist.iter_mut().enumerate() {
        *h += batch + u32::from(i < residual);
    }

    let mut table = [0u8; BINS];
    let cdf_min = hist.iter().copied().find(|&h| h > 0).unwrap_or(0) as u64;
    let denom = area as u64 - cdf_min;
    let mut cdf = 0u64;
    for (v, &h) in hist.iter().enumerate() {
        cdf += h as u64;
        table[v] = if denom == 0 {
            v as u8
        } else {
            let num = cdf.saturating_sub(cdf_min) * 255;
            ((2 * num + denom) / (2 * denom)).min(255) as u8
        };
    }
    table
}

/// Builds the clipped-histogram mapping of every tile.
pub fn clahe_tile_mappings(img: &GrayImage, p: &ClaheParams) -> Result<TileMappings, ImageError> {
    p.validate()?;
    let (tiles_x, tiles_y) = p.grid;
    let (w, h) = (img.width(), img.height());
    if w < tiles_x || h < tiles_y {
        return Err(ImageError::Grid { width: w, height: h, tiles_x, tiles_y });
    }
    let xb = tile_bounds(w, tiles_x);
    let yb = tile_bounds(h, tiles_y);
    let px = img.pixels();
    let mut tables = Vec::with_capacity(tiles_x * tiles_y);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0u32; BINS];
            for y in yb[ty]..yb[ty + 1] {
                for &v in &px[y * w + xb[tx]..y * w + xb[tx + 1]] {
                    hist[v as usize] += 1;
                }
            }
            let area = ((yb[ty + 1] - yb[ty]) * (xb[tx + 1] - xb[tx])) as u32;
            tables.push(tile_table(&mut hist, area, p.clip_limit));
        }
    }
    Ok(TileMappings { tiles_x, tiles_y, tables })
}

/// Interpolation stencil along one axis, in doubled coordinates so that tile
/// centres `(start + end - 1) / 2` stay integral: `(t0, t1, d, span)` means
/// weight `(span - d) / span` on tile `t0` and `d / span` on `t1`.
fn axis_stencil(len: usize, bounds: &[usize]) -> Vec<(usize, usize, u64, u64)> {
    let tiles = bounds.len() - 1;
    let centers: Vec<i64> = (0..tiles).map(|t| (bounds[t] + bounds[t + 1]) as i64 - 1).collect();
    let mut out = Vec::with_capacity(len);
    let mut t = 0usize;
    for x in 0..len {
        let x2 = 2 * x as i64;
        if x2 <= centers[0] {
            out.push((0, 0, 0, 1));
        } else if x2 >= centers[tiles - 1] {
            out.push((tiles - 1, tiles - 1, 0, 1));
        } else {
            while centers[t + 1] <= x2 {
                t += 1;
            }
            let span = (centers[t + 1] - centers[t]) as u64;
            out.push((t, t + 1, (x2 - centers[t]) as u64, span));
        }
    }
    out
}

pub fn clahe(img: &GrayImage, p: &ClaheParams) -> Result<GrayImage, ImageError> {
    let maps = clahe_tile_mappings(img, p)?;
    let (w, h) = (img.width(), img.height());
    let xs = axis_stencil(w, &tile_bounds(w, p.grid.0));
    let ys = axis_stencil(h, &tile_bounds(h, p.grid.1));
    let src = img.pixels();
    let mut out = Vec::with_capacity(w * h);
    for (y, &(ty0, ty1, dy, sy)) in ys.iter().enumerate() {
        for (x, &(tx0, tx1, dx, sx)) in xs.iter().enumerate() {
            let v = src[y * w + x] as usize;
            let m = |tx: usize, ty: usize| maps.table(tx, ty)[v] as u64;
            let num = (sy - dy) * ((sx - dx) * m(tx0, ty0) + dx * m(tx1, ty0))
                + dy * ((sx - dx) * m(tx0, ty1) + dx * m(tx1, ty1));
            let den = sx * sy;
            out.push(((2 * num + den) / (2 * den)) as u8);
        }
    }
    GrayImage::new(w, h, out)
}
