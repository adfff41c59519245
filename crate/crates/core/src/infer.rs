//! Tiled full-map prediction: overlapping tiles, per-tile logit smoothing,
//! edge cropping and mosaicking.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{gaussian_blur, reflect_index, FloatGrid, GeoRef, GridError, LabelGrid, UNLABELED};
use crate::net::{predict, NetConfig, NetError, NetParams, Tensor4};
use crate::train::normalize_features;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error("dtm and chm extents differ")]
    Extent,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, InferError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub tile_px: usize,
    pub crop_px: usize,
    pub blur_sigma_px: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { tile_px: 2048, crop_px: 64, blur_sigma_px: 1.0 }
    }
}

impl InferConfig {
    pub fn desk() -> Self {
        InferConfig { tile_px: 128, crop_px: 32, blur_sigma_px: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_px <= 2 * self.crop_px {
            return Err(InferError::Config(format!("tile {} leaves no interior after cropping {} per side", self.tile_px, self.crop_px)));
        }
        if !(self.blur_sigma_px >= 0.0) {
            return Err(InferError::Config(format!("blur sigma {}", self.blur_sigma_px)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.tile_px - 2 * self.crop_px
    }
}

/// One axis of a tile: reads `[read_start, read_start + tile)` (reflected when
/// past the extent) and writes `[write_start, write_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub read_start: usize,
    pub write_start: usize,
    pub write_end: usize,
}

/// Tile spans along one axis.
pub fn axis_plan(extent: usize, tile: usize, crop: usize) -> Result<Vec<Span>> {
    if tile <= 2 * crop {
        return Err(InferError::Config(format!("tile {tile} with crop {crop}")));
    }
    if extent == 0 {
        return Ok(Vec::new());
    }
    if extent <= tile {
        return Ok(vec![Span { read_start: 0, write_start: 0, write_end: extent }]);
    }
    let stride = tile - 2 * crop;
    let mut starts = Vec::new();
    let mut p = 0;
    while p + tile < extent {
        starts.push(p);
        p += stride;
    }
    starts.push(extent - tile);
    let mut spans = Vec::with_capacity(starts.len());
    let mut prev_end = 0;
    for (i, &s) in starts.iter().enumerate() {
        let end = if i + 1 == starts.len() { extent } else { s + tile - crop };
        spans.push(Span { read_start: s, write_start: prev_end, write_end: end });
        prev_end = end;
    }
    Ok(spans)
}

/// A 2-D tile: column and row spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileWindow {
    pub cols: Span,
    pub rows: Span,
}

pub fn tile_plan(width: usize, height: usize, cfg: &InferConfig) -> Result<Vec<TileWindow>> {
    cfg.validate()?;
    let cols = axis_plan(width, cfg.tile_px, cfg.crop_px)?;
    let rows = axis_plan(height, cfg.tile_px, cfg.crop_px)?;
    Ok(rows.iter().flat_map(|r| cols.iter().map(move |c| TileWindow { cols: *c, rows: *r })).collect())
}

/// `tile x tile` window starting at `(col0, row0)`, reflecting past the edges.
pub fn read_window(src: &[f32], width: usize, height: usize, col0: usize, row0: usize, tile: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(tile * tile);
    for r in 0..tile {
        let rr = reflect_index((row0 + r) as isize, height);
        for c in 0..tile {
            out.push(src[rr * width + reflect_index((col0 + c) as isize, width)]);
        }
    }
    out
}

/// Runs `f` on every tile and stitches the write windows. `f` receives the
/// tile and returns `channels` planes of `tile x tile` samples.
pub fn mosaic<F>(width: usize, height: usize, cfg: &InferConfig, channels: usize, f: F) -> Result<Vec<Vec<f32>>>
where
    F: Fn(&TileWindow) -> Result<Vec<Vec<f32>>> + Sync,
{
    let plan = tile_plan(width, height, cfg)?;
    let results: Vec<Vec<Vec<f32>>> = plan.par_iter().map(&f).collect::<Result<_>>()?;
    let t = cfg.tile_px;
    let mut out = vec![vec![0f32; width * height]; channels];
    for (win, planes) in plan.iter().zip(&results) {
        for (ch, plane) in planes.iter().enumerate().take(channels) {
            for r in win.rows.write_start..win.rows.write_end {
                let tr = r - win.rows.read_start;
                let dst = &mut out[ch][r * width + win.cols.write_start..r * width + win.cols.write_end];
                let c0 = win.cols.write_start - win.cols.read_start;
                dst.copy_from_slice(&plane[tr * t + c0..tr * t + c0 + dst.len()]);
            }
        }
    }
    Ok(out)
}

fn fill_nodata(grid: &FloatGrid, fallback: f32) -> Vec<f32> {
    grid.samples.iter().map(|v| if grid.is_nodata(*v) { fallback } else { *v }).collect()
}

fn valid_mean(grid: &FloatGrid) -> f32 {
    let (sum, n) = grid.samples.iter().filter(|v| !grid.is_nodata(**v)).fold((0.0f64, 0usize), |(s, n), v| (s + *v as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

/// Per-pixel argmax; ties resolve to the lowest class code.
pub fn argmax_labels(georef: GeoRef, logits: &[FloatGrid]) -> Result<LabelGrid> {
    let n = georef.len();
    let mut out = vec![0u8; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c].samples[i] > logits[best].samples[i] {
                best = c;
            }
        }
        *o = best as u8;
    }
    Ok(LabelGrid::new(georef, out)?)
}

/// Species map and the mosaicked logit stack (one grid per class).
pub fn predict_map(dtm: &FloatGrid, chm: &FloatGrid, params: &NetParams<f32>, ncfg: &NetConfig, icfg: &InferConfig) -> Result<(LabelGrid, Vec<FloatGrid>)> {
    icfg.validate()?;
    ncfg.validate()?;
    if dtm.georef != chm.georef {
        return Err(InferError::Extent);
    }
    if icfg.tile_px % ncfg.size_divisor() != 0 {
        return Err(InferError::Config(format!("tile {} not divisible by {}", icfg.tile_px, ncfg.size_divisor())));
    }
    let g = dtm.georef;
    let (w, h) = (g.width, g.height);
    let dtm_v = fill_nodata(dtm, valid_mean(dtm));
    let chm_v = fill_nodata(chm, 0.0);
    let t = icfg.tile_px;
    let tile_ref = GeoRef { origin_x: 0.0, origin_y: 0.0, pixel_size: 1.0, width: t, height: t };
    let planes = mosaic(w, h, icfg, ncfg.out_channels, |win| {
        let d = read_window(&dtm_v, w, h, win.cols.read_start, win.rows.read_start, t);
        let c = read_window(&chm_v, w, h, win.cols.read_start, win.rows.read_start, t);
        let x = Tensor4::from_vec([1, 2, t, t], normalize_features(&d, &c));
        let logits = predict(params, ncfg, &x)?;
        let mut out = Vec::with_capacity(ncfg.out_channels);
        for ch in 0..ncfg.out_channels {
            let plane = logits.data[ch * t * t..(ch + 1) * t * t].to_vec();
            if icfg.blur_sigma_px > 0.0 {
                let grid = FloatGrid { georef: tile_ref, samples: plane, nodata: None };
                out.push(gaussian_blur(&grid, icfg.blur_sigma_px)?.samples);
            } else {
                out.push(plane);
            }
        }
        Ok(out)
    })?;
    let logits: Vec<FloatGrid> = planes.into_iter().map(|p| FloatGrid { georef: g, samples: p, nodata: None }).collect();
    let species = argmax_labels(g, &logits)?;
    Ok((species, logits))
}

pub fn palette(code: u8) -> [u8; 3] {
    match code {
        0 => [255, 255, 255],
        1 => [102, 194, 64],
        2 => [236, 134, 30],
        3 => [22, 94, 46],
        UNLABELED => [0, 0, 0],
        _ => [255, 0, 255],
    }
}

/// Binary portable pixmap of a label map.
pub fn encode_ppm(labels: &LabelGrid) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for c in &labels.samples {
        out.extend_from_slice(&palette(*c));
    }
    out
}

pub fn write_ppm(labels: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(labels))?;
    Ok(())
}
