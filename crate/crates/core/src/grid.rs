//! Georeferenced raster containers, the `CSR1` binary container, ASCII grid
//! interchange, and the raster kernels shared by the rest of the pipeline.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

/// Class codes carried by label grids, in confusion-matrix order.
pub const BACKGROUND: u8 = 0;
pub const BIRCH: u8 = 1;
pub const SCOTS_PINE: u8 = 2;
pub const NORWAY_SPRUCE: u8 = 3;
pub const UNLABELED: u8 = 255;
pub const NUM_CLASSES: usize = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["Background", "Birch", "Scots pine", "Norway spruce"];

/// True for the three species codes.
#[inline]
pub fn is_forest(code: u8) -> bool {
    (BIRCH..=NORWAY_SPRUCE).contains(&code)
}

#[inline]
pub fn is_valid_label(code: u8) -> bool {
    code <= NORWAY_SPRUCE || code == UNLABELED
}

const MAGIC: &[u8; 4] = b"CSR1";
const KIND_FLOAT: u8 = 0;
const KIND_LABEL: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8 * 3;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bad magic bytes {0:?}, expected \"CSR1\"")]
    BadMagic([u8; 4]),
    #[error("unknown raster kind byte {0}")]
    UnknownKind(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload has {found} bytes but header declares {expected}")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("illegal label code {code} at sample {index}")]
    IllegalLabel { code: u8, index: usize },
    #[error("invalid georeference: {0}")]
    InvalidGeoRef(String),
    #[error("georeference mismatch between inputs")]
    GeoRefMismatch,
    #[error("crop rectangle ({col0},{row0},{w},{h}) outside {width}x{height} grid")]
    CropOutOfBounds { col0: usize, row0: usize, w: usize, h: usize, width: usize, height: usize },
    #[error("median window must be odd and >= 1, got {0}")]
    EvenWindow(usize),
    #[error("gaussian sigma must be > 0, got {0}")]
    BadSigma(f64),
    #[error("expected a {expected} raster, file holds a {found} raster")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("ascii grid parse error: {0}")]
    Ascii(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Placement of a grid in map coordinates. The origin is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoRef {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
}

impl GeoRef {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size: f64, width: usize, height: usize) -> Result<Self> {
        let g = GeoRef { origin_x, origin_y, pixel_size, width, height };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            return Err(GridError::InvalidGeoRef(format!("pixel_size {}", self.pixel_size)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GridError::InvalidGeoRef(format!("empty extent {}x{}", self.width, self.height)));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(GridError::InvalidGeoRef("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Map coordinates of the center of pixel (col, row).
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Fractional (col, row) of a map point, measured from the top-left corner.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) / self.pixel_size, (self.origin_y - y) / self.pixel_size)
    }

    /// Same footprint, resampled to a different pixel size.
    pub fn with_pixel_size(&self, pixel_size: f64) -> GeoRef {
        let ratio = self.pixel_size / pixel_size;
        GeoRef {
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_size,
            width: (self.width as f64 * ratio).round() as usize,
            height: (self.height as f64 * ratio).round() as usize,
        }
    }

    pub fn extent_m(&self) -> (f64, f64) {
        (self.width as f64 * self.pixel_size, self.height as f64 * self.pixel_size)
    }

    fn shifted(&self, col0: usize, row0: usize, w: usize, h: usize) -> GeoRef {
        GeoRef {
            origin_x: self.origin_x + col0 as f64 * self.pixel_size,
            origin_y: self.origin_y - row0 as f64 * self.pixel_size,
            pixel_size: self.pixel_size,
            width: w,
            height: h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    pub georef: GeoRef,
    pub samples: Vec<f32>,
    pub nodata: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub georef: GeoRef,
    pub samples: Vec<u8>,
}

/// Either kind of raster, as read from a container file.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    Float(FloatGrid),
    Label(LabelGrid),
}

impl Raster {
    fn kind_name(&self) -> &'static str {
        match self {
            Raster::Float(_) => "float",
            Raster::Label(_) => "label",
        }
    }

    pub fn into_float(self) -> Result<FloatGrid> {
        match self {
            Raster::Float(g) => Ok(g),
            other => Err(GridError::WrongKind { expected: "float", found: other.kind_name() }),
        }
    }

    pub fn into_label(self) -> Result<LabelGrid> {
        match self {
            Raster::Label(g) => Ok(g),
            other => Err(GridError::WrongKind { expected: "label", found: other.kind_name() }),
        }
    }
}

fn check_len(georef: &GeoRef, len: usize) -> Result<()> {
    georef.validate()?;
    if len != georef.len() {
        return Err(GridError::PayloadMismatch { expected: georef.len(), found: len });
    }
    Ok(())
}

fn crop_slice<T: Copy>(src: &[T], src_w: usize, col0: usize, row0: usize, w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w * h);
    for r in row0..row0 + h {
        out.extend_from_slice(&src[r * src_w + col0..r * src_w + col0 + w]);
    }
    out
}

fn check_crop(georef: &GeoRef, col0: usize, row0: usize, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 || col0 + w > georef.width || row0 + h > georef.height {
        return Err(GridError::CropOutOfBounds {
            col0,
            row0,
            w,
            h,
            width: georef.width,
            height: georef.height,
        });
    }
    Ok(())
}

impl FloatGrid {
    pub fn new(georef: GeoRef, samples: Vec<f32>, nodata: Option<f32>) -> Result<Self> {
        check_len(&georef, samples.len())?;
        Ok(FloatGrid { georef, samples, nodata })
    }

    pub fn filled(georef: GeoRef, value: f32) -> Self {
        FloatGrid { samples: vec![value; georef.len()], georef, nodata: None }
    }

    pub fn width(&self) -> usize {
        self.georef.width
    }

    pub fn height(&self) -> usize {
        self.georef.height
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.samples[row * self.georef.width + col]
    }

    #[inline]
    pub fn is_nodata(&self, v: f32) -> bool {
        match self.nodata {
            Some(nd) => v == nd || (nd.is_nan() && v.is_nan()),
            None => false,
        }
    }

    pub fn crop(&self, col0: usize, row0: usize, w: usize, h: usize) -> Result<FloatGrid> {
        check_crop(&self.georef, col0, row0, w, h)?;
        Ok(FloatGrid {
            georef: self.georef.shifted(col0, row0, w, h),
            samples: crop_slice(&self.samples, self.georef.width, col0, row0, w, h),
            nodata: self.nodata,
        })
    }

    /// Largest valid sample, or `None` for an all-nodata grid.
    pub fn max_value(&self) -> Option<f32> {
        self.samples.iter().copied().filter(|v| !self.is_nodata(*v)).reduce(f32::max)
    }
}

impl LabelGrid {
    pub fn new(georef: GeoRef, samples: Vec<u8>) -> Result<Self> {
        check_len(&georef, samples.len())?;
        if let Some((index, &code)) = samples.iter().enumerate().find(|(_, c)| !is_valid_label(**c)) {
            return Err(GridError::IllegalLabel { code, index });
        }
        Ok(LabelGrid { georef, samples })
    }

    pub fn filled(georef: GeoRef, code: u8) -> Self {
        LabelGrid { samples: vec![code; georef.len()], georef }
    }

    pub fn width(&self) -> usize {
        self.georef.width
    }

    pub fn height(&self) -> usize {
        self.georef.height
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.samples[row * self.georef.width + col]
    }

    pub fn crop(&self, col0: usize, row0: usize, w: usize, h: usize) -> Result<LabelGrid> {
        check_crop(&self.georef, col0, row0, w, h)?;
        Ok(LabelGrid {
            georef: self.georef.shifted(col0, row0, w, h),
            samples: crop_slice(&self.samples, self.georef.width, col0, row0, w, h),
        })
    }

    /// Pixel count per class code 0..=3; unlabeled pixels are not counted.
    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &c in &self.samples {
            if (c as usize) < NUM_CLASSES {
                counts[c as usize] += 1;
            }
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

fn write_header(buf: &mut Vec<u8>, kind: u8, g: &GeoRef) {
    buf.extend_from_slice(MAGIC);
    buf.push(kind);
    buf.extend_from_slice(&(g.width as u32).to_le_bytes());
    buf.extend_from_slice(&(g.height as u32).to_le_bytes());
    buf.extend_from_slice(&g.origin_x.to_le_bytes());
    buf.extend_from_slice(&g.origin_y.to_le_bytes());
    buf.extend_from_slice(&g.pixel_size.to_le_bytes());
}

/// Serializes a float grid. A missing nodata value is stored as NaN.
pub fn encode_float(grid: &FloatGrid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 + grid.samples.len() * 4);
    write_header(&mut buf, KIND_FLOAT, &grid.georef);
    buf.extend_from_slice(&grid.nodata.unwrap_or(f32::NAN).to_le_bytes());
    for v in &grid.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn encode_label(grid: &LabelGrid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + grid.samples.len());
    write_header(&mut buf, KIND_LABEL, &grid.georef);
    buf.extend_from_slice(&grid.samples);
    buf
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 4 {
        return Err(GridError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(GridError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(GridError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let kind = bytes[4];
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let georef = GeoRef {
        width: u32_at(5),
        height: u32_at(9),
        origin_x: f64_at(13),
        origin_y: f64_at(21),
        pixel_size: f64_at(29),
    };
    georef.validate()?;
    let n = georef.len();
    match kind {
        KIND_FLOAT => {
            let start = HEADER_LEN + 4;
            let expected = start + n * 4;
            if bytes.len() < expected {
                return Err(GridError::Truncated { expected, found: bytes.len() });
            }
            if bytes.len() > expected {
                return Err(GridError::PayloadMismatch { expected, found: bytes.len() });
            }
            let nd = f32::from_le_bytes(bytes[HEADER_LEN..start].try_into().unwrap());
            let samples = bytes[start..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Raster::Float(FloatGrid { georef, samples, nodata: (!nd.is_nan()).then_some(nd) }))
        }
        KIND_LABEL => {
            let expected = HEADER_LEN + n;
            if bytes.len() < expected {
                return Err(GridError::Truncated { expected, found: bytes.len() });
            }
            if bytes.len() > expected {
                return Err(GridError::PayloadMismatch { expected, found: bytes.len() });
            }
            Ok(Raster::Label(LabelGrid::new(georef, bytes[HEADER_LEN..].to_vec())?))
        }
        k => Err(GridError::UnknownKind(k)),
    }
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    decode_raster(&fs::read(path)?)
}

pub fn load_float(path: impl AsRef<Path>) -> Result<FloatGrid> {
    load_raster(path)?.into_float()
}

pub fn load_label(path: impl AsRef<Path>) -> Result<LabelGrid> {
    load_raster(path)?.into_label()
}

pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let bytes = match raster {
        Raster::Float(g) => encode_float(g),
        Raster::Label(g) => encode_label(g),
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_float(grid: &FloatGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_float(grid))?;
    Ok(())
}

pub fn save_label(grid: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_label(grid))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ASCII grid interchange
// ---------------------------------------------------------------------------

pub fn write_ascii_grid(grid: &FloatGrid, path: impl AsRef<Path>) -> Result<()> {
    let g = &grid.georef;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "ncols {}", g.width)?;
    writeln!(out, "nrows {}", g.height)?;
    writeln!(out, "xllcorner {}", g.origin_x)?;
    writeln!(out, "yllcorner {}", g.origin_y - g.height as f64 * g.pixel_size)?;
    writeln!(out, "cellsize {}", g.pixel_size)?;
    let nd = grid.nodata.unwrap_or(-9999.0);
    writeln!(out, "NODATA_value {nd}")?;
    for row in grid.samples.chunks(g.width) {
        let line: Vec<String> = row.iter().map(|v| if grid.is_nodata(*v) { nd.to_string() } else { v.to_string() }).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<FloatGrid> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut header = std::collections::HashMap::new();
    let mut values = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let mut parts = line.split_whitespace().peekable();
        let Some(first) = parts.peek().copied() else { continue };
        if header.len() < 6 && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            let key = first.to_ascii_lowercase();
            parts.next();
            let val: f64 = parts
                .next()
                .ok_or_else(|| GridError::Ascii(format!("missing value for {key}")))?
                .parse()
                .map_err(|e| GridError::Ascii(format!("{key}: {e}")))?;
            header.insert(key, val);
            continue;
        }
        for tok in parts {
            values.push(tok.parse::<f32>().map_err(|e| GridError::Ascii(format!("value {tok:?}: {e}")))?);
        }
    }
    let get = |k: &str| header.get(k).copied().ok_or_else(|| GridError::Ascii(format!("missing header {k}")));
    let width = get("ncols")? as usize;
    let height = get("nrows")? as usize;
    let cell = get("cellsize")?;
    let georef = GeoRef::new(get("xllcorner")?, get("yllcorner")? + height as f64 * cell, cell, width, height)?;
    let nodata = header.get("nodata_value").map(|v| *v as f32);
    if values.len() < georef.len() {
        return Err(GridError::Truncated { expected: georef.len(), found: values.len() });
    }
    FloatGrid::new(georef, values, nodata)
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Mirror an out-of-range index back into `0..n`, excluding the edge sample
/// (`-1 -> 1`, `n -> n-2`). Repeats for offsets longer than the grid.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// CHM = DSM - DTM, clamped at zero. Nodata in either input yields nodata.
pub fn compute_chm(dsm: &FloatGrid, dtm: &FloatGrid) -> Result<FloatGrid> {
    if dsm.georef != dtm.georef {
        return Err(GridError::GeoRefMismatch);
    }
    let out_nodata = dsm.nodata.or(dtm.nodata).map(|_| -9999.0f32);
    let samples = dsm
        .samples
        .iter()
        .zip(&dtm.samples)
        .map(|(&s, &t)| {
            if dsm.is_nodata(s) || dtm.is_nodata(t) {
                out_nodata.unwrap()
            } else {
                (s - t).max(0.0)
            }
        })
        .collect();
    Ok(FloatGrid { georef: dsm.georef, samples, nodata: out_nodata })
}

/// Normalized 1-D gaussian weights over `-radius..=radius`, radius = ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Separable gaussian blur with reflected borders. Nodata samples are skipped
/// and the remaining weights renormalized; they stay nodata in the output.
pub fn gaussian_blur(grid: &FloatGrid, sigma: f64) -> Result<FloatGrid> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(GridError::BadSigma(sigma));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (grid.width(), grid.height());
    let valid: Vec<bool> = grid.samples.iter().map(|v| !grid.is_nodata(*v)).collect();
    let has_nodata = valid.iter().any(|v| !v);

    // horizontal pass: (weighted sum, weight) per pixel
    let mut tmp = vec![0f64; w * h];
    let mut tmp_w = vec![0f64; if has_nodata { w * h } else { 0 }];
    tmp.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        for (c, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, kw) in kernel.iter().enumerate() {
                let cc = reflect_index(c as isize + k as isize - radius, w);
                let i = r * w + cc;
                if valid[i] {
                    acc += kw * grid.samples[i] as f64;
                }
            }
            *out = acc;
        }
    });
    if has_nodata {
        tmp_w.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
            for (c, out) in row.iter_mut().enumerate() {
                *out = kernel
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| valid[r * w + reflect_index(c as isize + *k as isize - radius, w)])
                    .map(|(_, kw)| kw)
                    .sum();
            }
        });
    }

    let mut samples = vec![0f32; w * h];
    samples.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        for (c, out) in row.iter_mut().enumerate() {
            let i = r * w + c;
            if !valid[i] {
                *out = grid.samples[i];
                continue;
            }
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (k, kw) in kernel.iter().enumerate() {
                let rr = reflect_index(r as isize + k as isize - radius, h);
                acc += kw * tmp[rr * w + c];
                if has_nodata {
                    wsum += kw * tmp_w[rr * w + c];
                }
            }
            *out = if has_nodata { (acc / wsum) as f32 } else { acc as f32 };
        }
    });
    Ok(FloatGrid { georef: grid.georef, samples, nodata: grid.nodata })
}

/// Exact windowed median (element `n/2` of the sorted window) with reflected
/// borders. Nodata samples are excluded from the window.
pub fn median_filter(grid: &FloatGrid, window: usize) -> Result<FloatGrid> {
    if window == 0 || window % 2 == 0 {
        return Err(GridError::EvenWindow(window));
    }
    if window == 1 {
        return Ok(grid.clone());
    }
    let half = (window / 2) as isize;
    let (w, h) = (grid.width(), grid.height());
    let col_idx: Vec<Vec<usize>> =
        (0..w).map(|c| (-half..=half).map(|d| reflect_index(c as isize + d, w)).collect()).collect();
    let mut samples = vec![0f32; w * h];
    samples.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let rows: Vec<usize> = (-half..=half).map(|d| reflect_index(r as isize + d, h)).collect();
        let mut buf = Vec::with_capacity(window * window);
        for (c, out) in row.iter_mut().enumerate() {
            if grid.is_nodata(grid.samples[r * w + c]) {
                *out = grid.samples[r * w + c];
                continue;
            }
            buf.clear();
            for &rr in &rows {
                let base = rr * w;
                for &cc in &col_idx[c] {
                    let v = grid.samples[base + cc];
                    if !grid.is_nodata(v) {
                        buf.push(v);
                    }
                }
            }
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            *out = *m;
        }
    });
    Ok(FloatGrid { georef: grid.georef, samples, nodata: grid.nodata })
}
