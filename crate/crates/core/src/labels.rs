//! Weak-label refinement: coarse map to 1 m training labels, land masking,
//! and removal of large label/prediction conflicts after a first training.

use thiserror::Error;

use crate::grid::{is_forest, median_filter, FloatGrid, GridError, LabelGrid, BACKGROUND, UNLABELED};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("extent mismatch: {0}")]
    Extent(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("predictions must not contain unlabeled pixels")]
    UnlabeledPrediction,
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, LabelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    Four,
    Eight,
}

impl Neighborhood {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
        match self {
            Neighborhood::Four => &FOUR,
            Neighborhood::Eight => &EIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepConfig {
    pub chm_median_window_px: usize,
    pub chm_background_threshold_m: f32,
    pub border_neighborhood: Neighborhood,
    pub relabel_min_area_m2: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            chm_median_window_px: 11,
            chm_background_threshold_m: 0.3,
            border_neighborhood: Neighborhood::Eight,
            relabel_min_area_m2: 25_600.0,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chm_median_window_px % 2 == 0 {
            return Err(LabelError::Config(format!("median window {} must be odd", self.chm_median_window_px)));
        }
        if !(self.chm_background_threshold_m > 0.0) {
            return Err(LabelError::Config("background threshold must be > 0".into()));
        }
        if !(self.relabel_min_area_m2 > 0.0) {
            return Err(LabelError::Config("relabel minimum area must be > 0".into()));
        }
        Ok(())
    }
}

/// Integer upsampling factor from the coarse to the fine grid.
fn upsample_factor(coarse: &LabelGrid, fine: &FloatGrid) -> Result<usize> {
    let (c, f) = (&coarse.georef, &fine.georef);
    let ratio = c.pixel_size / f.pixel_size;
    let k = ratio.round() as usize;
    if k == 0 || (ratio - k as f64).abs() > 1e-9 {
        return Err(LabelError::Extent(format!("resolution ratio {ratio} is not an integer")));
    }
    if c.width * k != f.width || c.height * k != f.height {
        return Err(LabelError::Extent(format!(
            "{}x{} coarse cells x{k} do not cover {}x{} fine pixels",
            c.width, c.height, f.width, f.height
        )));
    }
    let tol = 1e-6 * f.pixel_size;
    if (c.origin_x - f.origin_x).abs() > tol || (c.origin_y - f.origin_y).abs() > tol {
        return Err(LabelError::Extent("origins differ".into()));
    }
    Ok(k)
}

/// Step 1: unlabeled coarse cells become background.
pub fn unlabeled_to_background(weak: &LabelGrid) -> LabelGrid {
    let samples = weak.samples.iter().map(|c| if *c == UNLABELED { BACKGROUND } else { *c }).collect();
    LabelGrid { georef: weak.georef, samples }
}

/// Step 2: cells whose neighborhood mixes forest and non-forest become unlabeled.
/// Cells that are already unlabeled do not count as either side.
pub fn unlabel_borders(grid: &LabelGrid, nb: Neighborhood) -> LabelGrid {
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    let mut out = grid.clone();
    for r in 0..h {
        for c in 0..w {
            let code = grid.samples[(r * w + c) as usize];
            if code == UNLABELED {
                continue;
            }
            let border = nb.offsets().iter().any(|(dc, dr)| {
                let (cc, rr) = (c + dc, r + dr);
                if cc < 0 || rr < 0 || cc >= w || rr >= h {
                    return false;
                }
                let other = grid.samples[(rr * w + cc) as usize];
                other != UNLABELED && is_forest(other) != is_forest(code)
            });
            if border {
                out.samples[(r * w + c) as usize] = UNLABELED;
            }
        }
    }
    out
}

/// Step 3: nearest-neighbor upsampling, each coarse cell becomes a k x k block.
pub fn upsample_nearest(grid: &LabelGrid, k: usize) -> LabelGrid {
    let (w, h) = (grid.width(), grid.height());
    let mut samples = Vec::with_capacity(w * h * k * k);
    for r in 0..h * k {
        let src = &grid.samples[(r / k) * w..(r / k + 1) * w];
        for c in 0..w * k {
            samples.push(src[c / k]);
        }
    }
    LabelGrid { georef: grid.georef.with_pixel_size(grid.georef.pixel_size / k as f64), samples }
}

/// Step 4: wherever the median-filtered CHM is below the threshold the pixel
/// becomes background, whatever it held before.
pub fn low_canopy_to_background(labels: &LabelGrid, chm: &FloatGrid, cfg: &PrepConfig) -> Result<LabelGrid> {
    let med = median_filter(chm, cfg.chm_median_window_px)?;
    let samples = labels
        .samples
        .iter()
        .zip(&med.samples)
        .map(|(code, m)| if !med.is_nodata(*m) && *m < cfg.chm_background_threshold_m { BACKGROUND } else { *code })
        .collect();
    Ok(LabelGrid { georef: chm.georef, samples })
}

/// Coarse weak label to 1 m training label, in the fixed four-step order.
pub fn prep_labels(weak16: &LabelGrid, chm: &FloatGrid, cfg: &PrepConfig) -> Result<LabelGrid> {
    cfg.validate()?;
    let k = upsample_factor(weak16, chm)?;
    let step1 = unlabeled_to_background(weak16);
    let step2 = unlabel_borders(&step1, cfg.border_neighborhood);
    let step3 = upsample_nearest(&step2, k);
    low_canopy_to_background(&step3, chm, cfg)
}

/// Pixels where the mask is 0 become unlabeled.
pub fn apply_land_mask(labels: &LabelGrid, mask: &LabelGrid) -> Result<LabelGrid> {
    if labels.georef != mask.georef {
        return Err(LabelError::Extent("label and mask georeferences differ".into()));
    }
    let samples = labels.samples.iter().zip(&mask.samples).map(|(c, m)| if *m == 0 { UNLABELED } else { *c }).collect();
    Ok(LabelGrid { georef: labels.georef, samples })
}

/// 8-connected component labeling of a binary map with union-find. Returns
/// per-pixel component ids (`u32::MAX` outside the foreground) and sizes.
pub fn connected_components(fg: &[bool], width: usize, height: usize) -> (Vec<u32>, Vec<usize>) {
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    let mut parent: Vec<u32> = Vec::new();
    let mut provisional = vec![u32::MAX; fg.len()];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !fg[i] {
                continue;
            }
            // already-visited neighbors: W, NW, N, NE
            let mut label = u32::MAX;
            let mut neighbors = [u32::MAX; 4];
            if c > 0 {
                neighbors[0] = provisional[i - 1];
            }
            if r > 0 {
                let up = i - width;
                if c > 0 {
                    neighbors[1] = provisional[up - 1];
                }
                neighbors[2] = provisional[up];
                if c + 1 < width {
                    neighbors[3] = provisional[up + 1];
                }
            }
            for &n in neighbors.iter().filter(|n| **n != u32::MAX) {
                let root = find(&mut parent, n);
                if label == u32::MAX {
                    label = root;
                } else if root != label {
                    let (lo, hi) = (root.min(label), root.max(label));
                    parent[hi as usize] = lo;
                    label = lo;
                }
            }
            if label == u32::MAX {
                label = parent.len() as u32;
                parent.push(label);
            }
            provisional[i] = label;
        }
    }
    let mut dense = vec![u32::MAX; parent.len()];
    let mut sizes = Vec::new();
    let mut ids = vec![u32::MAX; fg.len()];
    for i in 0..fg.len() {
        if provisional[i] == u32::MAX {
            continue;
        }
        let root = find(&mut parent, provisional[i]) as usize;
        if dense[root] == u32::MAX {
            dense[root] = sizes.len() as u32;
            sizes.push(0);
        }
        ids[i] = dense[root];
        sizes[dense[root] as usize] += 1;
    }
    (ids, sizes)
}

/// Background/forest conflict between a label and a prediction. Species
/// disagreements and unlabeled pixels never conflict.
#[inline]
pub fn is_conflict(label: u8, prediction: u8) -> bool {
    (label == BACKGROUND && is_forest(prediction)) || (is_forest(label) && prediction == BACKGROUND)
}

/// Second-round refinement: connected conflict regions of at least
/// `relabel_min_area_m2` become unlabeled.
pub fn relabel_round2(labels: &LabelGrid, predictions: &LabelGrid, cfg: &PrepConfig) -> Result<LabelGrid> {
    cfg.validate()?;
    if labels.georef != predictions.georef {
        return Err(LabelError::Extent("label and prediction georeferences differ".into()));
    }
    if predictions.samples.contains(&UNLABELED) {
        return Err(LabelError::UnlabeledPrediction);
    }
    let conflict: Vec<bool> = labels.samples.iter().zip(&predictions.samples).map(|(l, p)| is_conflict(*l, *p)).collect();
    let (ids, sizes) = connected_components(&conflict, labels.width(), labels.height());
    let px_area = labels.georef.pixel_size * labels.georef.pixel_size;
    let qualifies: Vec<bool> = sizes.iter().map(|n| *n as f64 * px_area >= cfg.relabel_min_area_m2).collect();
    let samples = labels
        .samples
        .iter()
        .zip(&ids)
        .map(|(code, id)| if *id != u32::MAX && qualifies[*id as usize] { UNLABELED } else { *code })
        .collect();
    Ok(LabelGrid { georef: labels.georef, samples })
}
