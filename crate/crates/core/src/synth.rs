//! Procedural forest scenes: value-noise terrain, Voronoi stands, species
//! crowns rendered onto a surface model, coarse 16 m weak labels with
//! injected temporal-mismatch errors, and circular reference plots.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::{dominant_from_counts, plot_class_counts, plot_radius, PlotRecord};
use crate::grid::{
    is_forest, FloatGrid, GeoRef, LabelGrid, BACKGROUND, NORWAY_SPRUCE, NUM_CLASSES, SCOTS_PINE, UNLABELED,
};

/// Side of a weak-label cell in meters (and in 1 m pixels).
pub const WEAK_CELL: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {requested} disjoint plots (placed {placed})")]
    PlotPlacement { requested: usize, placed: usize },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub extent_m: usize,
    pub stand_scale_m: f64,
    pub density_per_ha: f64,
    /// Stand-type probabilities in class order: open land, birch, pine, spruce.
    pub species_mix: [f64; NUM_CLASSES],
    pub clearcut_fraction: f64,
    /// Side length of a label-mismatch patch, in 16 m cells.
    pub clearcut_patch_cells: usize,
    /// Tree-height interval per species (birch, pine, spruce), meters.
    pub height_ranges: [(f64, f64); 3],
    pub terrain_amplitude_m: f64,
    pub plot_count: usize,
    pub plot_area_m2: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 1,
            extent_m: 512,
            stand_scale_m: 120.0,
            density_per_ha: 450.0,
            species_mix: [0.25; 4],
            clearcut_fraction: 0.0,
            clearcut_patch_cells: 16,
            height_ranges: [(8.0, 20.0), (10.0, 24.0), (10.0, 26.0)],
            terrain_amplitude_m: 35.0,
            plot_count: 50,
            plot_area_m2: 250.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.extent_m < WEAK_CELL || self.extent_m % WEAK_CELL != 0 {
            return bad(format!("extent_m {} must be a positive multiple of {WEAK_CELL}", self.extent_m));
        }
        if self.species_mix.iter().any(|p| *p < 0.0) || (self.species_mix.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("species_mix {:?} must be nonnegative and sum to 1", self.species_mix));
        }
        if !(0.0..0.5).contains(&self.clearcut_fraction) {
            return bad(format!("clearcut_fraction {} outside [0, 0.5)", self.clearcut_fraction));
        }
        if self.clearcut_patch_cells == 0 {
            return bad("clearcut_patch_cells must be >= 1".into());
        }
        if !(self.stand_scale_m > 0.0) || !(self.density_per_ha >= 0.0) {
            return bad("stand_scale_m must be > 0 and density_per_ha >= 0".into());
        }
        if self.height_ranges.iter().any(|(lo, hi)| !(*lo > 0.0 && hi >= lo)) {
            return bad(format!("height_ranges {:?}", self.height_ranges));
        }
        if !(0.0..=40.0).contains(&self.terrain_amplitude_m) {
            return bad(format!("terrain_amplitude_m {} outside [0, 40]", self.terrain_amplitude_m));
        }
        if !(self.plot_area_m2 > 0.0) {
            return bad(format!("plot_area_m2 {}", self.plot_area_m2));
        }
        Ok(())
    }

    pub fn max_tree_height(&self) -> f64 {
        self.height_ranges.iter().map(|r| r.1).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub dtm: FloatGrid,
    pub dsm: FloatGrid,
    pub truth: LabelGrid,
    pub weak16: LabelGrid,
    pub plots: Vec<PlotRecord>,
    /// Stand index per 1 m pixel.
    pub stand_of: Vec<u32>,
    /// Stand class (0 = open land).
    pub stand_class: Vec<u8>,
    /// Label-mismatch patches injected by `degrade_labels`.
    pub patches: Vec<MismatchPatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchKind {
    /// Canopy removed in the surface model while the coarse label keeps its species.
    StaleLabel,
    /// Canopy present while the coarse label claims background.
    MissingForest,
}

/// A square run of 16 m cells, `(cell_col, cell_row, side)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MismatchPatch {
    pub cell_col: usize,
    pub cell_row: usize,
    pub side: usize,
    pub kind: MismatchKind,
}

#[derive(Debug, Clone, Copy)]
struct Tree {
    x: f64,
    y: f64,
    height: f64,
    radius: f64,
    species: u8,
}

/// Crown surface height above ground at normalized distance `d` in [0, 1).
fn crown_profile(species: u8, height: f64, d: f64) -> f64 {
    match species {
        // narrow cone
        NORWAY_SPRUCE => height * (1.0 - 0.75 * d),
        // wide, flat-topped paraboloid
        SCOTS_PINE => height * (1.0 - 0.3 * d * d),
        // rounded dome
        _ => height - 0.45 * height * (1.0 - (1.0 - d * d).sqrt()),
    }
}

fn crown_radius(species: u8, height: f64) -> f64 {
    match species {
        NORWAY_SPRUCE => 0.16 * height + 0.6,
        SCOTS_PINE => 0.26 * height + 0.8,
        _ => 0.22 * height + 0.8,
    }
}

/// Seeded lattice value noise with smoothstep interpolation, in [0, 1).
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 2;
        ValueNoise { cells, lattice: (0..n * n).map(|_| rng.gen::<f64>()).collect() }
    }

    /// `u`, `v` in [0, 1].
    fn sample(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 2;
        let (fx, fy) = (u * self.cells as f64, v * self.cells as f64);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(tx), s(ty));
        let at = |x: usize, y: usize| self.lattice[y * n + x];
        let top = at(ix, iy) * (1.0 - sx) + at(ix + 1, iy) * sx;
        let bottom = at(ix, iy + 1) * (1.0 - sx) + at(ix + 1, iy + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }
}

fn scene_georef(spec: &SceneSpec) -> GeoRef {
    GeoRef::new(500_000.0, 6_600_000.0 + spec.extent_m as f64, 1.0, spec.extent_m, spec.extent_m).unwrap()
}

fn sample_class(rng: &mut ChaCha8Rng, probs: &[f64; NUM_CLASSES]) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u8;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u8
}

/// Generates terrain, stands and trees, then degrades the coarse labels and
/// samples plots. Deterministic in `spec.seed`.
pub fn gen_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let (mut scene, _) = render_scene(spec);
    scene.weak16 = degrade_labels(&mut scene, spec);
    scene.plots = sample_plots(&scene, spec.plot_count, spec.plot_area_m2, spec.seed ^ 0x9E37_79B9_7F4A_7C15)?;
    Ok(scene)
}

fn render_scene(spec: &SceneSpec) -> (SynthScene, Vec<Tree>) {
    let n = spec.extent_m;
    let georef = scene_georef(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Terrain: three octaves of value noise, scaled to the amplitude.
    let octaves = [(3usize, 0.57), (7, 0.29), (17, 0.14)];
    let noises: Vec<ValueNoise> = octaves.iter().map(|(c, _)| ValueNoise::new(&mut rng, *c)).collect();
    let mut dtm = vec![0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let (u, v) = ((c as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64);
            let h: f64 = noises.iter().zip(&octaves).map(|(nz, (_, a))| a * nz.sample(u, v)).sum();
            dtm[r * n + c] = (150.0 + spec.terrain_amplitude_m * h) as f32;
        }
    }

    // Stands: jittered-grid centers, nearest center with a noise-warped metric.
    let per_side = ((n as f64 / spec.stand_scale_m).round() as usize).max(1);
    let cell = n as f64 / per_side as f64;
    let mut centers = Vec::with_capacity(per_side * per_side);
    for j in 0..per_side {
        for i in 0..per_side {
            centers.push(((i as f64 + rng.gen_range(0.15..0.85)) * cell, (j as f64 + rng.gen_range(0.15..0.85)) * cell));
        }
    }
    let stand_class: Vec<u8> = centers.iter().map(|_| sample_class(&mut rng, &spec.species_mix)).collect();
    let warp_x = ValueNoise::new(&mut rng, (per_side * 2).max(2));
    let warp_y = ValueNoise::new(&mut rng, (per_side * 2).max(2));
    let warp_amp = 0.3 * cell;
    let mut stand_of = vec![0u32; n * n];
    for r in 0..n {
        let (cy_cell, v) = ((r as f64 / cell) as isize, (r as f64 + 0.5) / n as f64);
        for c in 0..n {
            let u = (c as f64 + 0.5) / n as f64;
            let x = c as f64 + 0.5 + warp_amp * (warp_x.sample(u, v) - 0.5) * 2.0;
            let y = r as f64 + 0.5 + warp_amp * (warp_y.sample(u, v) - 0.5) * 2.0;
            let cx_cell = (c as f64 / cell) as isize;
            let mut best = (f64::INFINITY, 0usize);
            for dj in -2..=2 {
                for di in -2..=2 {
                    let (i, j) = (cx_cell + di, cy_cell + dj);
                    if i < 0 || j < 0 || i >= per_side as isize || j >= per_side as isize {
                        continue;
                    }
                    let k = j as usize * per_side + i as usize;
                    let d = (centers[k].0 - x).powi(2) + (centers[k].1 - y).powi(2);
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            stand_of[r * n + c] = best.1 as u32;
        }
    }

    // Trees: uniform rejection sampling inside each forest stand.
    let mut stand_pixels: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (i, s) in stand_of.iter().enumerate() {
        stand_pixels[*s as usize].push(i);
    }
    let mut trees = Vec::new();
    for (k, pixels) in stand_pixels.iter().enumerate() {
        let species = stand_class[k];
        if species == BACKGROUND || pixels.is_empty() {
            continue;
        }
        let count = (spec.density_per_ha * pixels.len() as f64 / 10_000.0).round() as usize;
        let (lo, hi) = spec.height_ranges[species as usize - 1];
        for _ in 0..count {
            let p = pixels[rng.gen_range(0..pixels.len())];
            let x = (p % n) as f64 + rng.gen::<f64>();
            let y = (p / n) as f64 + rng.gen::<f64>();
            let height = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            trees.push(Tree { x, y, height, radius: crown_radius(species, height), species });
        }
    }

    // Crowns: per-pixel max of crown surfaces; truth follows the visible crown.
    let mut canopy = vec![0f64; n * n];
    let mut truth = vec![BACKGROUND; n * n];
    for t in &trees {
        let c0 = (t.x - t.radius).floor().max(0.0) as usize;
        let c1 = ((t.x + t.radius).ceil() as usize).min(n - 1);
        let r0 = (t.y - t.radius).floor().max(0.0) as usize;
        let r1 = ((t.y + t.radius).ceil() as usize).min(n - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d = ((c as f64 + 0.5 - t.x).powi(2) + (r as f64 + 0.5 - t.y).powi(2)).sqrt() / t.radius;
                if d >= 1.0 {
                    continue;
                }
                let z = crown_profile(t.species, t.height, d);
                let i = r * n + c;
                if z > canopy[i] {
                    canopy[i] = z;
                    truth[i] = t.species;
                }
            }
        }
    }
    let dsm: Vec<f32> = dtm.iter().zip(&canopy).map(|(g, h)| (*g as f64 + h) as f32).collect();
    // Guard against rounding: the surface never dips below the ground.
    let dsm = dsm.iter().zip(&dtm).map(|(s, g)| s.max(*g)).collect();

    let weak_geo = georef.with_pixel_size(WEAK_CELL as f64);
    let scene = SynthScene {
        dtm: FloatGrid::new(georef, dtm, None).unwrap(),
        dsm: FloatGrid::new(georef, dsm, None).unwrap(),
        truth: LabelGrid::new(georef, truth).unwrap(),
        weak16: LabelGrid::filled(weak_geo, UNLABELED),
        plots: Vec::new(),
        stand_of,
        stand_class,
        patches: Vec::new(),
    };
    (scene, trees)
}

/// Per-cell class counts of a 1 m label grid aggregated to 16 m cells.
pub fn cell_counts(truth: &LabelGrid) -> Vec<[u32; NUM_CLASSES]> {
    let (w, h) = (truth.width() / WEAK_CELL, truth.height() / WEAK_CELL);
    let mut counts = vec![[0u32; NUM_CLASSES]; w * h];
    for r in 0..h * WEAK_CELL {
        for c in 0..w * WEAK_CELL {
            let code = truth.get(c, r);
            if (code as usize) < NUM_CLASSES {
                counts[(r / WEAK_CELL) * w + c / WEAK_CELL][code as usize] += 1;
            }
        }
    }
    counts
}

/// Most frequent class, ties to the lowest code.
pub fn majority(counts: &[u32; NUM_CLASSES]) -> u8 {
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    best as u8
}

/// Builds the 16 m weak label from the 1 m truth and injects mismatch
/// patches. Stale-label patches flatten the surface model (and the truth) in
/// place; missing-forest patches overwrite the coarse label with background.
pub fn degrade_labels(scene: &mut SynthScene, spec: &SceneSpec) -> LabelGrid {
    let n = scene.truth.width();
    let cells = n / WEAK_CELL;
    let counts = cell_counts(&scene.truth);
    let mut weak: Vec<u8> = counts.iter().map(majority).collect();

    // Coarse maps only cover forest: treeless cells of open-land stands carry no label.
    for (k, cnt) in counts.iter().enumerate() {
        let forest: u32 = cnt[1..].iter().sum();
        let (cc, cr) = (k % cells, k / cells);
        let center = (cr * WEAK_CELL + WEAK_CELL / 2) * n + cc * WEAK_CELL + WEAK_CELL / 2;
        if forest == 0 && scene.stand_class[scene.stand_of[center] as usize] == BACKGROUND {
            weak[k] = UNLABELED;
        }
    }

    scene.patches.clear();
    if spec.clearcut_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(17));
        let side = spec.clearcut_patch_cells.min(cells);
        let forest_cells = weak.iter().filter(|c| is_forest(**c)).count();
        let target = spec.clearcut_fraction * forest_cells as f64;
        let mut taken = vec![false; cells * cells];
        let mut corrupted = 0usize;
        let mut origins: Vec<(usize, usize)> =
            (0..=cells - side).flat_map(|r| (0..=cells - side).map(move |c| (c, r))).collect();
        origins.shuffle(&mut rng);
        for (cc, cr) in origins {
            if corrupted as f64 >= target {
                break;
            }
            let block: Vec<usize> =
                (cr..cr + side).flat_map(|r| (cc..cc + side).map(move |c| r * cells + c)).collect();
            // one-cell moat keeps patches apart
            let moat_free = (cr.saturating_sub(1)..(cr + side + 1).min(cells))
                .all(|r| (cc.saturating_sub(1)..(cc + side + 1).min(cells)).all(|c| !taken[r * cells + c]));
            let forest_in = block.iter().filter(|k| is_forest(weak[**k])).count();
            if !moat_free || forest_in * 4 < block.len() * 3 {
                continue;
            }
            let kind = if rng.gen_bool(0.5) { MismatchKind::StaleLabel } else { MismatchKind::MissingForest };
            for &k in &block {
                taken[k] = true;
            }
            match kind {
                MismatchKind::StaleLabel => {
                    for r in cr * WEAK_CELL..(cr + side) * WEAK_CELL {
                        for c in cc * WEAK_CELL..(cc + side) * WEAK_CELL {
                            let i = r * n + c;
                            scene.dsm.samples[i] = scene.dtm.samples[i];
                            scene.truth.samples[i] = BACKGROUND;
                        }
                    }
                }
                MismatchKind::MissingForest => {
                    for &k in &block {
                        weak[k] = BACKGROUND;
                    }
                }
            }
            corrupted += forest_in;
            scene.patches.push(MismatchPatch { cell_col: cc, cell_row: cr, side, kind });
        }
    }
    LabelGrid::new(scene.truth.georef.with_pixel_size(WEAK_CELL as f64), weak).unwrap()
}

/// Places `n` disjoint circular plots of `area_m2` and assigns each the
/// dominant truth class.
pub fn sample_plots(scene: &SynthScene, n: usize, area_m2: f64, seed: u64) -> Result<Vec<PlotRecord>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let g = &scene.truth.georef;
    let radius = plot_radius(area_m2);
    let (ew, eh) = g.extent_m();
    if ew <= 2.0 * radius || eh <= 2.0 * radius {
        return Err(SynthError::PlotPlacement { requested: n, placed: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plots: Vec<PlotRecord> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while plots.len() < n {
        attempts += 1;
        if attempts > 200 * n + 1000 {
            return Err(SynthError::PlotPlacement { requested: n, placed: plots.len() });
        }
        let x = g.origin_x + rng.gen_range(radius + 1.0..ew - radius - 1.0);
        let y = g.origin_y - rng.gen_range(radius + 1.0..eh - radius - 1.0);
        if plots.iter().any(|p| (p.center_x - x).powi(2) + (p.center_y - y).powi(2) < (2.0 * radius).powi(2)) {
            continue;
        }
        let mut plot = PlotRecord { id: plots.len() as u32, center_x: x, center_y: y, area_m2, reference_class: 0 };
        let counts = plot_class_counts(&scene.truth, &plot, plots.len()).expect("plot inside extent");
        plot.reference_class = dominant_from_counts(&counts);
        plots.push(plot);
    }
    Ok(plots)
}
