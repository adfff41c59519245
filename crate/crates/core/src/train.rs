//! Focal loss with a probability cutoff, inverse-frequency class weights,
//! dihedral and CowBatchMix augmentation, and the region-split training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::grid::{gaussian_blur, FloatGrid, GeoRef, LabelGrid, NUM_CLASSES, UNLABELED};
use crate::net::{self, backward, forward, init_model, opt_step, AdamHyper, AdamState, NetConfig, NetError, NetParams, Real, Tensor4};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {0} has no labeled pixels; merge data or set class weights explicitly")]
    EmptyClass(usize),
    #[error("no labeled pixels in the training regions")]
    NoLabels,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tile is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tile of {tile} px does not fit the {what}")]
    TileTooLarge { tile: usize, what: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    pub cutoff_p: f64,
    /// `None` derives inverse-frequency weights from the training labels.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 3.0, cutoff_p: 0.1, class_weights: None }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(TrainError::Config(format!("gamma {} < 0", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.cutoff_p) {
            return Err(TrainError::Config(format!("cutoff_p {} outside [0, 1)", self.cutoff_p)));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v >= 0.0)) || !w.iter().any(|v| *v > 0.0) {
                return Err(TrainError::Config(format!("class weights {w:?}")));
            }
        }
        Ok(())
    }
}

/// Inverse-frequency weights `N / (4 * N_c)` over labeled pixels.
pub fn class_weights_from_counts(counts: &[u64; NUM_CLASSES]) -> Result<[f64; NUM_CLASSES]> {
    let total: u64 = counts.iter().sum();
    let mut w = [0.0; NUM_CLASSES];
    for (c, n) in counts.iter().enumerate() {
        if *n == 0 {
            return Err(TrainError::EmptyClass(c));
        }
        w[c] = total as f64 / (NUM_CLASSES as f64 * *n as f64);
    }
    Ok(w)
}

pub fn class_weights(labels: &LabelGrid) -> Result<[f64; NUM_CLASSES]> {
    class_weights_from_counts(&labels.class_counts())
}

/// Mean focal loss over labeled pixels and its gradient with respect to the
/// logits. Pixels whose true-class probability is at or below the cutoff
/// contribute nothing but stay in the denominator. `labels` holds one code per
/// pixel of the batch in `(b, y, x)` order; 255 is ignored.
pub fn focal_loss<T: Real>(logits: &Tensor4<T>, labels: &[u8], cfg: &FocalConfig, weights: &[f64; NUM_CLASSES]) -> Result<(f64, Tensor4<T>)> {
    let [n, c, h, w] = logits.dims;
    if c != NUM_CLASSES {
        return Err(TrainError::Dimension(format!("{c} logit channels, expected {NUM_CLASSES}")));
    }
    if labels.len() != n * h * w {
        return Err(TrainError::Dimension(format!("{} labels for {}x{}x{} logits", labels.len(), n, h, w)));
    }
    let hw = h * w;
    let labeled = labels.iter().filter(|l| **l != UNLABELED).count();
    let mut grad = Tensor4::zeros(logits.dims);
    if labeled == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = T::from_f64(1.0 / labeled as f64);
    let gamma = T::from_f64(cfg.gamma);
    let cutoff = T::from_f64(cfg.cutoff_p);
    let mut total = T::zero();
    for b in 0..n {
        let z = logits.item(b);
        let g = grad.item_mut(b);
        for i in 0..hw {
            let t = labels[b * hw + i];
            if t == UNLABELED {
                continue;
            }
            if t as usize >= NUM_CLASSES {
                return Err(TrainError::Dimension(format!("label code {t}")));
            }
            let mut zmax = z[i];
            for k in 1..c {
                zmax = zmax.max(z[k * hw + i]);
            }
            let mut e = [T::zero(); NUM_CLASSES];
            let mut s = T::zero();
            for k in 0..c {
                e[k] = (z[k * hw + i] - zmax).exp();
                s = s + e[k];
            }
            let p: Vec<T> = e.iter().map(|v| *v / s).collect();
            let pt = p[t as usize];
            if pt <= cutoff {
                continue;
            }
            let wt = T::from_f64(weights[t as usize]);
            let one = T::one();
            let q = one - pt;
            let nll = -pt.ln();
            total = total + wt * q.powf(gamma) * nll;
            // p * d/dp of w (1-p)^g (-ln p) = w (g (1-p)^(g-1) p ln p - (1-p)^g)
            let focal_term = if cfg.gamma > 0.0 && q > T::zero() { gamma * q.powf(gamma - one) * pt * nll } else { T::zero() };
            let df_dp_times_p = -wt * (focal_term + q.powf(gamma));
            for k in 0..c {
                let delta = if k == t as usize { one } else { T::zero() };
                g[k * hw + i] = inv_n * df_dp_times_p * (delta - p[k]);
            }
        }
    }
    Ok(((total * inv_n).as_f64(), grad))
}

/// A square training tile: `channels` feature planes and one label plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Sample {
    fn check(&self) -> Result<()> {
        let hw = self.height * self.width;
        if self.features.len() != self.channels * hw || self.labels.len() != hw {
            return Err(TrainError::Dimension("sample payload does not match its dims".into()));
        }
        Ok(())
    }
}

/// Group inverse of dihedral element `k`: reflections are involutions,
/// rotations invert to `4 - r`.
pub fn dihedral_inverse(k: u8) -> u8 {
    if k >= 4 {
        k
    } else {
        (4 - k) % 4
    }
}

/// Destination of source pixel `(row, col)` under element `k` of an `n x n`
/// tile: mirror columns when `k >= 4`, then rotate clockwise `k % 4` times.
pub fn dihedral_map(k: u8, n: usize, row: usize, col: usize) -> (usize, usize) {
    let (mut r, mut c) = (row, col);
    if k >= 4 {
        c = n - 1 - c;
    }
    for _ in 0..k % 4 {
        (r, c) = (c, n - 1 - r);
    }
    (r, c)
}

/// Applies dihedral element `k` (0..8) to features and labels alike.
pub fn dihedral_augment(sample: &Sample, k: u8) -> Result<Sample> {
    sample.check()?;
    if sample.height != sample.width {
        return Err(TrainError::NotSquare(sample.height, sample.width));
    }
    if k >= 8 {
        return Err(TrainError::Config(format!("dihedral index {k} outside 0..8")));
    }
    let n = sample.width;
    let hw = n * n;
    let mut out = sample.clone();
    for r in 0..n {
        for c in 0..n {
            let (dr, dc) = dihedral_map(k, n, r, c);
            let (s, d) = (r * n + c, dr * n + dc);
            out.labels[d] = sample.labels[s];
            for ch in 0..sample.channels {
                out.features[ch * hw + d] = sample.features[ch * hw + s];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CowMixConfig {
    pub sigma_range_px: (f64, f64),
    pub keep_fraction_range: (f64, f64),
    pub apply_probability: f64,
}

impl Default for CowMixConfig {
    fn default() -> Self {
        CowMixConfig { sigma_range_px: (8.0, 32.0), keep_fraction_range: (0.3, 0.7), apply_probability: 0.5 }
    }
}

impl CowMixConfig {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.sigma_range_px;
        let (f0, f1) = self.keep_fraction_range;
        if !(s0 > 0.0 && s1 >= s0) || !(0.0..=1.0).contains(&f0) || !(f0..=1.0).contains(&f1) {
            return Err(TrainError::Config(format!("cowmix ranges sigma {:?} fraction {:?}", self.sigma_range_px, self.keep_fraction_range)));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(TrainError::Config(format!("cowmix probability {}", self.apply_probability)));
        }
        Ok(())
    }
}

/// Binary mixing mask; 1 selects the first sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CowMask {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub fraction: f64,
    pub data: Vec<u8>,
}

impl CowMask {
    pub fn ones_fraction(&self) -> f64 {
        self.data.iter().filter(|v| **v == 1).count() as f64 / self.data.len() as f64
    }

    /// Count of 4-neighbor transitions, a proxy for boundary length.
    pub fn boundary_count(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut n = 0;
        for r in 0..h {
            for c in 0..w {
                let v = self.data[r * w + c];
                if c + 1 < w && self.data[r * w + c + 1] != v {
                    n += 1;
                }
                if r + 1 < h && self.data[(r + 1) * w + c] != v {
                    n += 1;
                }
            }
        }
        n
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Smoothed white noise thresholded at the quantile that keeps a fraction
/// `f` of ones; `sigma` and `f` are drawn from the configured ranges.
pub fn cow_mask(h: usize, w: usize, cfg: &CowMixConfig, seed: u64) -> Result<CowMask> {
    cfg.validate()?;
    if h < 8 || w < 8 {
        return Err(TrainError::Dimension(format!("cow mask {h}x{w} smaller than 8x8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = sample_range(&mut rng, cfg.sigma_range_px);
    let fraction = sample_range(&mut rng, cfg.keep_fraction_range);
    Ok(cow_mask_with(h, w, sigma, fraction, &mut rng))
}

/// Mask with explicit smoothing scale and ones fraction.
pub fn cow_mask_with(h: usize, w: usize, sigma: f64, fraction: f64, rng: &mut ChaCha8Rng) -> CowMask {
    let noise: Vec<f32> = (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let grid = FloatGrid { georef: GeoRef { origin_x: 0.0, origin_y: 0.0, pixel_size: 1.0, width: w, height: h }, samples: noise, nodata: None };
    let smooth = gaussian_blur(&grid, sigma).expect("sigma validated");
    let ones = (fraction * (h * w) as f64).round() as usize;
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|a, b| smooth.samples[*b].total_cmp(&smooth.samples[*a]).then(a.cmp(b)));
    let mut data = vec![0u8; h * w];
    for &i in &order[..ones] {
        data[i] = 1;
    }
    CowMask { height: h, width: w, sigma, fraction, data }
}

/// Pixelwise selection: `a` where the mask is 1, `b` elsewhere, for features
/// and labels alike.
pub fn cow_batch_mix(a: &Sample, b: &Sample, mask: &CowMask) -> Result<Sample> {
    a.check()?;
    b.check()?;
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) || (mask.height, mask.width) != (a.height, a.width) {
        return Err(TrainError::Dimension("cow mix inputs differ in size".into()));
    }
    let hw = a.height * a.width;
    let mut out = b.clone();
    for i in 0..hw {
        if mask.data[i] == 1 {
            out.labels[i] = a.labels[i];
            for ch in 0..a.channels {
                out.features[ch * hw + i] = a.features[ch * hw + i];
            }
        }
    }
    Ok(out)
}

/// Pixel rectangle within a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub col0: usize,
    pub row0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn intersects(&self, o: &Region) -> bool {
        self.col0 < o.col0 + o.width && o.col0 < self.col0 + self.width && self.row0 < o.row0 + o.height && o.row0 < self.row0 + self.height
    }

    pub fn contains(&self, o: &Region) -> bool {
        o.col0 >= self.col0 && o.row0 >= self.row0 && o.col0 + o.width <= self.col0 + self.width && o.row0 + o.height <= self.row0 + self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tile_px: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub tiles_per_epoch: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub validation_regions: Vec<Region>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { tile_px: 128, batch_size: 4, epochs: 10, tiles_per_epoch: 64, seed: 1, learning_rate: 1e-3, validation_regions: Vec::new() }
    }
}

/// Co-registered inputs and labels for training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub dtm: FloatGrid,
    pub chm: FloatGrid,
    pub labels: LabelGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub class_weights: [f64; NUM_CLASSES],
}

/// Typical maximum canopy height used to scale the CHM channel.
pub const CHM_SCALE_M: f32 = 30.0;

/// Network input planes: standardized DTM and scaled CHM.
pub fn normalize_features(dtm: &[f32], chm: &[f32]) -> Vec<f32> {
    let n = dtm.len() as f64;
    let mean = dtm.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = dtm.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-3);
    let mut out = Vec::with_capacity(2 * dtm.len());
    out.extend(dtm.iter().map(|v| ((*v as f64 - mean) / std) as f32));
    out.extend(chm.iter().map(|v| v / CHM_SCALE_M));
    out
}

fn window<T: Copy>(src: &[T], src_w: usize, col0: usize, row0: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for r in row0..row0 + size {
        out.extend_from_slice(&src[r * src_w + col0..r * src_w + col0 + size]);
    }
    out
}

pub fn extract_sample(data: &TrainData, col0: usize, row0: usize, tile: usize) -> Sample {
    let w = data.dtm.width();
    let dtm = window(&data.dtm.samples, w, col0, row0, tile);
    let chm = window(&data.chm.samples, w, col0, row0, tile);
    Sample { channels: 2, height: tile, width: tile, features: normalize_features(&dtm, &chm), labels: window(&data.labels.samples, w, col0, row0, tile) }
}

fn to_batch(samples: &[Sample]) -> (Tensor4<f32>, Vec<u8>) {
    let s = &samples[0];
    let mut x = Vec::with_capacity(samples.len() * s.features.len());
    let mut y = Vec::with_capacity(samples.len() * s.labels.len());
    for smp in samples {
        x.extend_from_slice(&smp.features);
        y.extend_from_slice(&smp.labels);
    }
    (Tensor4::from_vec([samples.len(), s.channels, s.height, s.width], x), y)
}

/// Grid-aligned tiles lying fully inside the validation regions.
pub fn validation_tiles(regions: &[Region], tile: usize) -> Vec<Region> {
    let mut out = Vec::new();
    for reg in regions {
        let mut r = reg.row0;
        while r + tile <= reg.row0 + reg.height {
            let mut c = reg.col0;
            while c + tile <= reg.col0 + reg.width {
                out.push(Region { col0: c, row0: r, width: tile, height: tile });
                c += tile;
            }
            r += tile;
        }
    }
    out
}

/// Labels with validation regions blanked out.
pub fn training_labels(labels: &LabelGrid, regions: &[Region]) -> LabelGrid {
    let mut out = labels.clone();
    let w = labels.width();
    for reg in regions {
        for r in reg.row0..(reg.row0 + reg.height).min(labels.height()) {
            for c in reg.col0..(reg.col0 + reg.width).min(w) {
                out.samples[r * w + c] = UNLABELED;
            }
        }
    }
    out
}

/// Draws a tile outside every validation region that holds at least one label.
pub fn sample_train_tile(rng: &mut ChaCha8Rng, data: &TrainData, cfg: &TrainConfig) -> Result<Region> {
    let (w, h) = (data.dtm.width(), data.dtm.height());
    for _ in 0..10_000 {
        let t = Region { col0: rng.gen_range(0..=w - cfg.tile_px), row0: rng.gen_range(0..=h - cfg.tile_px), width: cfg.tile_px, height: cfg.tile_px };
        if cfg.validation_regions.iter().any(|v| v.intersects(&t)) {
            continue;
        }
        let lw = data.labels.width();
        let has_label = (t.row0..t.row0 + t.height).any(|r| data.labels.samples[r * lw + t.col0..r * lw + t.col0 + t.width].iter().any(|c| *c != UNLABELED));
        if has_label {
            return Ok(t);
        }
    }
    Err(TrainError::TileTooLarge { tile: cfg.tile_px, what: "labeled training area".into() })
}

/// Trains from `init` (or a fresh seeded model) and reports per-epoch losses.
/// Everything runs in a single fixed sequence, so a fixed seed reproduces the
/// same parameters bit for bit.
pub fn train_epochs(
    data: &TrainData,
    tcfg: &TrainConfig,
    ncfg: &NetConfig,
    fcfg: &FocalConfig,
    cow: &CowMixConfig,
    init: Option<NetParams<f32>>,
) -> Result<TrainOutcome> {
    fcfg.validate()?;
    cow.validate()?;
    ncfg.validate()?;
    if data.dtm.georef != data.chm.georef || data.dtm.georef != data.labels.georef {
        return Err(TrainError::Dimension("dtm, chm and labels must share a georeference".into()));
    }
    if tcfg.tile_px == 0 || tcfg.tile_px % ncfg.size_divisor() != 0 {
        return Err(TrainError::Config(format!("tile {} not divisible by {}", tcfg.tile_px, ncfg.size_divisor())));
    }
    if tcfg.batch_size == 0 {
        return Err(TrainError::Config("batch size must be >= 1".into()));
    }
    let (w, h) = (data.dtm.width(), data.dtm.height());
    if tcfg.tile_px > w || tcfg.tile_px > h {
        return Err(TrainError::TileTooLarge { tile: tcfg.tile_px, what: format!("{w}x{h} scene") });
    }
    let scene = Region { col0: 0, row0: 0, width: w, height: h };
    for (i, v) in tcfg.validation_regions.iter().enumerate() {
        if !scene.contains(v) {
            return Err(TrainError::Config(format!("validation region {i} outside the scene")));
        }
    }
    let val_tiles = validation_tiles(&tcfg.validation_regions, tcfg.tile_px);
    if !tcfg.validation_regions.is_empty() && val_tiles.is_empty() {
        return Err(TrainError::TileTooLarge { tile: tcfg.tile_px, what: "validation regions".into() });
    }
    let train_labels = training_labels(&data.labels, &tcfg.validation_regions);
    if train_labels.class_counts().iter().sum::<u64>() == 0 {
        return Err(TrainError::NoLabels);
    }
    let weights = match fcfg.class_weights {
        Some(w) => w,
        None => class_weights(&train_labels)?,
    };

    let mut params = match init {
        Some(p) => p,
        None => init_model(ncfg, tcfg.seed)?,
    };
    let mut adam = AdamState::new(&params);
    let hyper = AdamHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0xA076_1D64_78BD_642F);
    let mut metrics = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let mut tiles = Vec::with_capacity(tcfg.tiles_per_epoch);
        for _ in 0..tcfg.tiles_per_epoch {
            tiles.push(sample_train_tile(&mut rng, data, tcfg)?);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in tiles.chunks(tcfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for t in chunk {
                let s = extract_sample(data, t.col0, t.row0, t.width);
                samples.push(dihedral_augment(&s, rng.gen_range(0..8))?);
            }
            if samples.len() >= 2 {
                let originals = samples.clone();
                for i in 0..samples.len() {
                    if rng.gen_bool(cow.apply_probability) {
                        let partners: Vec<usize> = (0..originals.len()).filter(|j| *j != i).collect();
                        let j = *partners.choose(&mut rng).unwrap();
                        let mask = cow_mask(tcfg.tile_px, tcfg.tile_px, cow, rng.gen())?;
                        samples[i] = cow_batch_mix(&originals[i], &originals[j], &mask)?;
                    }
                }
            }
            let (x, y) = to_batch(&samples);
            let (logits, tape) = forward(&params, ncfg, &x)?;
            let (loss, dlogits) = focal_loss(&logits, &y, fcfg, &weights)?;
            let grads = backward(&params, ncfg, &tape, &dlogits)?;
            opt_step(&mut params, &grads, &mut adam, tcfg.learning_rate, &hyper)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_loss = if val_tiles.is_empty() { None } else { Some(evaluate_loss(data, &val_tiles, &params, ncfg, fcfg, &weights)?) };
        let m = EpochMetrics { epoch, train_loss: loss_sum / batches.max(1) as f64, val_loss };
        log::info!("epoch {epoch}: train {:.5} val {:?}", m.train_loss, m.val_loss);
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics, class_weights: weights })
}

/// Mean focal loss over fixed tiles without augmentation.
pub fn evaluate_loss(data: &TrainData, tiles: &[Region], params: &NetParams<f32>, ncfg: &NetConfig, fcfg: &FocalConfig, weights: &[f64; NUM_CLASSES]) -> Result<f64> {
    let mut sum = 0.0;
    for t in tiles {
        let s = extract_sample(data, t.col0, t.row0, t.width);
        let (x, y) = to_batch(std::slice::from_ref(&s));
        let logits = net::predict(params, ncfg, &x)?;
        sum += focal_loss(&logits, &y, fcfg, weights)?.0;
    }
    Ok(sum / tiles.len().max(1) as f64)
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for m in metrics {
        let val = m.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
        s.push_str(&format!("{},{:?},{}\n", m.epoch, m.train_loss, val));
    }
    s
}
