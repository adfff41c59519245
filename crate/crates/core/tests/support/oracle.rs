//! Independent reference implementations and randomized checks against them.

#![allow(dead_code)]

use std::collections::VecDeque;

use canopyseg::eval::{plot_class_counts, plot_dominant_class, ConfusionMatrix, PlotRecord};
use canopyseg::grid::{FloatGrid, GeoRef, LabelGrid, UNLABELED};
use canopyseg::labels::{low_canopy_to_background, prep_labels, relabel_round2, unlabel_borders, unlabeled_to_background, upsample_nearest, Neighborhood, PrepConfig};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

/// Mirror about the edge samples: -1 -> 1, n -> n - 2.
pub fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn median_oracle(grid: &FloatGrid, window: usize) -> Vec<f32> {
    let (w, h) = (grid.width(), grid.height());
    let r = (window / 2) as i64;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut vals: Vec<f32> = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    vals.push(grid.samples[mirror(y + dy, h) * w + mirror(x + dx, w)]);
                }
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.push(vals[vals.len() / 2]);
        }
    }
    out
}

fn forest(c: u8) -> bool {
    (1..=3).contains(&c)
}

fn random_weak(rng: &mut ChaCha8Rng) -> LabelGrid {
    let (w, h) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let codes = [0u8, 1, 2, 3, UNLABELED];
    // runs of equal codes make interior cells as well as borders
    let mut samples = Vec::with_capacity(w * h);
    let mut cur = codes[rng.gen_range(0..5)];
    for _ in 0..w * h {
        if rng.gen_bool(0.4) {
            cur = codes[rng.gen_range(0..5)];
        }
        samples.push(cur);
    }
    LabelGrid::new(GeoRef::new(1000.0, 5000.0, 16.0, w, h).unwrap(), samples).unwrap()
}

fn random_chm(rng: &mut ChaCha8Rng, weak: &LabelGrid) -> FloatGrid {
    let g = weak.georef.with_pixel_size(1.0);
    let levels = [0.0f32, 0.1, 0.29, 0.3, 0.31, 2.0, 15.0];
    // blocky field so the median lands on both sides of the threshold
    let bs = rng.gen_range(4..20);
    let (bw, bh) = (g.width.div_ceil(bs), g.height.div_ceil(bs));
    let blocks: Vec<f32> = (0..bw * bh).map(|_| levels[rng.gen_range(0..levels.len())]).collect();
    let samples = (0..g.len())
        .map(|i| {
            let (x, y) = (i % g.width, i / g.width);
            if rng.gen_bool(0.1) {
                levels[rng.gen_range(0..levels.len())]
            } else {
                blocks[(y / bs) * bw + x / bs]
            }
        })
        .collect();
    FloatGrid::new(g, samples, None).unwrap()
}

/// One case per seed across the four label-prep steps. Returns the number of
/// pixels examined per step on success.
pub fn check_prep_case(seed: u64) -> Result<[usize; 4], String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weak = random_weak(&mut rng);
    let chm = random_chm(&mut rng, &weak);
    let cfg = PrepConfig::default();
    let (w, h) = (weak.width(), weak.height());

    let s1 = unlabeled_to_background(&weak);
    for (i, (a, b)) in weak.samples.iter().zip(&s1.samples).enumerate() {
        let want = if *a == UNLABELED { 0 } else { *a };
        if *b != want {
            return Err(format!("seed {seed} step 1 cell {i}: {a} -> {b}, want {want}"));
        }
    }

    let s2 = unlabel_borders(&s1, Neighborhood::Eight);
    for y in 0..h {
        for x in 0..w {
            let me = s1.samples[y * w + x];
            let mut mixed = false;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    mixed |= forest(s1.samples[yy as usize * w + xx as usize]) != forest(me);
                }
            }
            let want = if mixed { UNLABELED } else { me };
            if s2.samples[y * w + x] != want {
                return Err(format!("seed {seed} step 2 cell ({x},{y}): got {}, want {want}", s2.samples[y * w + x]));
            }
        }
    }

    let s3 = upsample_nearest(&s2, 16);
    if (s3.width(), s3.height()) != (16 * w, 16 * h) || s3.georef.pixel_size != 1.0 || s3.georef.origin_x != weak.georef.origin_x {
        return Err(format!("seed {seed} step 3 geometry"));
    }
    for cy in 0..h {
        for cx in 0..w {
            let v = s2.samples[cy * w + cx];
            for y in 16 * cy..16 * cy + 16 {
                if s3.samples[y * 16 * w + 16 * cx..y * 16 * w + 16 * cx + 16].iter().any(|c| *c != v) {
                    return Err(format!("seed {seed} step 3 block ({cx},{cy}) not uniform {v}"));
                }
            }
        }
    }

    let s4 = low_canopy_to_background(&s3, &chm, &cfg).map_err(|e| e.to_string())?;
    let med = median_oracle(&chm, 11);
    for i in 0..s3.samples.len() {
        let want = if med[i] < 0.3 { 0 } else { s3.samples[i] };
        if s4.samples[i] != want {
            return Err(format!("seed {seed} step 4 pixel {i}: median {} label {} got {}", med[i], s3.samples[i], s4.samples[i]));
        }
    }

    let full = prep_labels(&weak, &chm, &cfg).map_err(|e| e.to_string())?;
    if full != s4 {
        return Err(format!("seed {seed}: prep_labels differs from the composed steps"));
    }
    Ok([w * h, w * h, s3.samples.len(), s4.samples.len()])
}

/// Relabel reference: breadth-first flood fill over 8-connected conflicts.
pub fn relabel_oracle(labels: &LabelGrid, preds: &LabelGrid, min_area_m2: f64) -> Vec<u8> {
    let (w, h) = (labels.width(), labels.height());
    let conflict = |i: usize| {
        let (l, p) = (labels.samples[i], preds.samples[i]);
        (l == 0 && forest(p)) || (forest(l) && p == 0)
    };
    let mut seen = vec![false; w * h];
    let mut out = labels.samples.clone();
    let px = labels.georef.pixel_size * labels.georef.pixel_size;
    for start in 0..w * h {
        if seen[start] || !conflict(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if !seen[j] && conflict(j) {
                        seen[j] = true;
                        comp.push(j);
                        q.push_back(j);
                    }
                }
            }
        }
        if comp.len() as f64 * px >= min_area_m2 {
            for i in comp {
                out[i] = UNLABELED;
            }
        }
    }
    out
}

/// Random blobby labels and predictions on a `size x size` grid with 16 m^2
/// pixels, so components cross the 25600 m^2 threshold at 1600 pixels.
pub fn check_relabel_case(seed: u64, size: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GeoRef::new(0.0, 4.0 * size as f64, 4.0, size, size).unwrap();
    let blobs = |rng: &mut ChaCha8Rng, allow_unlabeled: bool| -> Vec<u8> {
        let mut v = vec![0u8; size * size];
        for _ in 0..rng.gen_range(3..12) {
            let code = if allow_unlabeled && rng.gen_bool(0.15) { UNLABELED } else { rng.gen_range(0..4) };
            let (cx, cy) = (rng.gen_range(0..size) as i64, rng.gen_range(0..size) as i64);
            let (rx, ry) = (rng.gen_range(3..50) as i64, rng.gen_range(3..50) as i64);
            for y in 0..size as i64 {
                for x in 0..size as i64 {
                    if ((x - cx) * (x - cx)) * ry * ry + ((y - cy) * (y - cy)) * rx * rx <= rx * rx * ry * ry {
                        v[y as usize * size + x as usize] = code;
                    }
                }
            }
        }
        for p in v.iter_mut() {
            if rng.gen_bool(0.02) {
                *p = rng.gen_range(0..4);
            }
        }
        v
    };
    let labels = LabelGrid::new(g, blobs(&mut rng, true)).unwrap();
    let preds = LabelGrid::new(g, blobs(&mut rng, false)).unwrap();
    let cfg = PrepConfig::default();
    let got = relabel_round2(&labels, &preds, &cfg).map_err(|e| e.to_string())?;
    let want = relabel_oracle(&labels, &preds, cfg.relabel_min_area_m2);
    match got.samples.iter().zip(&want).position(|(a, b)| a != b) {
        None => Ok(()),
        Some(i) => Err(format!("seed {seed}: pixel {i} got {} want {}", got.samples[i], want[i])),
    }
}

/// A 30000 m^2 conflict rectangle becomes unlabeled, a 20000 m^2 one does not.
pub fn check_relabel_threshold() -> Check {
    let (w, h) = (420, 220);
    let g = GeoRef::new(0.0, h as f64, 1.0, w, h).unwrap();
    let mut labels = vec![0u8; w * h];
    let preds = vec![0u8; w * h];
    // 200 x 150 = 30000 and 200 x 100 = 20000, separated by a clean column strip
    for y in 0..150 {
        for x in 0..200 {
            labels[y * w + x] = 3;
        }
    }
    for y in 0..100 {
        for x in 210..410 {
            labels[y * w + x] = 1;
        }
    }
    let labels = LabelGrid::new(g, labels).unwrap();
    let preds = LabelGrid::new(g, preds).unwrap();
    let out = relabel_round2(&labels, &preds, &PrepConfig::default()).map_err(|e| e.to_string())?;
    let oracle = relabel_oracle(&labels, &preds, 25_600.0);
    if out.samples != oracle {
        return Err("threshold case differs from flood-fill oracle".into());
    }
    if out.get(10, 10) != UNLABELED || out.get(199, 149) != UNLABELED {
        return Err("30000 m^2 region was not unlabeled".into());
    }
    if out.get(300, 50) != 1 || out.get(409, 99) != 1 {
        return Err("20000 m^2 region changed".into());
    }
    Ok(())
}

type Q = Ratio<i128>;

fn q(n: u64, d: u64) -> Option<Q> {
    (d != 0).then(|| Q::new(n as i128, d as i128))
}

fn to_f64(v: Q) -> f64 {
    *v.numer() as f64 / *v.denom() as f64
}

/// Exact rational metrics for one matrix, compared at 1e-9.
pub fn check_metrics(counts: [[u64; 4]; 4]) -> Check {
    let cm = ConfusionMatrix::from_counts(counts);
    let zero = Q::from_integer(0);
    let total: u64 = counts.iter().flatten().sum();
    let mut f1s = Vec::new();
    for c in 0..4 {
        let row: u64 = counts[c].iter().sum();
        let col: u64 = (0..4).map(|r| counts[r][c]).sum();
        let p = q(counts[c][c], row).unwrap_or(zero);
        let r = q(counts[c][c], col).unwrap_or(zero);
        let f = if p + r == zero { zero } else { Q::from_integer(2) * p * r / (p + r) };
        for (name, exact, got) in [("precision", p, cm.precision(c)), ("recall", r, cm.recall(c)), ("f1", f, cm.f1(c))] {
            if (to_f64(exact) - got).abs() > 1e-9 {
                return Err(format!("{name}[{c}] {got} vs {}", to_f64(exact)));
            }
        }
        f1s.push(f);
    }
    let trace: u64 = (0..4).map(|i| counts[i][i]).sum();
    let oa = q(trace, total).unwrap_or(zero);
    let macro_f1 = f1s.iter().fold(zero, |a, b| a + b) / Q::from_integer(4);
    if (to_f64(oa) - cm.overall_accuracy()).abs() > 1e-9 || (to_f64(macro_f1) - cm.macro_f1()).abs() > 1e-9 {
        return Err(format!("oa/macro-F1 mismatch for {counts:?}"));
    }
    Ok(())
}

pub fn random_counts(rng: &mut ChaCha8Rng) -> [[u64; 4]; 4] {
    let mut m = [[0u64; 4]; 4];
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v = if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..500) };
        }
    }
    m
}

/// Brute force over every pixel of the map: membership by center distance,
/// then the species-over-background rule.
pub fn dominant_oracle(map: &LabelGrid, plot: &PlotRecord) -> Option<u8> {
    let g = &map.georef;
    let r2 = plot.area_m2 / std::f64::consts::PI;
    let mut counts = [0usize; 4];
    for row in 0..g.height {
        for col in 0..g.width {
            let x = g.origin_x + (col as f64 + 0.5) * g.pixel_size;
            let y = g.origin_y - (row as f64 + 0.5) * g.pixel_size;
            let d2 = (x - plot.center_x).powi(2) + (y - plot.center_y).powi(2);
            let code = map.samples[row * g.width + col];
            if d2 < r2 && code != UNLABELED {
                counts[code as usize] += 1;
            }
        }
    }
    if counts.iter().sum::<usize>() == 0 {
        return None;
    }
    let species = (1..4).max_by(|a, b| counts[*a].cmp(&counts[*b]).then(b.cmp(a))).unwrap();
    Some(if counts[species] > 0 { species as u8 } else { 0 })
}

pub fn check_plot_case(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(20..60), rng.gen_range(20..60));
    let g = GeoRef::new(500.0, 900.0, 1.0, w, h).unwrap();
    let patch = rng.gen_range(2..9);
    let codes: Vec<u8> = (0..((w / patch + 1) * (h / patch + 1))).map(|_| [0u8, 0, 1, 2, 3, 255][rng.gen_range(0..6)]).collect();
    let samples = (0..w * h).map(|i| codes[(i / w / patch) * (w / patch + 1) + (i % w) / patch]).collect();
    let map = LabelGrid::new(g, samples).unwrap();
    let area = rng.gen_range(20.0..250.0);
    let r = (area / std::f64::consts::PI).sqrt();
    let plot = PlotRecord {
        id: 0,
        center_x: 500.0 + rng.gen_range(r..w as f64 - r),
        center_y: 900.0 - rng.gen_range(r..h as f64 - r),
        area_m2: area,
        reference_class: 0,
    };
    let got = plot_dominant_class(&map, &plot).ok();
    let want = dominant_oracle(&map, &plot);
    if got != want {
        let counts = plot_class_counts(&map, &plot, 0).ok();
        return Err(format!("seed {seed}: got {got:?} want {want:?} counts {counts:?}"));
    }
    Ok(())
}
