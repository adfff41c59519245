//! Plot-based accuracy assessment: dominant-class reduction over circular
//! plots, a 4x4 confusion matrix and its derived metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{is_forest, LabelGrid, CLASS_NAMES, NUM_CLASSES, UNLABELED};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("plot {index}: circle outside the map extent")]
    PlotOutside { index: usize },
    #[error("plot {index}: no countable pixels inside the circle")]
    EmptyPlot { index: usize },
    #[error("plot {index}: invalid record ({reason})")]
    InvalidPlot { index: usize, reason: String },
    #[error("no plots to evaluate")]
    NoPlots,
    #[error("empty evaluation")]
    EmptyEvaluation,
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A circular reference plot in map coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub id: u32,
    #[serde(rename = "x")]
    pub center_x: f64,
    #[serde(rename = "y")]
    pub center_y: f64,
    pub area_m2: f64,
    #[serde(rename = "ref_class")]
    pub reference_class: u8,
}

impl PlotRecord {
    pub fn radius(&self) -> f64 {
        plot_radius(self.area_m2)
    }
}

pub fn plot_radius(area_m2: f64) -> f64 {
    (area_m2 / std::f64::consts::PI).sqrt()
}

/// Indices (col, row) of pixels whose centers lie strictly inside the circle.
/// Errors when the circle leaves the grid.
pub fn pixels_in_circle(map: &LabelGrid, cx: f64, cy: f64, radius: f64) -> Option<Vec<(usize, usize)>> {
    let g = &map.georef;
    let (pc, pr) = g.to_pixel(cx, cy);
    let rp = radius / g.pixel_size;
    if pc - rp < 0.0 || pr - rp < 0.0 || pc + rp > g.width as f64 || pr + rp > g.height as f64 {
        return None;
    }
    let c0 = (pc - rp).floor().max(0.0) as usize;
    let c1 = ((pc + rp).ceil() as usize).min(g.width - 1);
    let r0 = (pr - rp).floor().max(0.0) as usize;
    let r1 = ((pr + rp).ceil() as usize).min(g.height - 1);
    let mut out = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (x, y) = g.pixel_center(c, r);
            if (x - cx).powi(2) + (y - cy).powi(2) < radius * radius {
                out.push((c, r));
            }
        }
    }
    Some(out)
}

/// Counts of classes 0..=3 inside a plot, unlabeled pixels skipped.
pub fn plot_class_counts(map: &LabelGrid, plot: &PlotRecord, index: usize) -> Result<[usize; NUM_CLASSES]> {
    if !(plot.area_m2 > 0.0) {
        return Err(EvalError::InvalidPlot { index, reason: format!("area {}", plot.area_m2) });
    }
    let pixels = pixels_in_circle(map, plot.center_x, plot.center_y, plot.radius())
        .ok_or(EvalError::PlotOutside { index })?;
    let mut counts = [0usize; NUM_CLASSES];
    for (c, r) in pixels {
        let code = map.get(c, r);
        if code != UNLABELED {
            counts[code as usize] += 1;
        }
    }
    if counts.iter().sum::<usize>() == 0 {
        return Err(EvalError::EmptyPlot { index });
    }
    Ok(counts)
}

/// Reduces class counts to one code: the most frequent species if any species
/// pixel is present (ties to the lowest code), background otherwise.
pub fn dominant_from_counts(counts: &[usize; NUM_CLASSES]) -> u8 {
    let mut best = 0u8;
    let mut best_n = 0usize;
    for code in 1..NUM_CLASSES {
        if counts[code] > best_n {
            best_n = counts[code];
            best = code as u8;
        }
    }
    best
}

pub fn plot_dominant_class(map: &LabelGrid, plot: &PlotRecord) -> Result<u8> {
    plot_dominant_class_at(map, plot, 0)
}

fn plot_dominant_class_at(map: &LabelGrid, plot: &PlotRecord, index: usize) -> Result<u8> {
    Ok(dominant_from_counts(&plot_class_counts(map, plot, index)?))
}

/// Rows are predictions, columns are references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn add(&mut self, predicted: u8, reference: u8) {
        self.counts[predicted as usize][reference as usize] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        self.counts[r].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn precision(&self, class: usize) -> f64 {
        ratio(self.counts[class][class], self.row_sum(class))
    }

    pub fn recall(&self, class: usize) -> f64 {
        ratio(self.counts[class][class], self.col_sum(class))
    }

    pub fn f1(&self, class: usize) -> f64 {
        let (p, r) = (self.precision(class), self.recall(class));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn overall_accuracy(&self) -> f64 {
        ratio((0..NUM_CLASSES).map(|i| self.counts[i][i]).sum(), self.total())
    }

    pub fn macro_f1(&self) -> f64 {
        (0..NUM_CLASSES).map(|c| self.f1(c)).sum::<f64>() / NUM_CLASSES as f64
    }
}

/// Evaluates every plot against the species map. Per-plot failures abort the
/// evaluation and carry the offending plot's index.
pub fn evaluate_plots(map: &LabelGrid, plots: &[PlotRecord]) -> Result<ConfusionMatrix> {
    if plots.is_empty() {
        return Err(EvalError::NoPlots);
    }
    let mut cm = ConfusionMatrix::default();
    for (i, plot) in plots.iter().enumerate() {
        if plot.reference_class as usize >= NUM_CLASSES {
            return Err(EvalError::InvalidPlot { index: i, reason: format!("reference class {}", plot.reference_class) });
        }
        let predicted = plot_dominant_class_at(map, plot, i)?;
        cm.add(predicted, plot.reference_class);
    }
    Ok(cm)
}

pub fn read_plots(path: impl AsRef<Path>) -> Result<Vec<PlotRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut plots = Vec::new();
    for rec in reader.deserialize() {
        plots.push(rec?);
    }
    Ok(plots)
}

pub fn write_plots(plots: &[PlotRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in plots {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Table layout mirroring the published confusion matrix: predictions as
/// rows, references as columns, sums, precision, F1, recall, OA and macro-F1.
pub fn format_table(cm: &ConfusionMatrix) -> String {
    let mut s = String::new();
    let w = 14;
    s.push_str(&format!("{:<w$}", "Pred \\ Ref"));
    for name in CLASS_NAMES {
        s.push_str(&format!("{name:>w$}"));
    }
    s.push_str(&format!("{:>8}{:>11}{:>10}\n", "Sum", "Precision", "F1"));
    for r in 0..NUM_CLASSES {
        s.push_str(&format!("{:<w$}", CLASS_NAMES[r]));
        for c in 0..NUM_CLASSES {
            s.push_str(&format!("{:>w$}", cm.counts[r][c]));
        }
        s.push_str(&format!("{:>8}{:>11.2}{:>10.2}\n", cm.row_sum(r), cm.precision(r), cm.f1(r)));
    }
    s.push_str(&format!("{:<w$}", "Sum"));
    for c in 0..NUM_CLASSES {
        s.push_str(&format!("{:>w$}", cm.col_sum(c)));
    }
    s.push_str(&format!(
        "{:>8}{:>11}{:>10}\n",
        cm.total(),
        format!("OA: {:.2}", cm.overall_accuracy()),
        format!("mF1: {:.2}", cm.macro_f1())
    ));
    s.push_str(&format!("{:<w$}", "Recall"));
    for c in 0..NUM_CLASSES {
        s.push_str(&format!("{:>w$.2}", cm.recall(c)));
    }
    s.push('\n');
    s
}

fn report_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("txt"), stem.with_extension("csv"))
}

/// Writes `<stem>.txt` (aligned table) and `<stem>.csv` (counts and metrics
/// at full precision). Returns the two paths.
pub fn emit_report(cm: &ConfusionMatrix, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let (txt, csv_path) = report_paths(stem.as_ref());
    fs::write(&txt, format_table(cm))?;
    let mut f = std::io::BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(f, "kind,class,c0,c1,c2,c3,value")?;
    for r in 0..NUM_CLASSES {
        let row = cm.counts[r];
        writeln!(f, "count,{r},{},{},{},{},", row[0], row[1], row[2], row[3])?;
    }
    for c in 0..NUM_CLASSES {
        writeln!(f, "precision,{c},,,,,{:?}", cm.precision(c))?;
        writeln!(f, "recall,{c},,,,,{:?}", cm.recall(c))?;
        writeln!(f, "f1,{c},,,,,{:?}", cm.f1(c))?;
    }
    writeln!(f, "overall_accuracy,,,,,,{:?}", cm.overall_accuracy())?;
    writeln!(f, "macro_f1,,,,,,{:?}", cm.macro_f1())?;
    f.flush()?;
    Ok((txt, csv_path))
}

/// Reads the counts back from a machine-readable report.
pub fn load_report_counts(path: impl AsRef<Path>) -> Result<ConfusionMatrix> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut cm = ConfusionMatrix::default();
    let mut seen = 0;
    for rec in reader.records() {
        let rec = rec?;
        if &rec[0] != "count" {
            continue;
        }
        let r: usize = rec[1].parse().map_err(|_| EvalError::Report(format!("row index {:?}", &rec[1])))?;
        if r >= NUM_CLASSES {
            return Err(EvalError::Report(format!("row index {r}")));
        }
        for c in 0..NUM_CLASSES {
            cm.counts[r][c] = rec[2 + c].parse().map_err(|_| EvalError::Report(format!("count {:?}", &rec[2 + c])))?;
        }
        seen += 1;
    }
    if seen != NUM_CLASSES {
        return Err(EvalError::Report(format!("expected {NUM_CLASSES} count rows, found {seen}")));
    }
    Ok(cm)
}

/// Fraction of forest-coded pixels; handy for logs.
pub fn forest_fraction(map: &LabelGrid) -> f64 {
    let n = map.samples.iter().filter(|c| is_forest(**c)).count();
    n as f64 / map.samples.len() as f64
}
