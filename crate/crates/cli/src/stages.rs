//! File-level stage operations. Each reads its inputs from disk, calls the
//! library, and writes its outputs; the subcommands and the pipeline share them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use canopyseg::eval::{emit_report, evaluate_plots, read_plots, write_plots, ConfusionMatrix};
use canopyseg::grid::{compute_chm, load_float, load_label, save_float, save_label};
use canopyseg::infer::{predict_map, write_ppm, InferConfig};
use canopyseg::labels::{apply_land_mask, prep_labels, relabel_round2, PrepConfig};
use canopyseg::net::{load_checkpoint_for, save_checkpoint, NetConfig};
use canopyseg::synth::{gen_scene, SceneSpec};
use canopyseg::train::{metrics_csv, train_epochs, CowMixConfig, FocalConfig, TrainConfig, TrainData};

pub fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("missing artifact {}", path.display());
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

pub const SYNTH_OUTPUTS: [&str; 5] = ["dtm.csr", "dsm.csr", "truth.csr", "weak16.csr", "plots.csv"];

pub fn synth(spec: &SceneSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let scene = gen_scene(spec)?;
    let paths: Vec<PathBuf> = SYNTH_OUTPUTS.iter().map(|n| out_dir.join(n)).collect();
    save_float(&scene.dtm, &paths[0])?;
    save_float(&scene.dsm, &paths[1])?;
    save_label(&scene.truth, &paths[2])?;
    save_label(&scene.weak16, &paths[3])?;
    write_plots(&scene.plots, &paths[4])?;
    Ok(paths)
}

pub fn chm(dsm: &Path, dtm: &Path, out: &Path) -> Result<()> {
    require(dsm)?;
    require(dtm)?;
    let chm = compute_chm(&load_float(dsm)?, &load_float(dtm)?)?;
    create_parent(out)?;
    save_float(&chm, out)?;
    Ok(())
}

pub fn prep(weak: &Path, chm: &Path, mask: Option<&Path>, cfg: &PrepConfig, out: &Path) -> Result<()> {
    require(weak)?;
    require(chm)?;
    let mut labels = prep_labels(&load_label(weak)?, &load_float(chm)?, cfg)?;
    if let Some(m) = mask {
        require(m)?;
        labels = apply_land_mask(&labels, &load_label(m)?)?;
    }
    create_parent(out)?;
    save_label(&labels, out)?;
    Ok(())
}

pub struct TrainJob<'a> {
    pub dtm: &'a Path,
    pub chm: &'a Path,
    pub labels: &'a Path,
    pub init: Option<&'a Path>,
    pub checkpoint: &'a Path,
    pub metrics: &'a Path,
}

pub fn train(job: &TrainJob, tcfg: &TrainConfig, ncfg: &NetConfig, focal: &FocalConfig, cow: &CowMixConfig) -> Result<()> {
    for p in [job.dtm, job.chm, job.labels] {
        require(p)?;
    }
    let data = TrainData { dtm: load_float(job.dtm)?, chm: load_float(job.chm)?, labels: load_label(job.labels)? };
    let init = match job.init {
        Some(p) => {
            require(p)?;
            Some(load_checkpoint_for(p, ncfg)?)
        }
        None => None,
    };
    let outcome = train_epochs(&data, tcfg, ncfg, focal, cow, init)?;
    create_parent(job.checkpoint)?;
    save_checkpoint(&outcome.params, ncfg, job.checkpoint)?;
    create_parent(job.metrics)?;
    std::fs::write(job.metrics, metrics_csv(&outcome.metrics))?;
    Ok(())
}

pub struct PredictJob<'a> {
    pub dtm: &'a Path,
    pub chm: &'a Path,
    pub checkpoint: &'a Path,
    pub species: &'a Path,
    pub logits_dir: Option<&'a Path>,
    pub preview: Option<&'a Path>,
}

/// Returns the paths written.
pub fn predict(job: &PredictJob, ncfg: &NetConfig, icfg: &InferConfig) -> Result<Vec<PathBuf>> {
    for p in [job.dtm, job.chm, job.checkpoint] {
        require(p)?;
    }
    let params = load_checkpoint_for(job.checkpoint, ncfg)?;
    let (species, logits) = predict_map(&load_float(job.dtm)?, &load_float(job.chm)?, &params, ncfg, icfg)?;
    create_parent(job.species)?;
    save_label(&species, job.species)?;
    let mut written = vec![job.species.to_path_buf()];
    if let Some(dir) = job.logits_dir {
        std::fs::create_dir_all(dir)?;
        for (c, grid) in logits.iter().enumerate() {
            let p = dir.join(format!("logits_{c}.csr"));
            save_float(grid, &p)?;
            written.push(p);
        }
    }
    if let Some(p) = job.preview {
        create_parent(p)?;
        write_ppm(&species, p)?;
        written.push(p.to_path_buf());
    }
    Ok(written)
}

pub fn relabel(labels: &Path, predictions: &Path, cfg: &PrepConfig, out: &Path) -> Result<()> {
    require(labels)?;
    require(predictions)?;
    let relabeled = relabel_round2(&load_label(labels)?, &load_label(predictions)?, cfg)?;
    create_parent(out)?;
    save_label(&relabeled, out)?;
    Ok(())
}

/// Writes `<stem>.txt` and `<stem>.csv`.
pub fn eval(species: &Path, plots: &Path, stem: &Path) -> Result<ConfusionMatrix> {
    require(species)?;
    require(plots)?;
    let cm = evaluate_plots(&load_label(species)?, &read_plots(plots)?)?;
    create_parent(stem)?;
    emit_report(&cm, stem)?;
    Ok(cm)
}
