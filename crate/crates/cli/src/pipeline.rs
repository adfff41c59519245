//! Two-round pipeline with a hash manifest for resuming.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::stages::{self, PredictJob, TrainJob};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outputs: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: String,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Checkpoints recorded by training stages.
    pub fn checkpoints(&self) -> Vec<&Artifact> {
        self.stages.iter().flat_map(|s| &s.outputs).filter(|a| a.path.ends_with(".csnp")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?))
}

/// Stage names in execution order.
pub fn stage_names(relabel: bool) -> Vec<&'static str> {
    let mut v = vec!["synth", "chm", "prep", "train_r1", "predict_r1", "eval_r1"];
    if relabel {
        v.extend(["relabel", "train_r2", "predict_r2", "eval"]);
    }
    v
}

/// Final species map and report for a run directory.
pub fn final_report(manifest: &Manifest) -> &'static str {
    if manifest.stage("eval").is_some() {
        "report.csv"
    } else {
        "report_r1.csv"
    }
}

struct Run<'a> {
    dir: &'a Path,
    cfg: &'a PipelineConfig,
}

impl Run<'_> {
    fn p(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn exec(&self, stage: &str) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let p = |n: &str| self.p(n);
        match stage {
            "synth" => stages::synth(&c.synth, self.dir),
            "chm" => {
                stages::chm(&p("dsm.csr"), &p("dtm.csr"), &p("chm.csr"))?;
                Ok(vec![p("chm.csr")])
            }
            "prep" => {
                stages::prep(&p("weak16.csr"), &p("chm.csr"), None, &c.prep, &p("labels_r1.csr"))?;
                Ok(vec![p("labels_r1.csr")])
            }
            "train_r1" | "train_r2" => {
                let r2 = stage == "train_r2";
                let (labels, ckpt, metrics) = if r2 { ("labels_r2.csr", "model_r2.csnp", "metrics_r2.csv") } else { ("labels_r1.csr", "model_r1.csnp", "metrics_r1.csv") };
                let init = p("model_r1.csnp");
                let job = TrainJob { dtm: &p("dtm.csr"), chm: &p("chm.csr"), labels: &p(labels), init: (r2 && c.round2_warm_start).then_some(init.as_path()), checkpoint: &p(ckpt), metrics: &p(metrics) };
                let mut tcfg = c.train.clone();
                if r2 {
                    tcfg.seed = tcfg.seed.wrapping_add(1);
                    tcfg.epochs = c.round2_epochs.unwrap_or(tcfg.epochs);
                }
                stages::train(&job, &tcfg, &c.net, &c.focal, &c.cowmix)?;
                Ok(vec![p(ckpt), p(metrics)])
            }
            "predict_r1" => {
                let job = PredictJob { dtm: &p("dtm.csr"), chm: &p("chm.csr"), checkpoint: &p("model_r1.csnp"), species: &p("species_r1.csr"), logits_dir: None, preview: None };
                stages::predict(&job, &c.net, &c.infer)
            }
            "predict_r2" => {
                let job = PredictJob { dtm: &p("dtm.csr"), chm: &p("chm.csr"), checkpoint: &p("model_r2.csnp"), species: &p("species.csr"), logits_dir: None, preview: Some(&p("species.ppm")) };
                stages::predict(&job, &c.net, &c.infer)
            }
            "eval_r1" => {
                stages::eval(&p("species_r1.csr"), &p("plots.csv"), &p("report_r1"))?;
                Ok(vec![p("report_r1.txt"), p("report_r1.csv")])
            }
            "relabel" => {
                stages::relabel(&p("labels_r1.csr"), &p("species_r1.csr"), &c.prep, &p("labels_r2.csr"))?;
                Ok(vec![p("labels_r2.csr")])
            }
            "eval" => {
                stages::eval(&p("species.csr"), &p("plots.csv"), &p("report"))?;
                Ok(vec![p("report.txt"), p("report.csv")])
            }
            other => Err(anyhow!("unknown stage {other}")),
        }
    }

    fn record(&self, name: &str, outputs: &[PathBuf]) -> Result<StageRecord> {
        let mut arts = Vec::with_capacity(outputs.len());
        for o in outputs {
            let rel = o.strip_prefix(self.dir).unwrap_or(o).to_string_lossy().replace('\\', "/");
            arts.push(Artifact { path: rel, sha256: file_sha256(o)? });
        }
        Ok(StageRecord { name: name.to_string(), outputs: arts })
    }

    /// `Ok(true)` when every recorded output is present with its hash.
    fn verify(&self, rec: &StageRecord) -> Result<bool> {
        let mut all = true;
        for a in &rec.outputs {
            let path = self.p(&a.path);
            if !path.is_file() {
                all = false;
                continue;
            }
            let h = file_sha256(&path)?;
            if h != a.sha256 {
                bail!("manifest hash mismatch for {}: recorded {}, found {}", a.path, a.sha256, h);
            }
        }
        Ok(all)
    }
}

/// Error carrying the stage that failed.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: String,
    pub source: anyhow::Error,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageFailure {}

pub fn fail(stage: &str, e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(StageFailure { stage: stage.to_string(), source: e })
}

/// Runs every stage into `dir`. With `resume`, stages whose outputs still
/// match the manifest are skipped; the first stage that reruns forces all
/// later stages to rerun.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path, resume: bool) -> Result<Manifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let config = cfg.to_text();
    let config_sha256 = sha256_hex(config.as_bytes());
    let manifest_path = dir.join(MANIFEST);
    let previous = if resume && manifest_path.is_file() {
        let m = Manifest::load(&manifest_path).map_err(|e| fail("resume", e))?;
        if m.config_sha256 != config_sha256 {
            return Err(fail("resume", anyhow!("config differs from the one recorded in {}", manifest_path.display())));
        }
        Some(m)
    } else {
        None
    };
    let mut manifest = Manifest { version: 1, config: config.clone(), config_sha256, stages: Vec::new() };
    std::fs::write(dir.join("config.cfg"), &config)?;
    let run = Run { dir, cfg };
    let mut dirty = previous.is_none();
    for name in stage_names(cfg.relabel) {
        let recorded = previous.as_ref().and_then(|m| m.stage(name));
        if !dirty {
            if let Some(rec) = recorded {
                if run.verify(rec).map_err(|e| fail(name, e))? {
                    log::info!("{name}: up to date");
                    manifest.stages.push(rec.clone());
                    continue;
                }
            }
            dirty = true;
        }
        log::info!("{name}: running");
        let outputs = run.exec(name).map_err(|e| fail(name, e))?;
        manifest.stages.push(run.record(name, &outputs).map_err(|e| fail(name, e))?);
        manifest.save(&manifest_path).map_err(|e| fail(name, e))?;
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}
