//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.
//! Tests hold a shared lock so wall-clock limits are measured without
//! competing work.

#[path = "../../core/tests/support/fd.rs"]
mod fd;
#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use canopyseg::eval::{load_report_counts, ConfusionMatrix};
use canopyseg::grid::{compute_chm, gaussian_blur, median_filter, FloatGrid, GeoRef};
use canopyseg::infer::{predict_map, tile_plan, InferConfig};
use canopyseg::net::{init_model, NetConfig, Tensor4};
use canopyseg::synth::{gen_scene, SceneSpec};
use canopyseg::train::{focal_loss, FocalConfig};
use canopyseg_cli::pipeline::Manifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, what: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("criterion {n}: PASS ({what})");
    } else {
        println!("criterion {n}: FAIL ({what})");
        for f in failures {
            println!("    {f}");
        }
    }
    assert!(failures.is_empty(), "criterion {n} failed: {failures:?}");
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn pipeline(cfg: &Path, out: &Path, extra: &[&str]) -> Duration {
    let t = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_canopyseg"))
        .arg("--config")
        .arg(cfg)
        .arg("--out-dir")
        .arg(out)
        .args(extra)
        .arg("pipeline")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "pipeline {}: {}", cfg.display(), String::from_utf8_lossy(&o.stderr));
    t.elapsed()
}

const REFERENCE_COUNTS: [[u64; 4]; 4] = [[352, 14, 23, 23], [9, 64, 15, 36], [6, 17, 153, 43], [4, 26, 34, 187]];

fn r2(v: f64) -> String {
    format!("{v:.2}")
}

#[test]
fn criterion_1_reference_matrix_metrics() {
    let _g = serial();
    let t = Instant::now();
    let cm = ConfusionMatrix::from_counts(REFERENCE_COUNTS);
    let mut failures = Vec::new();
    let expect = [
        ("precision", ["0.85", "0.52", "0.70", "0.75"], (0..4).map(|c| cm.precision(c)).collect::<Vec<_>>()),
        ("recall", ["0.95", "0.53", "0.68", "0.65"], (0..4).map(|c| cm.recall(c)).collect()),
        ("f1", ["0.90", "0.52", "0.69", "0.69"], (0..4).map(|c| cm.f1(c)).collect()),
    ];
    for (name, want, got) in expect {
        for c in 0..4 {
            if r2(got[c]) != want[c] {
                failures.push(format!("{name}[{c}] = {} want {}", got[c], want[c]));
            }
        }
    }
    if r2(cm.overall_accuracy()) != "0.75" {
        failures.push(format!("OA {}", cm.overall_accuracy()));
    }
    if r2(cm.macro_f1()) != "0.70" {
        failures.push(format!("macro-F1 {}", cm.macro_f1()));
    }
    let dt = t.elapsed();
    if dt >= Duration::from_secs(1) {
        failures.push(format!("took {dt:?}"));
    }
    report(1, "reference confusion matrix metrics", &failures);
}

fn macro_f1(path: &Path) -> f64 {
    load_report_counts(path).unwrap().macro_f1()
}

#[test]
fn criterion_2_synthetic_end_to_end() {
    let _g = serial();
    let limit = Duration::from_secs(30 * 60);
    let mut failures = Vec::new();

    let clean = tempfile::tempdir().unwrap();
    let dt = pipeline(&config("accept_clean.cfg"), clean.path(), &[]);
    let f_clean = macro_f1(&clean.path().join("report_r1.csv"));
    println!("    clean: macro-F1 {f_clean:.3} in {:.0} s", dt.as_secs_f64());
    if f_clean < 0.80 {
        failures.push(format!("clean macro-F1 {f_clean:.3} < 0.80"));
    }
    if dt > limit {
        failures.push(format!("clean run took {dt:?}"));
    }

    let noisy = tempfile::tempdir().unwrap();
    let dt = pipeline(&config("accept_clearcut.cfg"), noisy.path(), &[]);
    let f_r1 = macro_f1(&noisy.path().join("report_r1.csv"));
    let f_r2 = macro_f1(&noisy.path().join("report.csv"));
    println!("    clearcut: round 1 macro-F1 {f_r1:.3}, round 2 macro-F1 {f_r2:.3} in {:.0} s", dt.as_secs_f64());
    if f_r2 < 0.70 {
        failures.push(format!("clearcut macro-F1 {f_r2:.3} < 0.70"));
    }
    if f_r2 < f_r1 {
        failures.push(format!("round 2 ({f_r2:.3}) below round 1 ({f_r1:.3})"));
    }
    if dt > limit {
        failures.push(format!("clearcut run took {dt:?}"));
    }
    report(2, "synthetic end-to-end macro-F1", &failures);
}

#[test]
fn criterion_3_gradient_checks() {
    let _g = serial();
    let t = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..3 {
        for (name, err) in fd::layer_checks(seed) {
            if err >= fd::TOL {
                failures.push(format!("{name} seed {seed}: {err:e}"));
            }
        }
    }
    let cfg = NetConfig { depth: 2, base_filters: 4, ..NetConfig::default() };
    let (p, x) = fd::network_check(&cfg, [1, 2, 16, 16], 5);
    if p >= fd::TOL || x >= fd::TOL {
        failures.push(format!("depth-2 network: params {p:e}, input {x:e}"));
    }
    for seed in 0..4 {
        let e = fd::focal_check(seed);
        if e >= fd::TOL {
            failures.push(format!("focal seed {seed}: {e:e}"));
        }
    }
    let dt = t.elapsed();
    if dt >= Duration::from_secs(120) {
        failures.push(format!("took {dt:?}"));
    }
    report(3, "finite-difference gradients", &failures);
}

#[test]
fn criterion_4_oracle_suites() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let win = [1, 3, 5, 7, 11][rng.gen_range(0..5)];
        let g = GeoRef::new(0.0, h as f64, 1.0, w, h).unwrap();
        let grid = FloatGrid::new(g, (0..w * h).map(|_| rng.gen_range(-10.0..10.0)).collect(), None).unwrap();
        if median_filter(&grid, win).unwrap().samples != oracle::median_oracle(&grid, win) {
            failures.push(format!("median {w}x{h} window {win}"));
        }
    }

    let g = GeoRef::new(0.0, 21.0, 1.0, 21, 21).unwrap();
    let mut impulse = FloatGrid::filled(g, 0.0);
    impulse.samples[10 * 21 + 10] = 1.0;
    let peak = gaussian_blur(&impulse, 1.0).unwrap().get(10, 10) as f64;
    if (peak - 0.1593).abs() > 1e-4 {
        failures.push(format!("gaussian impulse peak {peak}"));
    }

    // p_t = 3 / (3 + 1 + 1 + 1) = 0.5
    let logits = Tensor4::<f64>::from_vec([1, 4, 1, 1], vec![3f64.ln(), 0.0, 0.0, 0.0]);
    let (loss, _) = focal_loss(&logits, &[0], &FocalConfig::default(), &[1.0; 4]).unwrap();
    if (loss - 0.086643).abs() > 1e-6 {
        failures.push(format!("focal scalar {loss}"));
    }

    for seed in 0..20 {
        if let Err(e) = oracle::check_relabel_case(seed, 128) {
            failures.push(format!("relabel: {e}"));
        }
    }
    if let Err(e) = oracle::check_relabel_threshold() {
        failures.push(format!("relabel threshold: {e}"));
    }
    report(4, "oracle equivalence suites", &failures);
}

#[test]
fn criterion_5_tiling_seamlessness() {
    let _g = serial();
    let mut failures = Vec::new();

    let spec = SceneSpec { seed: 5, extent_m: 512, plot_count: 0, ..SceneSpec::default() };
    let scene = gen_scene(&spec).unwrap();
    let chm = compute_chm(&scene.dsm, &scene.dtm).unwrap();
    let ncfg = NetConfig::desk();
    let params = init_model::<f32>(&ncfg, 5).unwrap();
    let small = InferConfig { tile_px: 128, crop_px: 32, blur_sigma_px: 1.0 };
    let large = InferConfig { tile_px: 256, ..small };
    let (la, ga) = predict_map(&scene.dtm, &chm, &params, &ncfg, &small).unwrap();
    let (lb, gb) = predict_map(&scene.dtm, &chm, &params, &ncfg, &large).unwrap();
    let mut differing = 0usize;
    let mut max_diff = 0f32;
    for (a, b) in ga.iter().zip(&gb) {
        for (x, y) in a.samples.iter().zip(&b.samples) {
            if x.to_bits() != y.to_bits() {
                differing += 1;
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    let label_diff = la.samples.iter().zip(&lb.samples).filter(|(a, b)| a != b).count();
    if differing > 0 || label_diff > 0 {
        failures.push(format!("tile 128 vs 256: {differing} logits differ (max {max_diff:e}), {label_diff} labels differ"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..=1024), rng.gen_range(1..=1024));
        let mut hits = vec![0u8; w * h];
        for t in tile_plan(w, h, &small).unwrap() {
            for r in t.rows.write_start..t.rows.write_end {
                for c in t.cols.write_start..t.cols.write_end {
                    hits[r * w + c] = hits[r * w + c].saturating_add(1);
                }
            }
        }
        if hits.iter().any(|m| *m != 1) {
            failures.push(format!("coverage {w}x{h}"));
        }
    }
    report(5, "tiling seamlessness", &failures);
}

#[test]
fn criterion_6_label_prep_conformance() {
    let _g = serial();
    let mut failures = Vec::new();
    let mut pixels = [0usize; 4];
    for seed in 0..500 {
        match oracle::check_prep_case(1000 + seed) {
            Ok(n) => (0..4).for_each(|i| pixels[i] += n[i]),
            Err(e) => failures.push(e),
        }
    }
    println!("    500 cases, pixels per step {pixels:?}");
    report(6, "label preparation steps", &failures);
}

fn output_hashes(m: &Manifest) -> Vec<(String, String)> {
    m.stages.iter().flat_map(|s| s.outputs.iter().map(|a| (a.path.clone(), a.sha256.clone()))).collect()
}

#[test]
fn criterion_7_deterministic_pipeline() {
    let _g = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["--seed", "7", "--deterministic"];
    pipeline(&config("desk.cfg"), a.path(), &args);
    pipeline(&config("desk.cfg"), b.path(), &args);
    let ma = Manifest::load(&a.path().join("manifest.json")).unwrap();
    let mb = Manifest::load(&b.path().join("manifest.json")).unwrap();
    let mut failures = Vec::new();
    if ma.config_sha256 != mb.config_sha256 {
        failures.push("config hashes differ".into());
    }
    for ((pa, ha), (pb, hb)) in output_hashes(&ma).iter().zip(&output_hashes(&mb)) {
        if pa != pb || ha != hb {
            failures.push(format!("{pa}: {ha} vs {pb}: {hb}"));
        }
    }
    if output_hashes(&ma).len() != output_hashes(&mb).len() || ma.checkpoints().len() != 2 {
        failures.push("manifests differ in shape".into());
    }
    report(7, "deterministic pipeline", &failures);
}
