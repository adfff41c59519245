use canopyseg::infer::{tile_plan, InferConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn multiplicity(w: usize, h: usize, cfg: &InferConfig) -> Vec<u8> {
    let mut hits = vec![0u8; w * h];
    for t in tile_plan(w, h, cfg).unwrap() {
        for r in t.rows.write_start..t.rows.write_end {
            for c in t.cols.write_start..t.cols.write_end {
                hits[r * w + c] = hits[r * w + c].saturating_add(1);
            }
        }
    }
    hits
}

#[test]
fn every_pixel_written_once_up_to_1024() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..=1024), rng.gen_range(1..=1024));
        let cfg = InferConfig::desk();
        assert!(multiplicity(w, h, &cfg).iter().all(|m| *m == 1), "{w}x{h}");
    }
}

proptest! {
    #[test]
    fn coverage_for_any_tile_and_crop(w in 1usize..700, h in 1usize..700, tile_k in 1usize..9, crop_frac in 0usize..4) {
        let tile = 32 * tile_k;
        let crop = (tile / 2 - 1).min(crop_frac * tile / 8);
        let cfg = InferConfig { tile_px: tile, crop_px: crop, blur_sigma_px: 1.0 };
        prop_assert!(multiplicity(w, h, &cfg).iter().all(|m| *m == 1));
        for t in tile_plan(w, h, &cfg).unwrap() {
            // interior writes never use the cropped margin
            if t.cols.write_start > 0 { prop_assert!(t.cols.write_start >= t.cols.read_start + crop); }
            if t.cols.write_end < w { prop_assert!(t.cols.write_end + crop <= t.cols.read_start + tile); }
        }
    }
}
