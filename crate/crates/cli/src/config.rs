//! Plain-text `[section]` / `key = value` configuration driving every stage.

use anyhow::{anyhow, bail, Context, Result};
use ini::Ini;

use canopyseg::infer::InferConfig;
use canopyseg::labels::{Neighborhood, PrepConfig};
use canopyseg::net::NetConfig;
use canopyseg::synth::SceneSpec;
use canopyseg::train::{CowMixConfig, FocalConfig, Region, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub synth: SceneSpec,
    pub prep: PrepConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Epochs for the second round; `None` reuses `train.epochs`.
    pub round2_epochs: Option<usize>,
    /// Start round 2 from the round-1 parameters instead of a fresh init.
    pub round2_warm_start: bool,
    pub focal: FocalConfig,
    pub cowmix: CowMixConfig,
    pub infer: InferConfig,
    pub relabel: bool,
}

impl Default for PipelineConfig {
    /// Desk scale: depth-3 network, 128 px tiles.
    fn default() -> Self {
        PipelineConfig {
            synth: SceneSpec::default(),
            prep: PrepConfig::default(),
            net: NetConfig::desk(),
            train: TrainConfig::default(),
            round2_epochs: None,
            round2_warm_start: true,
            focal: FocalConfig::default(),
            cowmix: CowMixConfig::default(),
            infer: InferConfig::desk(),
            relabel: true,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| anyhow!("{key} = {v:?}: {e}"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str, n: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = v.split(',').map(|s| num(key, s)).collect::<Result<_>>()?;
    if items.len() != n {
        bail!("{key} needs {n} comma-separated values, got {}", items.len());
    }
    Ok(items)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("{key} = {v:?}: expected true or false"),
    }
}

fn regions(key: &str, v: &str) -> Result<Vec<Region>> {
    v.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let r = list::<usize>(key, s, 4)?;
            Ok(Region { col0: r[0], row0: r[1], width: r[2], height: r[3] })
        })
        .collect()
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).context("malformed config")?;
        let mut cfg = PipelineConfig::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, v) in props.iter() {
                cfg.set(section, key, v).with_context(|| format!("[{section}] {key}"))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        match (section, key) {
            ("synth", "seed") => s.seed = num(key, v)?,
            ("synth", "extent_m") => s.extent_m = num(key, v)?,
            ("synth", "stand_scale_m") => s.stand_scale_m = num(key, v)?,
            ("synth", "density_per_ha") => s.density_per_ha = num(key, v)?,
            ("synth", "species_mix") => s.species_mix = list::<f64>(key, v, 4)?.try_into().unwrap(),
            ("synth", "clearcut_fraction") => s.clearcut_fraction = num(key, v)?,
            ("synth", "clearcut_patch_cells") => s.clearcut_patch_cells = num(key, v)?,
            ("synth", "height_ranges") => {
                let h = list::<f64>(key, v, 6)?;
                s.height_ranges = [(h[0], h[1]), (h[2], h[3]), (h[4], h[5])];
            }
            ("synth", "terrain_amplitude_m") => s.terrain_amplitude_m = num(key, v)?,
            ("synth", "plot_count") => s.plot_count = num(key, v)?,
            ("synth", "plot_area_m2") => s.plot_area_m2 = num(key, v)?,

            ("prep", "chm_median_window_px") => self.prep.chm_median_window_px = num(key, v)?,
            ("prep", "chm_background_threshold_m") => self.prep.chm_background_threshold_m = num(key, v)?,
            ("prep", "border_neighborhood") => {
                self.prep.border_neighborhood = match v.trim() {
                    "4" => Neighborhood::Four,
                    "8" => Neighborhood::Eight,
                    _ => bail!("border_neighborhood must be 4 or 8"),
                }
            }
            ("prep", "relabel_min_area_m2") => self.prep.relabel_min_area_m2 = num(key, v)?,

            ("net", "depth") => self.net.depth = num(key, v)?,
            ("net", "base_filters") => self.net.base_filters = num(key, v)?,
            ("net", "norm_epsilon") => self.net.norm_epsilon = num(key, v)?,

            ("train", "seed") => self.train.seed = num(key, v)?,
            ("train", "tile_px") => self.train.tile_px = num(key, v)?,
            ("train", "batch_size") => self.train.batch_size = num(key, v)?,
            ("train", "epochs") => self.train.epochs = num(key, v)?,
            ("train", "tiles_per_epoch") => self.train.tiles_per_epoch = num(key, v)?,
            ("train", "learning_rate") => self.train.learning_rate = num(key, v)?,
            ("train", "validation_regions") => self.train.validation_regions = regions(key, v)?,
            ("train", "round2_epochs") => self.round2_epochs = Some(num(key, v)?),
            ("train", "round2_warm_start") => self.round2_warm_start = boolean(key, v)?,

            ("focal", "gamma") => self.focal.gamma = num(key, v)?,
            ("focal", "cutoff_p") => self.focal.cutoff_p = num(key, v)?,
            ("focal", "class_weights") => {
                self.focal.class_weights = if v.trim() == "auto" { None } else { Some(list::<f64>(key, v, 4)?.try_into().unwrap()) }
            }

            ("cowmix", "sigma_range_px") => {
                let r = list::<f64>(key, v, 2)?;
                self.cowmix.sigma_range_px = (r[0], r[1]);
            }
            ("cowmix", "keep_fraction_range") => {
                let r = list::<f64>(key, v, 2)?;
                self.cowmix.keep_fraction_range = (r[0], r[1]);
            }
            ("cowmix", "apply_probability") => self.cowmix.apply_probability = num(key, v)?,

            ("infer", "tile_px") => self.infer.tile_px = num(key, v)?,
            ("infer", "crop_px") => self.infer.crop_px = num(key, v)?,
            ("infer", "blur_sigma_px") => self.infer.blur_sigma_px = num(key, v)?,

            ("pipeline", "relabel") => self.relabel = boolean(key, v)?,
            _ => bail!("unknown key"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.prep.validate()?;
        self.net.validate()?;
        self.focal.validate()?;
        self.cowmix.validate()?;
        self.infer.validate()?;
        let div = self.net.size_divisor();
        if self.train.tile_px % div != 0 || self.infer.tile_px % div != 0 {
            bail!("train and infer tile sizes must be divisible by {div}");
        }
        let regs = &self.train.validation_regions;
        for (i, a) in regs.iter().enumerate() {
            if a.col0 + a.width > self.synth.extent_m || a.row0 + a.height > self.synth.extent_m {
                bail!("validation region {i} extends past the {} px scene", self.synth.extent_m);
            }
        }
        Ok(())
    }

    /// Overrides every seed: the scene uses `seed`, training rounds use
    /// `seed` and `seed + 1`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let h = s.height_ranges;
        let nb = match self.prep.border_neighborhood {
            Neighborhood::Four => 4,
            Neighborhood::Eight => 8,
        };
        let regions = self.train.validation_regions.iter().map(|r| format!("{},{},{},{}", r.col0, r.row0, r.width, r.height)).collect::<Vec<_>>().join(";");
        let weights = match self.focal.class_weights {
            None => "auto".to_string(),
            Some(w) => join(&w),
        };
        let mut out = String::new();
        out += &format!(
            "[synth]\nseed = {}\nextent_m = {}\nstand_scale_m = {:?}\ndensity_per_ha = {:?}\nspecies_mix = {}\nclearcut_fraction = {:?}\nclearcut_patch_cells = {}\nheight_ranges = {}\nterrain_amplitude_m = {:?}\nplot_count = {}\nplot_area_m2 = {:?}\n\n",
            s.seed,
            s.extent_m,
            s.stand_scale_m,
            s.density_per_ha,
            join(&s.species_mix),
            s.clearcut_fraction,
            s.clearcut_patch_cells,
            join(&[h[0].0, h[0].1, h[1].0, h[1].1, h[2].0, h[2].1]),
            s.terrain_amplitude_m,
            s.plot_count,
            s.plot_area_m2
        );
        out += &format!(
            "[prep]\nchm_median_window_px = {}\nchm_background_threshold_m = {:?}\nborder_neighborhood = {nb}\nrelabel_min_area_m2 = {:?}\n\n",
            self.prep.chm_median_window_px, self.prep.chm_background_threshold_m, self.prep.relabel_min_area_m2
        );
        out += &format!("[net]\ndepth = {}\nbase_filters = {}\nnorm_epsilon = {:?}\n\n", self.net.depth, self.net.base_filters, self.net.norm_epsilon);
        let t = &self.train;
        out += &format!(
            "[train]\nseed = {}\ntile_px = {}\nbatch_size = {}\nepochs = {}\ntiles_per_epoch = {}\nlearning_rate = {:?}\nvalidation_regions = {regions}\n",
            t.seed, t.tile_px, t.batch_size, t.epochs, t.tiles_per_epoch, t.learning_rate
        );
        if let Some(e) = self.round2_epochs {
            out += &format!("round2_epochs = {e}\n");
        }
        out += &format!("round2_warm_start = {}\n\n", self.round2_warm_start);
        out += &format!("[focal]\ngamma = {:?}\ncutoff_p = {:?}\nclass_weights = {weights}\n\n", self.focal.gamma, self.focal.cutoff_p);
        let c = &self.cowmix;
        out += &format!(
            "[cowmix]\nsigma_range_px = {}\nkeep_fraction_range = {}\napply_probability = {:?}\n\n",
            join(&[c.sigma_range_px.0, c.sigma_range_px.1]),
            join(&[c.keep_fraction_range.0, c.keep_fraction_range.1]),
            c.apply_probability
        );
        out += &format!("[infer]\ntile_px = {}\ncrop_px = {}\nblur_sigma_px = {:?}\n\n", self.infer.tile_px, self.infer.crop_px, self.infer.blur_sigma_px);
        out += &format!("[pipeline]\nrelabel = {}\n", self.relabel);
        out
    }
}
