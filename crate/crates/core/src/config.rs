//! Flat run configuration shared by every command.
//!
//! Keys are read from a TOML file (unknown keys rejected) and can be
//! overridden one at a time with `key=value` strings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Sampling;
use crate::tasks::{BinStrategy, TASK_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub grid_size: usize,
    pub tiles: usize,
    pub tile_size: usize,
    pub bands: usize,
    pub sampling: String,
    /// Number of label sites for around-labels sampling; 0 picks one site per
    /// AWI-labelled example.
    pub label_sites: usize,
    pub label_radius: f64,
    pub labeled_fraction: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub min_separation: f64,
    pub bin_strategy: String,
    pub bins_nightlights: usize,
    pub bins_population: usize,
    pub bins_road_distance: usize,
    pub bins_land_cover: usize,
    pub bins_awi: usize,
    pub importance_nightlights: f64,
    pub importance_population: f64,
    pub importance_road_distance: f64,
    pub importance_land_cover: f64,
    pub importance_awi: f64,
    pub coverage_nightlights: f64,
    pub coverage_population: f64,
    pub coverage_road_distance: f64,
    pub coverage_land_cover: f64,

    pub noise_dim: usize,
    pub gen_channels: usize,
    pub disc_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// `none`, `same-init` or `random-init`.
    pub init: String,
    pub filters: String,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub critic_steps: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// When false, only the labelled term of each task loss is used and the
    /// generator is never updated.
    pub semi_supervised: bool,
    /// Discriminator steps per epoch; 0 means one pass over the training split.
    pub steps_per_epoch: usize,

    pub outer_folds: usize,
    pub inner_folds: usize,
    pub penalty_min: f64,
    pub penalty_max: f64,
    pub penalty_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            grid_size: 128,
            tiles: 10_000,
            tile_size: 64,
            bands: 9,
            sampling: "uniform".into(),
            label_sites: 0,
            label_radius: 3.0,
            labeled_fraction: 0.05,
            split_train: 0.7,
            split_val: 0.2,
            split_test: 0.1,
            min_separation: 0.0,
            bin_strategy: "equal-frequency".into(),
            bins_nightlights: 10,
            bins_population: 10,
            bins_road_distance: 8,
            bins_land_cover: 5,
            bins_awi: 30,
            importance_nightlights: 1.0,
            importance_population: 1.0,
            importance_road_distance: 1.0,
            importance_land_cover: 1.0,
            importance_awi: 1.0,
            coverage_nightlights: 1.0,
            coverage_population: 1.0,
            coverage_road_distance: 1.0,
            coverage_land_cover: 1.0,
            noise_dim: 128,
            gen_channels: 256,
            disc_widths: vec![32, 32, 64, 64, 128, 128, 256, 256],
            leaky_slope: 0.2,
            init: "none".into(),
            filters: String::new(),
            epochs: 30,
            batch_size: 115,
            lr0: 0.01,
            lr_decay_per_epoch: 0.98,
            lr_drop_epoch: 25,
            lr_drop_factor: 5.0,
            weight_decay: 0.00004,
            critic_steps: 5,
            alpha: 1.0,
            lambda: 10.0,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            semi_supervised: true,
            steps_per_epoch: 0,
            outer_folds: 5,
            inner_folds: 4,
            penalty_min: 1e-4,
            penalty_max: 1e4,
            penalty_count: 9,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `key=value` override; the value is parsed with TOML syntax,
    /// falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("roundtrip");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let next: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Hex SHA-256 of the TOML snapshot.
    pub fn snapshot_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Every key with its default, in declaration order.
    pub fn documented_keys() -> Vec<(String, String)> {
        let text = RunConfig::default().to_toml();
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.sampling()?;
        self.bin_strategy()?;
        if !matches!(self.bands, 3 | 9) {
            return bad(format!("bands must be 3 or 9, got {}", self.bands));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!(
                "labeled_fraction {} outside (0, 1]",
                self.labeled_fraction
            ));
        }
        for (name, v) in self.coverage() {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("coverage for {name} ({v}) outside (0, 1]"));
            }
        }
        if self.batch_size < 3 || self.critic_steps == 0 {
            return bad("batch_size must be >= 3 and critic_steps >= 1".into());
        }
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch),
            ("lr_drop_factor", self.lr_drop_factor),
            ("penalty_min", self.penalty_min),
            ("penalty_max", self.penalty_max),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive"));
            }
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative"));
            }
        }
        if !matches!(self.init.as_str(), "none" | "same-init" | "random-init") {
            return bad(format!("unknown init scheme `{}`", self.init));
        }
        if self.disc_widths.is_empty() || self.penalty_count == 0 {
            return bad("disc_widths and penalty grid must be non-empty".into());
        }
        if self.outer_folds < 2 || self.inner_folds < 2 {
            return bad("fold counts must be >= 2".into());
        }
        Ok(())
    }

    pub fn sampling(&self) -> Result<Sampling> {
        self.sampling
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn bin_strategy(&self) -> Result<BinStrategy> {
        self.bin_strategy
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.split_train, self.split_val, self.split_test]
    }

    pub fn bins(&self) -> [usize; 5] {
        [
            self.bins_nightlights,
            self.bins_population,
            self.bins_road_distance,
            self.bins_land_cover,
            self.bins_awi,
        ]
    }

    pub fn importance(&self) -> [f64; 5] {
        [
            self.importance_nightlights,
            self.importance_population,
            self.importance_road_distance,
            self.importance_land_cover,
            self.importance_awi,
        ]
    }

    /// Label coverage per task; AWI uses `labeled_fraction`.
    pub fn coverage(&self) -> BTreeMap<&'static str, f64> {
        TASK_NAMES
            .iter()
            .copied()
            .zip([
                self.coverage_nightlights,
                self.coverage_population,
                self.coverage_road_distance,
                self.coverage_land_cover,
                self.labeled_fraction,
            ])
            .collect()
    }

    pub fn penalty_grid(&self) -> Vec<f64> {
        log_grid(self.penalty_min, self.penalty_max, self.penalty_count)
    }
}

pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_toml_roundtrip() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
        assert_eq!(d.batch_size, 115);
        assert_eq!(d.lr0, 0.01);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("no_such_key = 1"),
            Err(Error::Config(_))
        ));
        let mut c = RunConfig::default();
        assert!(c.set("bogus=3").is_err());
    }

    #[test]
    fn overrides_are_typed() {
        let mut c = RunConfig::default();
        c.set("epochs=3").unwrap();
        c.set("sampling=around-labels").unwrap();
        c.set("disc_widths=[8, 16]").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.sampling, "around-labels");
        assert_eq!(c.disc_widths, vec![8, 16]);
        assert!(c.set("epochs=many").is_err());
        assert!(c.set("bands=4").is_err());
    }

    #[test]
    fn documented_keys_cover_every_field() {
        let keys = RunConfig::documented_keys();
        assert!(keys.iter().any(|(k, v)| k == "batch_size" && v == "115"));
        assert!(keys.iter().any(|(k, _)| k == "disc_widths"));
        let table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).unwrap();
        assert_eq!(keys.len(), table.len());
    }

    #[test]
    fn penalty_grid_is_logarithmic() {
        let g = RunConfig::default().penalty_grid();
        assert_eq!(g.len(), 9);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[4] - 1.0).abs() < 1e-12);
        assert!((g[8] - 1e4).abs() < 1e-8);
    }
}
