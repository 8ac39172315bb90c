//! Experiment configuration: a flat `key = value` file with `#` comments,
//! plus `key=value` overrides from the command line.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mlb_seg_core::data::{Corruption, GenConfig, ShapeFamily, Split};
use mlb_seg_core::ple::parse_specs;
use mlb_seg_core::HyperConfig;

use crate::error::{io_err, BootError, Result};

/// Synthetic dataset shape and location.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub clean: usize,
    pub meta: usize,
    pub unlabeled: usize,
    pub eval: usize,
    pub family: ShapeFamily,
    pub noise: f64,
}

impl DataConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Clean => self.clean,
            Split::Meta => self.meta,
            Split::Unlabeled | Split::Initialized => self.unlabeled,
            Split::Eval => self.eval,
        }
    }

    pub fn gen_config(&self, split: Split) -> GenConfig {
        GenConfig {
            height: self.height,
            width: self.width,
            count: self.count(split),
            family: self.family,
            noise: self.noise,
        }
    }
}

/// Which training procedure follows the supervised baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Supervised training on the labeled data only.
    Baseline,
    /// Bootstrapping with constant uniform pixel weights.
    Fixed,
    /// Bootstrapping with meta-learned pixel weights.
    Meta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hyper: HyperConfig,
    pub data: DataConfig,
    pub corruption: Corruption,
    pub mlb: bool,
    /// Fixed-weight bootstrapping when `mlb` is off.
    pub bootstrap: bool,
    pub mean_teacher: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hyper: HyperConfig {
                alpha: 0.001,
                baseline_lr: 0.02,
                batch_baseline: 1,
                epochs_baseline: 10,
                epochs_mlb: 30,
                ..HyperConfig::default()
            },
            data: DataConfig {
                dir: PathBuf::from("data"),
                seed: 0,
                height: 32,
                width: 32,
                clean: 8,
                meta: 4,
                unlabeled: 64,
                eval: 32,
                family: ShapeFamily::Mixed,
                noise: 0.1,
            },
            corruption: Corruption {
                dilate_r: 0.0,
                erode_r: 0.0,
                flip_rate: 0.5,
            },
            mlb: true,
            bootstrap: false,
            mean_teacher: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "mlb",
    "bootstrap",
    "mean_teacher",
    "ple_specs",
    "alpha",
    "baseline_lr",
    "beta",
    "eps",
    "momentum",
    "weight_decay",
    "batch_clean",
    "batch_noisy",
    "batch_baseline",
    "lambda_aug",
    "lambda_st",
    "gamma",
    "mu",
    "sigma",
    "ema_decay",
    "epochs_baseline",
    "epochs_mlb",
    "net_width",
    "data_dir",
    "data_seed",
    "image_height",
    "image_width",
    "n_clean",
    "n_meta",
    "n_unlabeled",
    "n_eval",
    "shape_family",
    "noise",
    "dilate_r",
    "erode_r",
    "flip_rate",
    "out_dir",
];

/// Keys that may change between an interrupted run and its resumption.
pub const RESUMABLE_KEYS: &[&str] = &["epochs_mlb", "out_dir", "data_dir"];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("invalid value `{value}`: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected `true` or `false`, got `{value}`")),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let h = &mut self.hyper;
        let d = &mut self.data;
        match key {
            "seed" => h.seed = parse(value)?,
            "mlb" => self.mlb = parse_bool(value)?,
            "bootstrap" => self.bootstrap = parse_bool(value)?,
            "mean_teacher" => self.mean_teacher = parse_bool(value)?,
            "ple_specs" => h.ple = parse_specs(value).map_err(|e| e.to_string())?,
            "alpha" => h.alpha = parse(value)?,
            "baseline_lr" => h.baseline_lr = parse(value)?,
            "beta" => h.beta = parse(value)?,
            "eps" => h.eps = parse(value)?,
            "momentum" => h.momentum = parse(value)?,
            "weight_decay" => h.weight_decay = parse(value)?,
            "batch_clean" => h.batch_clean = parse(value)?,
            "batch_noisy" => h.batch_noisy = parse(value)?,
            "batch_baseline" => h.batch_baseline = parse(value)?,
            "lambda_aug" => h.lambda_aug = parse(value)?,
            "lambda_st" => h.lambda_st = parse(value)?,
            "gamma" => h.gamma = parse(value)?,
            "mu" => h.mu = parse(value)?,
            "sigma" => h.sigma = parse(value)?,
            "ema_decay" => h.ema_decay = parse(value)?,
            "epochs_baseline" => h.epochs_baseline = parse(value)?,
            "epochs_mlb" => h.epochs_mlb = parse(value)?,
            "net_width" => h.width = parse(value)?,
            "data_dir" => d.dir = PathBuf::from(value),
            "data_seed" => d.seed = parse(value)?,
            "image_height" => d.height = parse(value)?,
            "image_width" => d.width = parse(value)?,
            "n_clean" => d.clean = parse(value)?,
            "n_meta" => d.meta = parse(value)?,
            "n_unlabeled" => d.unlabeled = parse(value)?,
            "n_eval" => d.eval = parse(value)?,
            "shape_family" => d.family = parse(value)?,
            "noise" => d.noise = parse(value)?,
            "dilate_r" => self.corruption.dilate_r = parse(value)?,
            "erode_r" => self.corruption.erode_r = parse(value)?,
            "flip_rate" => self.corruption.flip_rate = parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let h = &self.hyper;
        let d = &self.data;
        let c = &self.corruption;
        Some(match key {
            "seed" => h.seed.to_string(),
            "mlb" => self.mlb.to_string(),
            "bootstrap" => self.bootstrap.to_string(),
            "mean_teacher" => self.mean_teacher.to_string(),
            "ple_specs" => h.ple.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","),
            "alpha" => h.alpha.to_string(),
            "baseline_lr" => h.baseline_lr.to_string(),
            "beta" => h.beta.to_string(),
            "eps" => h.eps.to_string(),
            "momentum" => h.momentum.to_string(),
            "weight_decay" => h.weight_decay.to_string(),
            "batch_clean" => h.batch_clean.to_string(),
            "batch_noisy" => h.batch_noisy.to_string(),
            "batch_baseline" => h.batch_baseline.to_string(),
            "lambda_aug" => h.lambda_aug.to_string(),
            "lambda_st" => h.lambda_st.to_string(),
            "gamma" => h.gamma.to_string(),
            "mu" => h.mu.to_string(),
            "sigma" => h.sigma.to_string(),
            "ema_decay" => h.ema_decay.to_string(),
            "epochs_baseline" => h.epochs_baseline.to_string(),
            "epochs_mlb" => h.epochs_mlb.to_string(),
            "net_width" => h.width.to_string(),
            "data_dir" => d.dir.display().to_string(),
            "data_seed" => d.seed.to_string(),
            "image_height" => d.height.to_string(),
            "image_width" => d.width.to_string(),
            "n_clean" => d.clean.to_string(),
            "n_meta" => d.meta.to_string(),
            "n_unlabeled" => d.unlabeled.to_string(),
            "n_eval" => d.eval.to_string(),
            "shape_family" => d.family.to_string(),
            "noise" => d.noise.to_string(),
            "dilate_r" => c.dilate_r.to_string(),
            "erode_r" => c.erode_r.to_string(),
            "flip_rate" => c.flip_rate.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// The configuration as a file that parses back to the same values.
    pub fn render(&self) -> String {
        self.render_keys(KEYS.iter().copied())
    }

    /// Rendering of the keys that must match when resuming.
    pub fn resume_fingerprint(&self) -> String {
        self.render_keys(KEYS.iter().copied().filter(|k| !RESUMABLE_KEYS.contains(k)))
    }

    fn render_keys<'a>(&self, keys: impl Iterator<Item = &'a str>) -> String {
        keys.map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Parse config text on top of the defaults. `origin` names the source
    /// in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| BootError::Config {
                origin: origin.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(err(format!("key `{k}` set twice")));
            }
            cfg.set(k, v).map_err(err)?;
            seen.push(k.to_string());
        }
        Ok(cfg)
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for (i, o) in overrides.iter().enumerate() {
            let o = o.as_ref();
            let err = |msg: String| BootError::Config {
                origin: "--set".to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key=value`, got `{o}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Read a config file, resolve its relative paths against the file's
    /// directory, then apply overrides (whose paths stay relative to the
    /// working directory), and validate.
    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.dir = base.join(&cfg.data.dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mode(&self) -> Mode {
        if self.mlb {
            Mode::Meta
        } else if self.bootstrap {
            Mode::Fixed
        } else {
            Mode::Baseline
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let invalid = |msg: String| Err(BootError::Invalid(msg));
        if !self.hyper.ple.is_empty() && !self.mlb {
            return invalid("ple_specs requires mlb = true".into());
        }
        if self.mean_teacher && self.mode() == Mode::Baseline {
            return invalid("mean_teacher requires mlb = true or bootstrap = true".into());
        }
        let d = &self.data;
        if d.height == 0 || d.width == 0 || !d.height.is_multiple_of(2) || !d.width.is_multiple_of(2) {
            return invalid(format!("image size {}x{} must be even and nonzero", d.height, d.width));
        }
        for split in [Split::Clean, Split::Meta, Split::Unlabeled, Split::Eval] {
            if d.count(split) == 0 {
                return invalid(format!("split `{split}` must have at least one sample"));
            }
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return invalid(format!("noise must be non-negative, got {}", d.noise));
        }
        let c = &self.corruption;
        if !((0.0..=1.0).contains(&c.flip_rate) && c.dilate_r >= 0.0 && c.erode_r >= 0.0) {
            return invalid(format!("invalid corruption {c:?}"));
        }
        for a in &self.hyper.ple {
            a.aug_hw((d.height, d.width))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlb_seg_core::ple::Augmentation;

    #[test]
    fn defaults_are_the_desk_scale() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!((c.data.height, c.data.width), (32, 32));
        assert_eq!(
            (c.data.clean, c.data.meta, c.data.unlabeled, c.data.eval),
            (8, 4, 64, 32)
        );
        assert_eq!((c.hyper.epochs_baseline, c.hyper.epochs_mlb), (10, 30));
        assert_eq!(c.mode(), Mode::Meta);
    }

    #[test]
    fn render_parses_back() {
        let mut c = ExperimentConfig::default();
        c.hyper.ple = vec![Augmentation::ZoomIn(2), Augmentation::FlipH];
        c.hyper.eps = 1e-12;
        c.hyper.alpha = 0.1 + 0.2;
        c.mean_teacher = true;
        let back = ExperimentConfig::parse(&c.render(), "rendered").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_blank_lines_and_spacing() {
        let c = ExperimentConfig::parse("# a comment\n\n  alpha=0.5 # trailing\nmlb = false\n", "t").unwrap();
        assert_eq!(c.hyper.alpha, 0.5);
        assert!(!c.mlb);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("alpha = 1\nfoo = 2\n", 2, "unknown key"),
            ("\n\nalpha = x\n", 3, "invalid value"),
            ("mlb = yes\n", 1, "expected `true`"),
            ("alpha\n", 1, "expected `key = value`"),
            ("seed = 1\nseed = 2\n", 2, "set twice"),
            ("ple_specs = zoom-in:0\n", 1, "augmentation"),
        ];
        for (text, line, needle) in cases {
            match ExperimentConfig::parse(text, "cfg.txt") {
                Err(e @ BootError::Config { line: l, .. }) => {
                    assert_eq!(l, line, "{text:?}");
                    let msg = e.to_string();
                    assert!(msg.starts_with(&format!("cfg.txt:{line}: ")), "{msg}");
                    assert!(msg.contains(needle), "{msg}");
                }
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_apply_in_order_and_reject_unknown_keys() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["seed=3", "seed = 4", "mlb=false"]).unwrap();
        assert_eq!(c.hyper.seed, 4);
        assert!(!c.mlb);
        let e = c.apply_overrides(&["seed=5", "nope=1"]).unwrap_err();
        assert!(
            matches!(e, BootError::Config { line: 2, ref origin, .. } if origin == "--set"),
            "{e}"
        );
        assert!(c.apply_overrides(&["seed"]).is_err());
    }

    #[test]
    fn toggles_must_form_a_valid_row() {
        let mut c = ExperimentConfig {
            mlb: false,
            ..Default::default()
        };
        assert_eq!(c.mode(), Mode::Baseline);
        c.hyper.ple = vec![Augmentation::FlipH];
        assert!(c.validate().is_err());
        c.hyper.ple.clear();
        c.mean_teacher = true;
        assert!(c.validate().is_err());
        c.bootstrap = true;
        assert_eq!(c.mode(), Mode::Fixed);
        c.validate().unwrap();
    }

    #[test]
    fn ple_specs_must_fit_the_image() {
        let mut c = ExperimentConfig::default();
        c.hyper.ple = vec![Augmentation::ZoomIn(16)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_key_round_trips_through_get_and_set() {
        let c = ExperimentConfig::default();
        for k in KEYS {
            let v = c.get(k).unwrap();
            let mut d = c.clone();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
        assert!(c.get("nope").is_none());
    }
}
