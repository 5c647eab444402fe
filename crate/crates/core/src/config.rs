//! Run configuration: plain-text `key = value` files, command-line
//! overrides, and a canonical content hash for provenance checks.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::alias::NormMode;
use crate::person::padding_for;

/// Hyperparameters for the whole pipeline. One struct serves every stage;
/// each stage reads the subset it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Working (full) resolution; segmentation and warping run at half.
    pub h: usize,
    pub w: usize,
    /// Synthetic dataset size (train + held-out combined).
    pub samples: usize,
    pub batch: usize,
    pub seed: u64,
    pub seg_iters: usize,
    pub gmm_iters: usize,
    pub alias_iters: usize,
    /// Cross-entropy weight in the segmentation generator loss.
    pub lambda_ce: f64,
    /// Grid-regularity weight in the warp loss.
    pub lambda_const: f64,
    /// Feature-matching weight in the synthesis generator loss.
    pub lambda_fm: f64,
    /// Perceptual weight in the synthesis generator loss.
    pub lambda_percept: f64,
    pub lr_seg: f64,
    pub lr_gmm: f64,
    pub lr_alias_g: f64,
    pub lr_alias_d: f64,
    pub seg_beta1: f64,
    pub seg_beta2: f64,
    pub gmm_beta1: f64,
    pub gmm_beta2: f64,
    pub alias_beta1: f64,
    pub alias_beta2: f64,
    pub norm_mode: NormMode,
    /// Dilation radius when erasing the garment region.
    pub padding_px: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            h: 64,
            w: 48,
            samples: 200,
            batch: 4,
            seed: 7,
            seg_iters: 2000,
            gmm_iters: 2000,
            alias_iters: 3000,
            lambda_ce: 10.0,
            lambda_const: 0.04,
            lambda_fm: 10.0,
            lambda_percept: 10.0,
            lr_seg: 4e-4,
            lr_gmm: 2e-4,
            lr_alias_g: 1e-4,
            lr_alias_d: 4e-4,
            seg_beta1: 0.5,
            seg_beta2: 0.999,
            gmm_beta1: 0.5,
            gmm_beta2: 0.999,
            alias_beta1: 0.0,
            alias_beta2: 0.9,
            norm_mode: NormMode::RegionWise,
            padding_px: padding_for(64),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

impl TrainConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "h" => self.h = parse_num(key, v)?,
            "w" => self.w = parse_num(key, v)?,
            "samples" => self.samples = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "seg_iters" => self.seg_iters = parse_num(key, v)?,
            "gmm_iters" => self.gmm_iters = parse_num(key, v)?,
            "alias_iters" => self.alias_iters = parse_num(key, v)?,
            "lambda_ce" => self.lambda_ce = parse_num(key, v)?,
            "lambda_const" => self.lambda_const = parse_num(key, v)?,
            "lambda_fm" => self.lambda_fm = parse_num(key, v)?,
            "lambda_percept" => self.lambda_percept = parse_num(key, v)?,
            "lr_seg" => self.lr_seg = parse_num(key, v)?,
            "lr_gmm" => self.lr_gmm = parse_num(key, v)?,
            "lr_alias_g" => self.lr_alias_g = parse_num(key, v)?,
            "lr_alias_d" => self.lr_alias_d = parse_num(key, v)?,
            "seg_beta1" => self.seg_beta1 = parse_num(key, v)?,
            "seg_beta2" => self.seg_beta2 = parse_num(key, v)?,
            "gmm_beta1" => self.gmm_beta1 = parse_num(key, v)?,
            "gmm_beta2" => self.gmm_beta2 = parse_num(key, v)?,
            "alias_beta1" => self.alias_beta1 = parse_num(key, v)?,
            "alias_beta2" => self.alias_beta2 = parse_num(key, v)?,
            "padding_px" => self.padding_px = parse_num(key, v)?,
            "norm_mode" => {
                self.norm_mode = match v {
                    "region-wise" => NormMode::RegionWise,
                    "channel-wise" => NormMode::ChannelWise,
                    other => {
                        return Err(Error::Config(format!(
                            "norm_mode must be region-wise or channel-wise, got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment, blanks are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", ln + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `key=value` override strings, e.g. from repeated CLI flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (key, value) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {p:?} is not key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Canonical serialization: fixed key order, one `key = value` per line.
    /// Parsing it back reproduces the config exactly.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mode = match self.norm_mode {
            NormMode::RegionWise => "region-wise",
            NormMode::ChannelWise => "channel-wise",
        };
        let _ = writeln!(s, "h = {}", self.h);
        let _ = writeln!(s, "w = {}", self.w);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "seg_iters = {}", self.seg_iters);
        let _ = writeln!(s, "gmm_iters = {}", self.gmm_iters);
        let _ = writeln!(s, "alias_iters = {}", self.alias_iters);
        let _ = writeln!(s, "lambda_ce = {}", self.lambda_ce);
        let _ = writeln!(s, "lambda_const = {}", self.lambda_const);
        let _ = writeln!(s, "lambda_fm = {}", self.lambda_fm);
        let _ = writeln!(s, "lambda_percept = {}", self.lambda_percept);
        let _ = writeln!(s, "lr_seg = {}", self.lr_seg);
        let _ = writeln!(s, "lr_gmm = {}", self.lr_gmm);
        let _ = writeln!(s, "lr_alias_g = {}", self.lr_alias_g);
        let _ = writeln!(s, "lr_alias_d = {}", self.lr_alias_d);
        let _ = writeln!(s, "seg_beta1 = {}", self.seg_beta1);
        let _ = writeln!(s, "seg_beta2 = {}", self.seg_beta2);
        let _ = writeln!(s, "gmm_beta1 = {}", self.gmm_beta1);
        let _ = writeln!(s, "gmm_beta2 = {}", self.gmm_beta2);
        let _ = writeln!(s, "alias_beta1 = {}", self.alias_beta1);
        let _ = writeln!(s, "alias_beta2 = {}", self.alias_beta2);
        let _ = writeln!(s, "norm_mode = {mode}");
        let _ = writeln!(s, "padding_px = {}", self.padding_px);
        s
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    /// Reject configurations the pipeline cannot run.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.h < 32 || self.w < 32 {
            return err(format!("resolution {}x{} below the 32x32 minimum", self.h, self.w));
        }
        if self.h % 16 != 0 || self.w % 16 != 0 {
            return err(format!(
                "resolution {}x{} must be divisible by 16 for the coarse-to-fine ladder",
                self.h, self.w
            ));
        }
        if self.samples == 0 || self.batch == 0 {
            return err("samples and batch must be positive".into());
        }
        if self.seg_iters == 0 || self.gmm_iters == 0 || self.alias_iters == 0 {
            return err("iteration counts must be positive".into());
        }
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_const", self.lambda_const),
            ("lambda_fm", self.lambda_fm),
            ("lambda_percept", self.lambda_percept),
        ] {
            if !v.is_finite() || v < 0.0 {
                return err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_seg", self.lr_seg),
            ("lr_gmm", self.lr_gmm),
            ("lr_alias_g", self.lr_alias_g),
            ("lr_alias_d", self.lr_alias_d),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return err(format!("{name} must be finite and positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Half resolution used by the segmentation and warp stages.
    pub fn half_res(&self) -> (usize, usize) {
        (self.h / 2, self.w / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_loss_weights() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda_ce, 10.0);
        assert_eq!(c.lambda_const, 0.04);
        assert_eq!(c.lambda_fm, 10.0);
        assert_eq!(c.lambda_percept, 10.0);
        assert_eq!((c.h, c.w), (64, 48));
        assert_eq!(c.padding_px, 3);
        assert_eq!(c.norm_mode, NormMode::RegionWise);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parse_accepts_comments_and_blank_lines() {
        let text = "# run setup\n\nbatch = 2   # smaller\nnorm_mode = channel-wise\nseed=123\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.batch, 2);
        assert_eq!(c.seed, 123);
        assert_eq!(c.norm_mode, NormMode::ChannelWise);
        assert_eq!(c.h, 64, "unset keys keep defaults");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::parse("bogus = 1\n").is_err());
        assert!(TrainConfig::parse("batch = many\n").is_err());
        assert!(TrainConfig::parse("norm_mode = diagonal\n").is_err());
        assert!(TrainConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn canonical_form_round_trips_and_hashes_stably() {
        let mut c = TrainConfig::default();
        c.set("lr_alias_g", "0.0002").unwrap();
        c.set("samples", "50").unwrap();
        let back = TrainConfig::parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), TrainConfig::default().hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = TrainConfig::default();
        c.apply_overrides(&["batch=1", "batch=3", "h=32", "w=32"]).unwrap();
        assert_eq!(c.batch, 3);
        assert_eq!((c.h, c.w), (32, 32));
        assert!(c.apply_overrides(&["nonsense"]).is_err());
    }

    #[test]
    fn validation_rejects_impossible_runs() {
        let mut c = TrainConfig::default();
        c.batch = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.h = 60; // not divisible by 16
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr_seg = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda_ce = f64::NAN;
        assert!(c.validate().is_err());
    }
}
