//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to the desk-scale default. Unknown keys are
//! errors so that typos do not silently run the default.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Alignment, CohortSpec, Modality};
use crate::ddmloss::Transform;
use crate::discrepancy::DiscrepancyParams;
use crate::error::{Error, Result};
use crate::nn::PaddingMode;

/// Labeled source modality and unlabeled target modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AToB,
    BToA,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A->B" | "AtoB" | "AB" | "a2b" => Ok(Direction::AToB),
            "B->A" | "BtoA" | "BA" | "b2a" => Ok(Direction::BToA),
            other => Err(Error::Config(format!("unknown direction '{other}' (use A->B or B->A)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::AToB => "A->B",
            Direction::BToA => "B->A",
        }
    }

    /// Filename-safe form, `A2B` or `B2A`.
    pub fn slug(self) -> &'static str {
        match self {
            Direction::AToB => "A2B",
            Direction::BToA => "B2A",
        }
    }

    pub fn source(self) -> Modality {
        match self {
            Direction::AToB => Modality::A,
            Direction::BToA => Modality::B,
        }
    }

    pub fn target(self) -> Modality {
        self.source().other()
    }
}

/// Which held-out subjects each run evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Run `r` holds out subject `r`: one fold per run.
    PerRun,
    /// Every run cycles through all leave-one-out folds.
    LeaveOneOut,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_run" => Ok(Protocol::PerRun),
            "loo" | "leave_one_out" => Ok(Protocol::LeaveOneOut),
            other => Err(Error::Config(format!("unknown protocol '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::PerRun => "per_run",
            Protocol::LeaveOneOut => "loo",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub method: String,
    pub direction: Direction,
    pub kernel: String,
    pub kernel_params: DiscrepancyParams,
    pub lambda: f64,
    pub lambda_adv: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_disc: f64,
    pub runs: usize,
    pub protocol: Protocol,
    pub alignment: Alignment,
    pub transform: Transform,
    pub seed: u64,
    pub base_filters: usize,
    pub depth: usize,
    pub padding_mode: PaddingMode,
    pub disc_width: usize,
    pub cohort: CohortSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: "ddm".into(),
            direction: Direction::AToB,
            kernel: "sqeuclid".into(),
            kernel_params: DiscrepancyParams::default(),
            lambda: 0.1,
            lambda_adv: 0.1,
            epochs: 60,
            eval_every: 5,
            batch_size: 8,
            lr: 1e-4,
            lr_disc: 1e-4,
            runs: 3,
            protocol: Protocol::PerRun,
            alignment: Alignment::Aligned,
            transform: Transform::Identity,
            seed: 7,
            base_filters: 16,
            depth: 3,
            padding_mode: PaddingMode::Same,
            disc_width: 64,
            cohort: CohortSpec::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (dy, dx) = match self.transform {
            Transform::Affine { translation, .. } => (translation[0], translation[1]),
            Transform::Identity => (0.0, 0.0),
        };
        match key {
            "method" => self.method = value.to_string(),
            "direction" => self.direction = Direction::parse(value)?,
            "kernel" => self.kernel = value.to_string(),
            "sigma" => self.kernel_params.sigma = num(key, value)?,
            "rho" => self.kernel_params.rho = num(key, value)?,
            "epsilon" => self.kernel_params.epsilon = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lambda_adv" => self.lambda_adv = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_disc" => self.lr_disc = num(key, value)?,
            "runs" => self.runs = num(key, value)?,
            "protocol" => self.protocol = Protocol::parse(value)?,
            "alignment" => self.alignment = Alignment::parse(value)?,
            "transform_dy" => self.transform = translation(num(key, value)?, dx),
            "transform_dx" => self.transform = translation(dy, num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "base_filters" => self.base_filters = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "padding_mode" => self.padding_mode = PaddingMode::parse(value)?,
            "disc_width" => self.disc_width = num(key, value)?,
            "subjects" => self.cohort.subjects = num(key, value)?,
            "slices" => self.cohort.dims[0] = num(key, value)?,
            "size" => {
                let s = num(key, value)?;
                self.cohort.dims[1] = s;
                self.cohort.dims[2] = s;
            }
            "noise_std" => self.cohort.noise_std = num(key, value)?,
            "deformation" => self.cohort.deformation = num(key, value)?,
            "max_harmonic" => self.cohort.max_harmonic = num(key, value)?,
            "center_jitter" => self.cohort.center_jitter = num(key, value)?,
            "misalignment" => self.cohort.misalignment = num(key, value)?,
            "cohort_seed" => self.cohort.seed = num(key, value)?,
            "table_a" => self.cohort.table_a = table(key, value)?,
            "table_b" => self.cohort.table_b = table(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.eval_every == 0 || self.epochs % self.eval_every != 0 {
            return fail(format!(
                "eval_every ({}) must be positive and divide epochs ({})",
                self.eval_every, self.epochs
            ));
        }
        if self.batch_size == 0 || self.base_filters == 0 || self.depth == 0 || self.disc_width == 0 {
            return fail("batch_size, base_filters, depth and disc_width must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_disc > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.lambda_adv >= 0.0) {
            return fail("lambda and lambda_adv must be non-negative".into());
        }
        if self.cohort.subjects < 2 {
            return fail("leave-one-out needs at least two subjects".into());
        }
        self.kernel_params.validate()?;
        self.cohort.validate()
    }

    /// Serialises every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.cohort;
        let (dy, dx) = match self.transform {
            Transform::Affine { translation, .. } => (translation[0], translation[1]),
            Transform::Identity => (0.0, 0.0),
        };
        let t = |v: &[f64; 4]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("method", self.method.clone()),
            ("direction", self.direction.name().into()),
            ("kernel", self.kernel.clone()),
            ("sigma", self.kernel_params.sigma.to_string()),
            ("rho", self.kernel_params.rho.to_string()),
            ("epsilon", self.kernel_params.epsilon.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_disc", self.lr_disc.to_string()),
            ("runs", self.runs.to_string()),
            ("protocol", self.protocol.name().into()),
            ("alignment", self.alignment.name().into()),
            ("transform_dy", dy.to_string()),
            ("transform_dx", dx.to_string()),
            ("seed", self.seed.to_string()),
            ("base_filters", self.base_filters.to_string()),
            ("depth", self.depth.to_string()),
            ("padding_mode", self.padding_mode.name().into()),
            ("disc_width", self.disc_width.to_string()),
            ("subjects", c.subjects.to_string()),
            ("slices", c.dims[0].to_string()),
            ("size", c.dims[1].to_string()),
            ("noise_std", c.noise_std.to_string()),
            ("deformation", c.deformation.to_string()),
            ("max_harmonic", c.max_harmonic.to_string()),
            ("center_jitter", c.center_jitter.to_string()),
            ("misalignment", c.misalignment.to_string()),
            ("cohort_seed", c.seed.to_string()),
            ("table_a", t(&c.table_a)),
            ("table_b", t(&c.table_b)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn translation(dy: f64, dx: f64) -> Transform {
    if dy == 0.0 && dx == 0.0 {
        Transform::Identity
    } else {
        Transform::translation(dy, dx)
    }
}

fn table(key: &str, value: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("'{key}' needs four comma-separated values (bg, GM, WM, CSF)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("method", "adversarial").unwrap();
        cfg.set("transform_dx", "1.5").unwrap();
        cfg.set("size", "32").unwrap();
        cfg.set("table_b", "0.05, 0.8, 0.3, 0.55").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_defaults_and_errors() {
        let cfg = ExperimentConfig::parse("# desk run\n\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.epochs, 60);
        assert!(ExperimentConfig::parse("lamda = 0.5").is_err());
        assert!(ExperimentConfig::parse("epochs = 7").is_err());
        assert!(ExperimentConfig::parse("runs = 0").is_err());
        assert!(ExperimentConfig::parse("lambda 0.5").is_err());
        assert!(ExperimentConfig::parse("epochs = x").is_err());
        assert!(ExperimentConfig::parse("epochs = 0").is_ok());
    }
}
