//! Flat key=value pipeline configuration with CLI overrides.
//!
//! Resolution order: built-in defaults, then the config file, then command
//! line flags. The resolved config echoes back out as a manifest in the same
//! syntax, so any run can be reproduced from its manifest alone. Constraint
//! checks (notably the lambda ordering) run at parse time.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;
use tsl_core::projector::{InitScheme, Quotas, TrainConfig};
use tsl_core::Shrinkage;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for {key}: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("{0}")]
    Constraint(String),
    #[error("missing required path: {0} (set it in the config file or with --{0})")]
    MissingPath(&'static str),
}

/// Which score set the decision threshold is selected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdFrom {
    /// Test-ID scores (the conventional FPR95 operating point).
    Test,
    /// Scores of the labeled rows, for a test-blind threshold.
    Holdout,
}

impl ThresholdFrom {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdFrom::Test => "test",
            ThresholdFrom::Holdout => "holdout",
        }
    }
}

impl FromStr for ThresholdFrom {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "test" => Ok(ThresholdFrom::Test),
            "holdout" => Ok(ThresholdFrom::Holdout),
            other => Err(format!("expected test or holdout, got {other:?}")),
        }
    }
}

/// Modules that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablate {
    Ppm,
    Npm,
    Tsm,
}

/// Parses `none` or a comma-separated subset of `ppm,npm,tsm`.
pub fn parse_ablate(s: &str) -> Result<Vec<Ablate>, String> {
    let trimmed = s.trim();
    if trimmed.is_empty() || trimmed == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in trimmed.split(',') {
        match part.trim() {
            "ppm" => out.push(Ablate::Ppm),
            "npm" => out.push(Ablate::Npm),
            "tsm" => out.push(Ablate::Tsm),
            other => return Err(format!("unknown ablation {other:?} (ppm | npm | tsm | none)")),
        }
    }
    Ok(out)
}

fn ablate_to_string(train: &TrainConfig) -> String {
    let mut parts = Vec::new();
    if !train.enable_ppm {
        parts.push("ppm");
    }
    if !train.enable_npm {
        parts.push("npm");
    }
    if !train.enable_tsm {
        parts.push("tsm");
    }
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join(",")
    }
}

/// Everything one pipeline run needs: file locations, the metric shrinkage,
/// the training configuration, and evaluation options.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub test_id: PathBuf,
    pub test_ood: PathBuf,
    pub out: PathBuf,
    pub shrinkage: Shrinkage,
    pub train: TrainConfig,
    pub tpr_target: f64,
    pub threshold_from: ThresholdFrom,
    pub dump_scores: bool,
    pub repeats: u32,
}

impl Default for PipelineConfig {
    /// Desk-scale defaults: full-scale hyperparameters except 300 epochs and
    /// seed 1.
    fn default() -> Self {
        PipelineConfig {
            labeled: PathBuf::new(),
            unlabeled: PathBuf::new(),
            test_id: PathBuf::new(),
            test_ood: PathBuf::new(),
            out: PathBuf::from("out"),
            shrinkage: Shrinkage::Auto,
            train: TrainConfig { epochs: 300, seed: 1, ..TrainConfig::default() },
            tpr_target: 0.95,
            threshold_from: ThresholdFrom::Test,
            dump_scores: false,
            repeats: 1,
        }
    }
}

impl PipelineConfig {
    /// Applies one config-file key. Shared by the file parser and the flag
    /// override path (which uses line 0).
    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::BadValue { line, key: key.to_string(), msg };
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(e.to_string()))?
            };
        }
        match key {
            "labeled" => self.labeled = PathBuf::from(value),
            "unlabeled" => self.unlabeled = PathBuf::from(value),
            "test_id" => self.test_id = PathBuf::from(value),
            "test_ood" => self.test_ood = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "shrinkage" => self.shrinkage = parse!(Shrinkage),
            "k" => self.train.k = parse!(u32),
            "beta" => self.train.beta = parse!(u32),
            "lambda1" => self.train.lambda1 = parse!(f64),
            "lambda2" => self.train.lambda2 = parse!(f64),
            "lambda3" => self.train.lambda3 = parse!(f64),
            "margin" => self.train.margin = parse!(f64),
            "lr" => self.train.learning_rate = parse!(f64),
            "epochs" => self.train.epochs = parse!(u32),
            "batch_size" => {
                let batch = parse!(usize);
                if batch == 0 {
                    return Err(bad("batch_size must be positive".into()));
                }
                self.train.quotas = Quotas::from_batch_size(batch);
            }
            "q_a" => self.train.quotas.q_a = parse!(usize),
            "q_c" => self.train.quotas.q_c = parse!(usize),
            "q_l" => self.train.quotas.q_l = parse!(usize),
            "q_f" => self.train.quotas.q_f = parse!(usize),
            "seed" => self.train.seed = parse!(u64),
            "init" => self.train.init = parse!(InitScheme),
            "d_out" => {
                let d = parse!(usize);
                self.train.d_out = if d == 0 { None } else { Some(d) };
            }
            "ablate" => {
                let ablations = parse_ablate(value).map_err(bad)?;
                self.set_ablations(&ablations);
            }
            "tpr_target" => self.tpr_target = parse!(f64),
            "threshold_from" => self.threshold_from = parse!(ThresholdFrom),
            "dump_scores" => self.dump_scores = parse_bool(value).map_err(bad)?,
            "repeats" => self.repeats = parse!(u32),
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    pub fn set_ablations(&mut self, ablations: &[Ablate]) {
        self.train.enable_ppm = !ablations.contains(&Ablate::Ppm);
        self.train.enable_npm = !ablations.contains(&Ablate::Npm);
        self.train.enable_tsm = !ablations.contains(&Ablate::Tsm);
    }

    /// Parses a config file body on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: idx + 1, text: raw.to_string() })?;
            self.apply(key.trim(), value.trim(), idx + 1)?;
        }
        Ok(())
    }

    /// Constraint checks that must hold before any pipeline stage runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Constraint(e.to_string()))?;
        if !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return Err(ConfigError::Constraint(format!(
                "tpr_target must lie in (0, 1], got {}",
                self.tpr_target
            )));
        }
        if self.repeats == 0 {
            return Err(ConfigError::Constraint("repeats must be >= 1".into()));
        }
        Ok(())
    }

    pub fn require_paths(&self) -> Result<(), ConfigError> {
        for (name, path) in [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("test-id", &self.test_id),
            ("test-ood", &self.test_ood),
        ] {
            if path.as_os_str().is_empty() {
                return Err(ConfigError::MissingPath(name));
            }
        }
        Ok(())
    }

    /// The full resolved configuration in config-file syntax.
    pub fn to_manifest(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let _ = writeln!(out, "labeled={}", self.labeled.display());
        let _ = writeln!(out, "unlabeled={}", self.unlabeled.display());
        let _ = writeln!(out, "test_id={}", self.test_id.display());
        let _ = writeln!(out, "test_ood={}", self.test_ood.display());
        let _ = writeln!(out, "out={}", self.out.display());
        match self.shrinkage {
            Shrinkage::Auto => {
                let _ = writeln!(out, "shrinkage=auto");
            }
            Shrinkage::Fixed(v) => {
                let _ = writeln!(out, "shrinkage={v}");
            }
        }
        let _ = writeln!(out, "k={}", t.k);
        let _ = writeln!(out, "beta={}", t.beta);
        let _ = writeln!(out, "lambda1={}", t.lambda1);
        let _ = writeln!(out, "lambda2={}", t.lambda2);
        let _ = writeln!(out, "lambda3={}", t.lambda3);
        let _ = writeln!(out, "margin={}", t.margin);
        let _ = writeln!(out, "lr={}", t.learning_rate);
        let _ = writeln!(out, "epochs={}", t.epochs);
        let _ = writeln!(out, "q_a={}", t.quotas.q_a);
        let _ = writeln!(out, "q_c={}", t.quotas.q_c);
        let _ = writeln!(out, "q_l={}", t.quotas.q_l);
        let _ = writeln!(out, "q_f={}", t.quotas.q_f);
        let _ = writeln!(out, "seed={}", t.seed);
        let init = match t.init {
            InitScheme::Identity => "identity",
            InitScheme::ScaledRandom => "scaled_random",
        };
        let _ = writeln!(out, "init={init}");
        let _ = writeln!(out, "d_out={}", t.d_out.unwrap_or(0));
        let _ = writeln!(out, "ablate={}", ablate_to_string(t));
        let _ = writeln!(out, "tpr_target={}", self.tpr_target);
        let _ = writeln!(out, "threshold_from={}", self.threshold_from.as_str());
        let _ = writeln!(out, "dump_scores={}", self.dump_scores);
        let _ = writeln!(out, "repeats={}", self.repeats);
        out
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(format!("expected true/false, got {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_resolution() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("k = 8\nlambda2 = 0.7 # comment\nout = runs/a\n").unwrap();
        assert_eq!(cfg.train.k, 8);
        assert_eq!(cfg.train.lambda2, 0.7);
        assert_eq!(cfg.out, PathBuf::from("runs/a"));
        cfg.apply("k", "9", 0).unwrap();
        assert_eq!(cfg.train.k, 9);
    }

    #[test]
    fn lambda_violations_name_the_inequality() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("lambda1 = 0.9\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("lambda1 < lambda2"), "{err}");

        let mut cfg = PipelineConfig::default();
        cfg.apply_text("lambda2 = 7\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("lambda2 < lambda3"), "{err}");
    }

    #[test]
    fn unknown_keys_and_syntax_errors_are_reported_with_lines() {
        let mut cfg = PipelineConfig::default();
        assert!(matches!(
            cfg.apply_text("k = 8\nwat = 3\n"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            cfg.apply_text("just words\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_roundtrips_through_the_parser() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(
            "labeled=a.bin\nunlabeled=b.bin\ntest_id=c.bin\ntest_ood=d.bin\n\
             ablate=npm,tsm\nbatch_size=64\nseed=9\nshrinkage=0.01\nthreshold_from=holdout\n",
        )
        .unwrap();
        let manifest = cfg.to_manifest();
        let mut back = PipelineConfig::default();
        back.apply_text(&manifest).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn ablate_parsing() {
        assert_eq!(parse_ablate("none").unwrap(), vec![]);
        assert_eq!(parse_ablate("ppm,tsm").unwrap(), vec![Ablate::Ppm, Ablate::Tsm]);
        assert!(parse_ablate("bogus").is_err());
    }
}
