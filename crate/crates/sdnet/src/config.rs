//! Flat key=value run configuration covering the model and trainer, with a
//! text-file loader and single-key overrides. Unknown keys are rejected and
//! the effective configuration can be echoed for reproducible logs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LargeSkipSource, ModelConfig, Variant};
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::new(1000) }
    }
}

/// Every documented key, in echo order.
pub const KEYS: &[&str] = &[
    "patch_size",
    "window_size",
    "num_heads",
    "embed_dim",
    "shift_size",
    "mlp_ratio",
    "num_branches",
    "num_mswt",
    "skip_small",
    "skip_large",
    "large_skip_source",
    "total_iters",
    "lr0",
    "batch",
    "crop",
    "alpha",
    "beta",
    "lambda",
    "eval_every",
    "checkpoint_every",
    "seed",
    "grad_clip",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "patch_size" => m.block.patch_size = parse(key, value)?,
            "window_size" => m.block.window_size = parse(key, value)?,
            "num_heads" => m.block.num_heads = parse(key, value)?,
            "embed_dim" => m.block.embed_dim = parse(key, value)?,
            "shift_size" => m.block.shift_size = parse(key, value)?,
            "mlp_ratio" => m.block.mlp_ratio = parse(key, value)?,
            "num_branches" => m.num_branches = parse(key, value)?,
            "num_mswt" => m.num_mswt = parse(key, value)?,
            "skip_small" => m.skip_small = parse_bool(key, value)?,
            "skip_large" => m.skip_large = parse_bool(key, value)?,
            "large_skip_source" => {
                m.large_skip_source = match value {
                    "stem" => LargeSkipSource::Stem,
                    "input" => LargeSkipSource::Input,
                    _ => {
                        return Err(Error::Config(format!(
                            "large_skip_source must be stem or input, got {value:?}"
                        )))
                    }
                }
            }
            "total_iters" => t.total_iters = parse(key, value)?,
            "lr0" => t.lr0 = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "crop" => t.crop = parse(key, value)?,
            "alpha" => t.weights.alpha = parse(key, value)?,
            "beta" => t.weights.beta = parse(key, value)?,
            "lambda" => t.weights.lambda = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "grad_clip" => {
                t.grad_clip = match value {
                    "none" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Apply a `key = value` file: one pair per line, `#` comments and blank
    /// lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_variant(&mut self, v: Variant) {
        self.model = self.model.with_variant(v);
    }

    /// The full effective configuration as `key = value` lines.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "patch_size" => m.block.patch_size.to_string(),
                "window_size" => m.block.window_size.to_string(),
                "num_heads" => m.block.num_heads.to_string(),
                "embed_dim" => m.block.embed_dim.to_string(),
                "shift_size" => m.block.shift_size.to_string(),
                "mlp_ratio" => m.block.mlp_ratio.to_string(),
                "num_branches" => m.num_branches.to_string(),
                "num_mswt" => m.num_mswt.to_string(),
                "skip_small" => m.skip_small.to_string(),
                "skip_large" => m.skip_large.to_string(),
                "large_skip_source" => match m.large_skip_source {
                    LargeSkipSource::Stem => "stem".to_string(),
                    LargeSkipSource::Input => "input".to_string(),
                },
                "total_iters" => t.total_iters.to_string(),
                "lr0" => t.lr0.to_string(),
                "batch" => t.batch.to_string(),
                "crop" => t.crop.to_string(),
                "alpha" => t.weights.alpha.to_string(),
                "beta" => t.weights.beta.to_string(),
                "lambda" => t.weights.lambda.to_string(),
                "eval_every" => t.eval_every.to_string(),
                "checkpoint_every" => t.checkpoint_every.to_string(),
                "seed" => t.seed.to_string(),
                "grad_clip" => t.grad_clip.map_or("none".to_string(), |c| c.to_string()),
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_and_echo_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("num_branches", "4").unwrap();
        cfg.set("skip_small", "false").unwrap();
        cfg.set("lr0", "1e-3").unwrap();
        cfg.set("grad_clip", "2.5").unwrap();
        assert_eq!(cfg.model.num_branches, 4);
        assert!(!cfg.model.skip_small);
        assert_eq!(cfg.train.lr0, 1e-3);
        assert_eq!(cfg.train.grad_clip, Some(2.5));

        let echo = cfg.echo();
        let mut round = RunConfig::default();
        for line in echo.lines() {
            let (k, v) = line.split_once('=').unwrap();
            round.set(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(round.echo(), echo);
        // every documented key appears in the echo
        for key in KEYS {
            assert!(echo.lines().any(|l| l.starts_with(&format!("{key} ="))), "{key}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("learning_rate", "0.1").is_err());
        assert!(cfg.set("batch", "five").is_err());
        assert!(cfg.set("skip_large", "maybe").is_err());
    }

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nbatch = 2\n\ncrop=63 # inline\nseed = 9\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.train.batch, 2);
        assert_eq!(cfg.train.crop, 63);
        assert_eq!(cfg.train.seed, 9);

        std::fs::write(&path, "bogus = 1\n").unwrap();
        let err = cfg.apply_file(&path).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        std::fs::write(&path, "just a line\n").unwrap();
        assert!(cfg.apply_file(&path).is_err());
    }
}
