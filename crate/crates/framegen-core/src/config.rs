//! Flat `key=value` run configuration with strict keys.
//!
//! Precedence is defaults < file < command-line flags; the file layer is
//! parsed here. Unknown or duplicate keys and unparsable values are
//! rejected with their line number so a misspelled setting can never
//! silently fall back to a default.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Run settings shared by the command-line tools. Field names double as
/// the config-file keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Frames per clip, endpoints included.
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Diffusion schedule length T.
    pub timesteps: usize,
    /// Sampler steps at inference.
    pub steps_infer: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_steps: usize,
    pub seed: u64,
    /// Run the four-variant component grid instead of a single training run.
    pub ablate: bool,
    /// Train only the conditional encoder.
    pub freeze_base: bool,
    /// Root directory for artifacts (datasets, checkpoints, reports).
    pub paths: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_frames: 9,
            height: 64,
            width: 64,
            timesteps: 120,
            steps_infer: 8,
            lr: 1e-4,
            batch: 1,
            train_steps: 200,
            seed: 0,
            ablate: false,
            freeze_base: false,
            paths: PathBuf::from("artifacts"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_frames", self.n_frames),
            ("height", self.height),
            ("width", self.width),
            ("timesteps", self.timesteps),
            ("steps_infer", self.steps_infer),
            ("batch", self.batch),
            ("train_steps", self.train_steps),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be >= 1")));
            }
        }
        if self.n_frames < 3 {
            return Err(Error::Config(format!(
                "n_frames must be >= 3 (two keyframes plus at least one middle frame), got {}",
                self.n_frames
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "height and width must be multiples of 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.timesteps < 2 {
            return Err(Error::Config(format!(
                "timesteps must be >= 2, got {}",
                self.timesteps
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    /// Apply one file line's worth of setting. `line` is 1-based and only
    /// used for error messages.
    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Config(format!("line {line}: invalid value {value:?} for {key}"))
            })
        }
        match key {
            "n_frames" => self.n_frames = parse(line, key, value)?,
            "height" => self.height = parse(line, key, value)?,
            "width" => self.width = parse(line, key, value)?,
            "timesteps" => self.timesteps = parse(line, key, value)?,
            "steps_infer" => self.steps_infer = parse(line, key, value)?,
            "lr" => self.lr = parse(line, key, value)?,
            "batch" => self.batch = parse(line, key, value)?,
            "train_steps" => self.train_steps = parse(line, key, value)?,
            "seed" => self.seed = parse(line, key, value)?,
            "ablate" => self.ablate = parse(line, key, value)?,
            "freeze_base" => self.freeze_base = parse(line, key, value)?,
            "paths" => self.paths = PathBuf::from(value.trim()),
            _ => {
                return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
            }
        }
        Ok(())
    }
}

/// Parse config text over `base`. Blank lines and `#` comments are
/// allowed; every other line must be `key=value` with a known key, and no
/// key may repeat.
pub fn parse_config(base: &RunConfig, text: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let mut seen: Vec<String> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line}: expected key=value, got {trimmed:?}"))
        })?;
        let key = key.trim();
        if seen.iter().any(|s| s == key) {
            return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
        }
        cfg.set(line, key, value)?;
        seen.push(key.to_string());
    }
    Ok(cfg)
}

/// Load a config file over the defaults. A missing `path` (None) yields
/// the defaults; a named but unreadable file is an error.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let base = RunConfig::default();
    let cfg = match path {
        None => base,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&base, &text)?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_defaults() {
        let cfg = parse_config(&RunConfig::default(), "").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.n_frames, 9);
        assert_eq!(cfg.paths, PathBuf::from("artifacts"));
        cfg.validate().unwrap();
    }

    #[test]
    fn file_values_override_defaults_field_by_field() {
        let text = "\n# training setup\nlr = 0.001\ntrain_steps=500\nablate=true\npaths = out/run1\n";
        let cfg = parse_config(&RunConfig::default(), text).unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.train_steps, 500);
        assert!(cfg.ablate);
        assert_eq!(cfg.paths, PathBuf::from("out/run1"));
        // Untouched keys keep their defaults.
        assert_eq!(cfg.timesteps, 120);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn unknown_keys_name_their_line() {
        let err = parse_config(&RunConfig::default(), "learning_rate=0.01").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");

        let err = parse_config(&RunConfig::default(), "lr=0.01\n\nbogus=1").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn bad_values_and_shapes_name_their_line() {
        let err = parse_config(&RunConfig::default(), "lr=fast").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("lr"), "{msg}");

        let err = parse_config(&RunConfig::default(), "seed").unwrap_err();
        assert!(err.to_string().contains("expected key=value"), "{err}");

        let err = parse_config(&RunConfig::default(), "ablate=yes").unwrap_err();
        assert!(err.to_string().contains("ablate"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_config(&RunConfig::default(), "lr=0.1\nlr=0.2").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("duplicate"), "{msg}");
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let cases = [
            "n_frames=2",
            "height=66",
            "timesteps=1",
            "lr=0",
            "batch=0",
            "train_steps=0",
        ];
        for text in cases {
            let cfg = parse_config(&RunConfig::default(), text).unwrap();
            assert!(cfg.validate().is_err(), "{text} should fail validation");
        }
    }

    #[test]
    fn missing_file_is_defaults_but_named_missing_file_errors() {
        assert_eq!(load_config(None).unwrap(), RunConfig::default());
        assert!(load_config(Some(Path::new("/no/such/file.cfg"))).is_err());
    }
}
