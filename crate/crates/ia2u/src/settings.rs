//! `key = value` run files: every `RunConfig` key plus the paths below.
//! Unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use ia2u_core::RunConfig;

use crate::error::{Error, Result};

/// Path keys accepted besides the run configuration.
pub const PATH_KEYS: [&str; 4] = ["corpus_dir", "classifier", "checkpoint", "output_dir"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub corpus_dir: Option<PathBuf>,
    /// Classifier checkpoint consumed by the plugin.
    pub classifier: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub paths: Paths,
}

impl Settings {
    pub fn new(run: RunConfig) -> Self {
        Self {
            run,
            paths: Paths::default(),
        }
    }

    /// Apply the lines of `text` on top of `self`. Relative paths are taken
    /// relative to `base`.
    pub fn apply_text(&mut self, text: &str, base: &Path, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |d: String| Error::format(origin, format!("line {}: {d}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("`{line}` is not key = value")))?;
            let (k, v) = (k.trim(), v.trim());
            let path = || base.join(v);
            match k {
                "corpus_dir" => self.paths.corpus_dir = Some(path()),
                "classifier" => self.paths.classifier = Some(path()),
                "checkpoint" => self.paths.checkpoint = Some(path()),
                "output_dir" => self.paths.output_dir = Some(path()),
                _ => self.run.set(k, v).map_err(|e| match e {
                    ia2u_core::Error::UnknownKey(key) => bad(format!("unknown key '{key}'")),
                    other => bad(other.to_string()),
                })?,
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, defaults: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut s = Self::new(defaults);
        s.apply_text(&text, path.parent().unwrap_or(Path::new(".")), path)?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(text: &str) -> Result<Settings> {
        let mut s = Settings::new(RunConfig::default());
        s.apply_text(text, Path::new("/base"), Path::new("run.cfg"))?;
        Ok(s)
    }

    #[test]
    fn paths_and_run_keys_are_read() {
        let s = apply("# run\nchannels = 16\ncorpus_dir = data\nclassifier=/abs/c.ckpt\n\nenable_full_scale = false\n").unwrap();
        assert_eq!(s.run.channels, 16);
        assert!(!s.run.enable_full_scale);
        assert_eq!(s.paths.corpus_dir.as_deref(), Some(Path::new("/base/data")));
        assert_eq!(s.paths.classifier.as_deref(), Some(Path::new("/abs/c.ckpt")));
    }

    #[test]
    fn unknown_key_is_named() {
        let e = apply("channels = 16\nchanels = 8\n").unwrap_err().to_string();
        assert!(e.contains("'chanels'") && e.contains("line 2"), "{e}");
    }

    #[test]
    fn bad_values_and_lines_are_rejected() {
        assert!(apply("channels = many").is_err());
        assert!(apply("just words").is_err());
    }
}
