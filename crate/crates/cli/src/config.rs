//! Flat `key = value` run configs. A value comes from the command line
//! first, then the `--config` file, then the built-in default. Every key
//! read is recorded so the resolved config can be written next to the
//! outputs.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sk_unet::kv::KvFile;

use crate::CliError;

pub const RUN_CONFIG: &str = "run_config.txt";

pub struct Resolver {
    file: Option<(KvFile, PathBuf)>,
    resolved: KvFile,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => Some((KvFile::read(p).map_err(|e| CliError::Usage(e.to_string()))?, p.to_path_buf())),
            None => None,
        };
        Ok(Self {
            file,
            resolved: KvFile::new(),
        })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        let Some((kv, path)) = &self.file else {
            return Ok(None);
        };
        match kv.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                CliError::Usage(format!("{}: cannot parse `{key} = {raw}`", path.display()))
            }),
        }
    }

    fn record<T: Display>(&mut self, key: &str, v: &T) {
        self.resolved.set(key, v);
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T, CliError> {
        let v = match cli {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn path(&mut self, key: &str, cli: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let v = match cli {
            Some(v) => v,
            None => self
                .file_value::<String>(key)?
                .map(PathBuf::from)
                .ok_or_else(|| CliError::Usage(format!("missing required value `{key}`")))?,
        };
        self.record(key, &v.display());
        Ok(v)
    }

    /// A switch set on the command line, or `true` in the file.
    pub fn flag(&mut self, key: &str, cli: bool) -> Result<bool, CliError> {
        let v = cli || self.file_value(key)?.unwrap_or(false);
        self.record(key, &v);
        Ok(v)
    }

    /// Fails on file keys that were never read.
    pub fn finish(self) -> Result<KvFile, CliError> {
        if let Some((kv, path)) = &self.file {
            if let Some(k) = kv.keys().find(|k| self.resolved.get(k).is_none()) {
                return Err(CliError::Usage(format!("{}: unknown key `{k}`", path.display())));
            }
        }
        Ok(self.resolved)
    }
}

/// Writes the resolved config to `dir/run_config.txt`.
pub fn write_resolved(kv: &KvFile, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    kv.write(&dir.join(RUN_CONFIG))?;
    Ok(())
}

/// Comma-separated list value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = T::Err;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(T::from_str)
            .collect::<Result<_, _>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "epochs = 7\nlr = 0.01\n").unwrap();
        let mut r = Resolver::new(Some(&p)).unwrap();
        assert_eq!(r.value("epochs", Some(3usize), 20).unwrap(), 3);
        assert_eq!(r.value("lr", None, 1e-3).unwrap(), 0.01);
        assert_eq!(r.value("batch", None, 4usize).unwrap(), 4);
        let kv = r.finish().unwrap();
        assert_eq!(kv.get("epochs"), Some("3"));
        assert_eq!(kv.get("batch"), Some("4"));
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "epochs = 7\nepochz = 1\n").unwrap();
        let mut r = Resolver::new(Some(&p)).unwrap();
        r.value("epochs", None, 20usize).unwrap();
        assert!(matches!(r.finish(), Err(CliError::Usage(m)) if m.contains("epochz")));
    }

    #[test]
    fn list_roundtrip() {
        let l: List<usize> = "1, 5,10".parse().unwrap();
        assert_eq!(l.0, vec![1, 5, 10]);
        assert_eq!(l.to_string(), "1,5,10");
    }
}
