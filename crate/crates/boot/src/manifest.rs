//! `manifest.txt`: one `split=path` line per dataset file, paths relative to
//! the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use mlb_seg_core::data::Split;

use crate::error::{io_err, BootError, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<(Split, PathBuf)>,
}

impl Manifest {
    pub fn get(&self, split: Split) -> Option<&Path> {
        self.entries.iter().find(|(s, _)| *s == split).map(|(_, p)| p.as_path())
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(s, p)| format!("{}={}\n", s.name(), p.display()))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| BootError::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut entries: Vec<(Split, PathBuf)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected `split=path`, got `{line}`")))?;
            let split: Split = k.trim().parse().map_err(|e| err(i + 1, format!("{e}")))?;
            if entries.iter().any(|(s, _)| *s == split) {
                return Err(err(i + 1, format!("split `{split}` listed twice")));
            }
            let v = v.trim();
            if v.is_empty() {
                return Err(err(i + 1, format!("empty path for split `{split}`")));
            }
            entries.push((split, PathBuf::from(v)));
        }
        Ok(Self { entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text, &path)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        fs::write(&path, self.render()).map_err(io_err(&path))
    }
}
