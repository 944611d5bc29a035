//! Dataset manifest: `manifest.csv` (`id,split,path`) next to
//! `dataset.cfg` holding the seed and generator descriptor.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    RealTest,
    SyntheticTest,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::RealTest => "real-test",
            Split::SyntheticTest => "synthetic-test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "real-test" => Ok(Split::RealTest),
            "synthetic-test" => Ok(Split::SyntheticTest),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Sample directory relative to the manifest.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub generator: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    fn check_unique(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(&e.id) {
                return Err(Error::Format(format!("duplicate sample id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.check_unique()?;
        let dir = dir.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(dir.join("manifest.csv"))?;
        w.write_record(["id", "split", "path"])?;
        for e in &self.entries {
            let path = e.path.to_str().ok_or_else(|| Error::invalid("non UTF-8 sample path"))?;
            w.write_record([e.id.as_str(), e.split.name(), path])?;
        }
        w.flush()?;
        fs::write(dir.join("dataset.cfg"), format!("seed={}\ngenerator={}\n", self.seed, self.generator))?;
        Ok(())
    }

    /// Reads and validates a manifest: unique ids, every path present.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let csv_path = dir.join("manifest.csv");
        if !csv_path.exists() {
            return Err(Error::MissingPrerequisite(format!("no dataset manifest at {}", csv_path.display())));
        }
        let mut seed = None;
        let mut generator = None;
        for line in fs::read_to_string(dir.join("dataset.cfg"))?.lines() {
            match line.split_once('=') {
                Some(("seed", v)) => seed = v.trim().parse().ok(),
                Some(("generator", v)) => generator = Some(v.trim().to_owned()),
                _ if line.trim().is_empty() => {}
                _ => return Err(Error::Format(format!("dataset.cfg: unexpected line {line:?}"))),
            }
        }
        let mut r = csv::Reader::from_path(&csv_path)?;
        if r.headers()?.iter().collect::<Vec<_>>() != ["id", "split", "path"] {
            return Err(Error::Format("manifest.csv header must be id,split,path".into()));
        }
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let entry = ManifestEntry {
                id: rec[0].to_owned(),
                split: rec[1].parse()?,
                path: PathBuf::from(&rec[2]),
            };
            if !dir.join(&entry.path).exists() {
                return Err(Error::MissingPrerequisite(format!("sample path {} missing", entry.path.display())));
            }
            entries.push(entry);
        }
        let m = Self {
            seed: seed.ok_or_else(|| Error::Format("dataset.cfg lacks seed".into()))?,
            generator: generator.ok_or_else(|| Error::Format("dataset.cfg lacks generator".into()))?,
            entries,
        };
        m.check_unique()?;
        Ok(m)
    }
}
