use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::SkeletonTopology;

/// One sign clip as extracted by a pose estimator: `T_raw × N` joints of
/// `(x, y, confidence)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSequence {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl KeypointSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Joint count, taken from the first frame.
    pub fn n_nodes(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    fn check(&self, n_nodes: usize, classes: usize) -> std::result::Result<(), String> {
        if self.frames.is_empty() {
            return Err("sequence has no frames".into());
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != n_nodes {
                return Err(format!(
                    "frame {t} has {} joints but the topology has {n_nodes}",
                    frame.len()
                ));
            }
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("frame {t} has a non-finite coordinate"));
            }
        }
        if self.label >= classes {
            return Err(format!("label {} out of range for {classes} classes", self.label));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<KeypointSequence>,
    pub classes: usize,
    pub split: Option<SplitTag>,
}

impl DatasetManifest {
    /// Checks label range, id uniqueness and, when given, the joint count.
    pub fn new(samples: Vec<KeypointSequence>, classes: usize, split: Option<SplitTag>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if s.label >= classes {
                return Err(Error::Data(format!(
                    "sample `{}`: label {} out of range for {classes} classes",
                    s.id, s.label
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(DatasetManifest { samples, classes, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples per label, in label order, including empty classes.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> BTreeMap<usize, usize> {
        self.class_counts()
            .into_iter()
            .enumerate()
            .filter(|&(_, n)| n > 0)
            .collect()
    }
}

/// Reads one JSON record per line. Blank lines are skipped; any other
/// problem is reported with its 1-based line number.
pub fn ingest(path: &Path, topology: &SkeletonTopology, classes: usize) -> Result<DatasetManifest> {
    let file = fs::File::open(path)?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let record: KeypointSequence = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        record.check(topology.n_nodes, classes).map_err(malformed)?;
        if !seen.insert(record.id.clone()) {
            return Err(malformed(format!("duplicate id `{}`", record.id)));
        }
        samples.push(record);
    }
    if samples.is_empty() {
        log::warn!("{}: no records", path.display());
    }
    DatasetManifest::new(samples, classes, None)
}

/// Writes the manifest in the format read by [`ingest`].
pub fn write(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in &manifest.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
