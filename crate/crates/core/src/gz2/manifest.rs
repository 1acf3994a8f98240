//! Stratified train/test split and the dataset manifest file.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledSample, NUM_CLASSES};
use crate::error::{Error, Result};

const MANIFEST_VERSION: u32 = 1;
const MANIFEST_TAG: &str = "# morphnet-manifest v";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub galaxy_id: String,
    pub path: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio { train: 9, test: 1 }
    }
}

impl SplitRatio {
    /// Held-out count for a class of `n`: the share rounded half up, kept
    /// within `1..n`.
    pub fn test_count(&self, n: usize) -> usize {
        let parts = (self.train + self.test) as usize;
        let share = (2 * n * self.test as usize + parts) / (2 * parts);
        share.clamp(1, n.saturating_sub(1).max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// `[class][0 = train, 1 = test]`.
    pub fn counts(&self) -> [[usize; 2]; NUM_CLASSES] {
        let mut c = [[0; 2]; NUM_CLASSES];
        for e in &self.entries {
            c[e.label as usize][(e.split == Split::Test) as usize] += 1;
        }
        c
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Splits each class separately. Members are ordered by id before a seeded
/// shuffle, so the result does not depend on input order.
pub fn split_dataset(
    samples: &[LabeledSample],
    ratio: SplitRatio,
    seed: u64,
    path_for: impl Fn(&str) -> String,
) -> Result<DatasetManifest> {
    if ratio.train == 0 || ratio.test == 0 {
        return Err(Error::InvalidArgument("split ratio parts must be positive".into()));
    }
    let mut by_class: Vec<Vec<&LabeledSample>> = vec![Vec::new(); NUM_CLASSES];
    for s in samples {
        let c = s.label as usize;
        if c >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("label {} out of range", s.label)));
        }
        by_class[c].push(s);
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!("class {class} has fewer than 2 samples")));
        }
        members.sort();
        members.dedup_by(|a, b| a.galaxy_id == b.galaxy_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        members.shuffle(&mut rng);
        let n_test = ratio.test_count(members.len());
        for (i, s) in members.into_iter().enumerate() {
            entries.push(ManifestEntry {
                galaxy_id: s.galaxy_id.clone(),
                path: path_for(&s.galaxy_id),
                label: s.label,
                split: if i < n_test { Split::Test } else { Split::Train },
            });
        }
    }
    entries.sort_by(|a, b| a.galaxy_id.cmp(&b.galaxy_id));
    Ok(DatasetManifest { seed, entries })
}

/// Writes the versioned manifest: a tag line, a seed line, then
/// `galaxy_id,path,label,split` records.
pub fn write_manifest<W: Write>(manifest: &DatasetManifest, mut out: W) -> Result<()> {
    writeln!(out, "{MANIFEST_TAG}{MANIFEST_VERSION}").map_err(|e| Error::io("manifest", e))?;
    writeln!(out, "# seed {}", manifest.seed).map_err(|e| Error::io("manifest", e))?;
    let mut w = csv::Writer::from_writer(out);
    for e in &manifest.entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io("manifest", e))?;
    Ok(())
}

pub fn read_manifest<R: BufRead>(mut input: R) -> Result<DatasetManifest> {
    let mut line = String::new();
    input.read_line(&mut line).map_err(|e| Error::io("manifest", e))?;
    let version: u32 = line
        .trim()
        .strip_prefix(MANIFEST_TAG)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Schema("manifest is missing its version line".into()))?;
    if version != MANIFEST_VERSION {
        return Err(Error::Schema(format!("unsupported manifest version {version}")));
    }
    line.clear();
    input.read_line(&mut line).map_err(|e| Error::io("manifest", e))?;
    let seed = line
        .trim()
        .strip_prefix("# seed ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Schema("manifest is missing its seed line".into()))?;
    let mut rdr = csv::Reader::from_reader(input);
    let mut entries = Vec::new();
    for rec in rdr.deserialize() {
        let e: ManifestEntry = rec?;
        if e.label as usize >= NUM_CLASSES {
            return Err(Error::Schema(format!("manifest label {} out of range", e.label)));
        }
        entries.push(e);
    }
    Ok(DatasetManifest { seed, entries })
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_manifest(self, std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_manifest(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn samples(sizes: &[usize]) -> Vec<LabeledSample> {
        let mut out = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                out.push(LabeledSample {
                    galaxy_id: format!("{c}-{i:05}"),
                    label: c as u8,
                });
            }
        }
        out
    }

    fn png(id: &str) -> String {
        format!("{id}.png")
    }

    #[test]
    fn ten_samples_one_class() {
        let m = split_dataset(&samples(&[10]), SplitRatio::default(), 3, png).unwrap();
        assert_eq!(m.counts()[0], [9, 1]);
    }

    #[test]
    fn partition_and_fractions() {
        let sizes = [500, 320, 57, 91, 200, 64, 13];
        let all = samples(&sizes);
        let m = split_dataset(&all, SplitRatio::default(), 11, png).unwrap();
        let ids: HashSet<&str> = m.entries.iter().map(|e| e.galaxy_id.as_str()).collect();
        assert_eq!(ids.len(), all.len());
        for (c, &n) in sizes.iter().enumerate() {
            let [train, test] = m.counts()[c];
            assert_eq!(train + test, n);
            if n >= 50 {
                let f = test as f64 / n as f64;
                assert!((0.09..=0.11).contains(&f), "class {c}: {f}");
            }
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let mut all = samples(&[30, 40]);
        let a = split_dataset(&all, SplitRatio::default(), 5, png).unwrap();
        all.reverse();
        let b = split_dataset(&all, SplitRatio::default(), 5, png).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&all, SplitRatio::default(), 6, png).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_class_is_an_error() {
        assert!(split_dataset(&samples(&[10, 1]), SplitRatio::default(), 0, png).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = split_dataset(&samples(&[12, 5]), SplitRatio::default(), 42, png).unwrap();
        let mut buf = Vec::new();
        write_manifest(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# morphnet-manifest v1\n# seed 42\ngalaxy_id,path,label,split\n"));
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), m);
        assert!(read_manifest("galaxy_id,path,label,split\n".as_bytes()).is_err());
    }
}
