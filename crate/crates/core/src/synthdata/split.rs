//! Dataset directories: `manifest.tsv` plus `<domain>/<split>/<seed>.{ppm,pgm}`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{dequantize, quantize};
use super::{gen_sample, read_pair, Domain, GenSpec, SamplePair};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const SPEC_FILE: &str = "spec.json";

/// Samples per split and domain are drawn from disjoint blocks of this size.
const SEED_BLOCK: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest line: image path relative to the dataset root (the mask is
/// the sibling `.pgm`), domain, split and generator seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub domain: Domain,
    pub split: Split,
    pub seed: u64,
}

impl ManifestEntry {
    fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.path.display(), self.domain, self.split, self.seed)
    }

    fn parse(line: &str, number: usize) -> Result<Self> {
        let bad = |msg: &str| Error::Manifest {
            line: number,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 tab-separated columns"));
        }
        Ok(ManifestEntry {
            path: PathBuf::from(cols[0]),
            domain: Domain::parse(cols[1]).ok_or_else(|| bad("domain must be A or B"))?,
            split: Split::parse(cols[2]).ok_or_else(|| bad("split must be train or test"))?,
            seed: cols[3].parse().map_err(|_| bad("seed is not an integer"))?,
        })
    }
}

/// Per-(domain, split) sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_a: usize,
    pub test_a: usize,
    pub train_b: usize,
    pub test_b: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train_a: 200,
            test_a: 50,
            train_b: 200,
            test_b: 50,
        }
    }
}

fn block_of(domain: Domain, split: Split) -> u64 {
    match (domain, split) {
        (Domain::A, Split::Train) => 0,
        (Domain::A, Split::Test) => 1,
        (Domain::B, Split::Train) => 2,
        (Domain::B, Split::Test) => 3,
    }
}

/// Generator seed of the `index`-th sample of a split.
pub fn sample_seed(master: u64, domain: Domain, split: Split, index: usize) -> u64 {
    master
        .wrapping_mul(4 * SEED_BLOCK)
        .wrapping_add(block_of(domain, split) * SEED_BLOCK)
        .wrapping_add(index as u64)
}

/// The samples [`make_split`] would write for one split, as they read back
/// from disk (images 8-bit quantized), without touching the filesystem.
pub fn generate_split(spec: &GenSpec, master: u64, domain: Domain, split: Split, count: usize) -> Result<Vec<SamplePair>> {
    (0..count)
        .map(|i| {
            let mut p = gen_sample(spec, domain, sample_seed(master, domain, split, i))?;
            for v in p.image.iter_mut() {
                *v = dequantize(quantize(*v));
            }
            Ok(p)
        })
        .collect()
}

/// Generates all four splits under `out` and writes the manifest.
///
/// An existing dataset is only replaced when `force` is set.
pub fn make_split(spec: &GenSpec, counts: SplitCounts, master_seed: u64, out: &Path, force: bool) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let plan = [
        (Domain::A, Split::Train, counts.train_a),
        (Domain::A, Split::Test, counts.test_a),
        (Domain::B, Split::Train, counts.train_b),
        (Domain::B, Split::Test, counts.test_b),
    ];
    if plan.iter().any(|&(_, _, n)| n == 0 || n as u64 >= SEED_BLOCK) {
        return Err(Error::Config(format!(
            "split counts must be in 1..{SEED_BLOCK}, got {counts:?}"
        )));
    }
    let manifest_path = out.join(MANIFEST);
    if manifest_path.exists() || out.join("A").exists() || out.join("B").exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a dataset; pass --force to overwrite",
                out.display()
            )));
        }
        for sub in ["A", "B"] {
            let d = out.join(sub);
            if d.exists() {
                fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }

    let mut entries = Vec::new();
    for &(domain, split, n) in &plan {
        let rel_dir = PathBuf::from(domain.to_string()).join(split.to_string());
        let dir = out.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n {
            let seed = sample_seed(master_seed, domain, split, i);
            let p = gen_sample(spec, domain, seed)?;
            let stem = format!("{i:05}");
            super::pnm::write_ppm(&dir.join(format!("{stem}.ppm")), &p.image, p.height, p.width)?;
            super::pnm::write_pgm_mask(&dir.join(format!("{stem}.pgm")), &p.mask, p.height, p.width)?;
            entries.push(ManifestEntry {
                path: rel_dir.join(format!("{stem}.ppm")),
                domain,
                split,
                seed,
            });
        }
    }
    let text: String = entries.iter().map(|e| e.line() + "\n").collect();
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let spec_path = out.join(SPEC_FILE);
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| ManifestEntry::parse(l, i + 1))
        .collect()
}

/// Loads every sample of one domain and split, in manifest order.
pub fn load_split(root: &Path, domain: Domain, split: Split) -> Result<Vec<SamplePair>> {
    read_manifest(root)?
        .iter()
        .filter(|e| e.domain == domain && e.split == split)
        .map(|e| read_pair(&root.join(&e.path), e.domain, e.seed))
        .collect()
}
