use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::cifar::{RawDataset, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Head,
    Mid,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Mid, Group::Tail];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Head => "Head",
            Group::Mid => "Mid",
            Group::Tail => "Tail",
        })
    }
}

/// How classes are split into head/mid/tail.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    /// Classes 0–2 head, 3–6 mid, 7–9 tail.
    Cifar10,
    /// Classes 0–35 head, 36–70 mid, 71–99 tail.
    Cifar100,
    /// By count: more than `head_above` is head, fewer than `tail_below` is tail.
    Thresholds { head_above: usize, tail_below: usize },
}

impl DatasetKind {
    /// Count thresholds used for large benchmarks: >100 head, <20 tail.
    pub const DEFAULT_THRESHOLDS: DatasetKind = DatasetKind::Thresholds {
        head_above: 100,
        tail_below: 20,
    };

    pub fn parse(name: &str, thresholds: Option<(usize, usize)>) -> Result<Self> {
        match (name.to_ascii_lowercase().as_str(), thresholds) {
            ("cifar10" | "cifar-10" | "cifar10-lt", _) => Ok(DatasetKind::Cifar10),
            ("cifar100" | "cifar-100" | "cifar100-lt", _) => Ok(DatasetKind::Cifar100),
            ("counts", None) => Ok(Self::DEFAULT_THRESHOLDS),
            (_, Some((head_above, tail_below))) => Ok(DatasetKind::Thresholds { head_above, tail_below }),
            (other, None) => Err(Error::param(format!(
                "unknown dataset kind {other:?} and no head/tail thresholds given"
            ))),
        }
    }

    pub fn for_classes(n_classes: usize) -> Self {
        match n_classes {
            10 => DatasetKind::Cifar10,
            100 => DatasetKind::Cifar100,
            _ => Self::DEFAULT_THRESHOLDS,
        }
    }
}

/// Assigns each class to a group. `counts` are indexed by class.
pub fn group_classes(counts: &[usize], kind: &DatasetKind) -> Result<Vec<Group>> {
    let by_index = |head_end: usize, mid_end: usize, expected: usize| -> Result<Vec<Group>> {
        if counts.len() != expected {
            return Err(Error::param(format!(
                "index grouping expects {expected} classes, got {}",
                counts.len()
            )));
        }
        Ok((0..counts.len())
            .map(|c| match c {
                c if c < head_end => Group::Head,
                c if c < mid_end => Group::Mid,
                _ => Group::Tail,
            })
            .collect())
    };
    match *kind {
        DatasetKind::Cifar10 => by_index(3, 7, 10),
        DatasetKind::Cifar100 => by_index(36, 71, 100),
        DatasetKind::Thresholds { head_above, tail_below } => Ok(counts
            .iter()
            .map(|&n| {
                if n > head_above {
                    Group::Head
                } else if n < tail_below {
                    Group::Tail
                } else {
                    Group::Mid
                }
            })
            .collect()),
    }
}

/// Per-class sizes `floor(n_max · rho^(−i/(C−1)))`.
pub fn longtail_counts(n_classes: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::param(format!("imbalance factor must be ≥ 1, got {rho}")));
    }
    if n_classes == 0 {
        return Err(Error::param("need at least one class"));
    }
    if n_classes == 1 {
        return Ok(vec![n_max]);
    }
    let denom = (n_classes - 1) as f64;
    Ok((0..n_classes)
        .map(|i| (n_max as f64 * rho.powf(-(i as f64) / denom)).floor() as usize)
        .collect())
}

/// A long-tailed training split with its balanced validation split.
#[derive(Clone, Debug)]
pub struct LtDataset {
    pub train: Split,
    /// Balanced held-out split, never decimated.
    pub val: Split,
    /// Position of each kept training image in the source training split.
    pub source_indices: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub rho: f64,
    pub n_max: usize,
    pub groups: Vec<Group>,
    pub n_classes: usize,
}

impl LtDataset {
    pub fn group_of(&self, class: usize) -> Group {
        self.groups[class]
    }

    pub fn classes_in(&self, g: Group) -> Vec<usize> {
        (0..self.n_classes).filter(|&c| self.groups[c] == g).collect()
    }

    pub fn with_kind(mut self, kind: &DatasetKind) -> Result<Self> {
        self.groups = group_classes(&self.class_counts, kind)?;
        Ok(self)
    }

    pub fn manifest_rows(&self) -> Vec<(usize, usize, Group)> {
        (0..self.n_classes)
            .map(|c| (c, self.class_counts[c], self.groups[c]))
            .collect()
    }
}

/// Decimates each class of `raw.train` to its long-tailed size.
///
/// Within a class, images are shuffled under `seed` and the first `N_i` are
/// kept, so the selection is uniform without replacement and reproducible.
pub fn make_longtailed(raw: &RawDataset, rho: f64, n_max: usize, seed: u64) -> Result<LtDataset> {
    let counts = longtail_counts(raw.n_classes, n_max, rho)?;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); raw.n_classes];
    for (i, &l) in raw.train.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut train = Split::default();
    let mut source_indices = Vec::new();
    for (c, members) in per_class.iter_mut().enumerate() {
        if members.len() < n_max {
            return Err(Error::param(format!(
                "class {c} has {} images, fewer than n_max = {n_max}",
                members.len()
            )));
        }
        let mut rng = seed::rng(seed, &[c as u64]);
        members.shuffle(&mut rng);
        for &i in &members[..counts[c]] {
            source_indices.push(i);
            train.images.push(raw.train.images[i].clone());
            train.labels.push(c);
        }
    }
    let groups = group_classes(&counts, &DatasetKind::for_classes(raw.n_classes))?;
    Ok(LtDataset {
        train,
        val: raw.test.clone(),
        source_indices,
        class_counts: counts,
        rho,
        n_max,
        groups,
        n_classes: raw.n_classes,
    })
}

/// `class_index,count,group` with a header row.
pub fn write_manifest_csv(path: &Path, ds: &LtDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "class_index,count,group").expect("vec write");
    for (c, n, g) in ds.manifest_rows() {
        writeln!(out, "{c},{n},{g}").expect("vec write");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    Ok(out)
}
