use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// User → chronologically ordered item ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionDataset {
    pub users: BTreeMap<String, Vec<u64>>,
}

impl InteractionDataset {
    pub fn from_sequences(seqs: impl IntoIterator<Item = (String, Vec<u64>)>) -> Self {
        Self {
            users: seqs.into_iter().collect(),
        }
    }

    /// Every item that appears in any sequence.
    pub fn catalog(&self) -> BTreeSet<u64> {
        self.users.values().flatten().copied().collect()
    }

    pub fn interaction_count(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    /// Parses `user<TAB>item item …` lines. Blank lines and `#` comments
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut users = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (user, items) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("line {}: expected user<TAB>items", n + 1)))?;
            let items = items
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<u64>()
                        .map_err(|_| Error::Input(format!("line {}: bad item id {s:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if users.insert(user.to_string(), items).is_some() {
                return Err(Error::Input(format!("line {}: duplicate user {user:?}", n + 1)));
            }
        }
        Ok(Self { users })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::parse(&text)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (u, items) in &self.users {
            let joined: Vec<String> = items.iter().map(u64::to_string).collect();
            writeln!(out, "{u}\t{}", joined.join(" ")).expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::path(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<u64>,
    pub val: u64,
    pub test: u64,
}

impl UserSplit {
    /// History used to score `target`: the training prefix, plus the
    /// validation item when scoring the test item.
    pub fn history(&self, target: EvalTarget) -> Vec<u64> {
        let mut h = self.train.clone();
        if target == EvalTarget::Test {
            h.push(self.val);
        }
        h
    }

    pub fn target(&self, target: EvalTarget) -> u64 {
        match target {
            EvalTarget::Validation => self.val,
            EvalTarget::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three interactions.
    pub dropped: usize,
}

impl Split {
    pub fn train_interactions(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }
}

/// Last item → test, penultimate → validation, the rest → training.
pub fn split_leave_one_out(dataset: &InteractionDataset) -> Result<Split> {
    if dataset.users.is_empty() {
        return Err(Error::Input("dataset has no users".into()));
    }
    let mut users = Vec::with_capacity(dataset.users.len());
    let mut dropped = 0;
    for (user, seq) in &dataset.users {
        if seq.len() < 3 {
            dropped += 1;
            continue;
        }
        let n = seq.len();
        users.push(UserSplit {
            user: user.clone(),
            train: seq[..n - 2].to_vec(),
            val: seq[n - 2],
            test: seq[n - 1],
        });
    }
    Ok(Split { users, dropped })
}

/// Smoothed item popularity over a catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    probs: BTreeMap<u64, f64>,
}

impl Popularity {
    pub fn get(&self, item: u64) -> Option<f64> {
        self.probs.get(&item).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.probs.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }
}

/// `p_i = (count_i + 1) / (training interactions + |catalog|)`, counted
/// over the training prefixes only.
pub fn compute_popularity(split: &Split, catalog: &BTreeSet<u64>) -> Popularity {
    let mut counts: BTreeMap<u64, u64> = catalog.iter().map(|&i| (i, 0)).collect();
    let mut total = 0u64;
    for u in &split.users {
        for &i in &u.train {
            if let Some(c) = counts.get_mut(&i) {
                *c += 1;
                total += 1;
            }
        }
    }
    let denom = (total + catalog.len() as u64) as f64;
    Popularity {
        probs: counts.into_iter().map(|(i, c)| (i, (c + 1) as f64 / denom)).collect(),
    }
}
