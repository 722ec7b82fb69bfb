//! User group annotation.
//!
//! Users are scored either by the share of popular items in their training
//! prefix (popularity axis: niche / diverse / popular) or by prefix length
//! (sequence axis: short / medium / long) and cut into three quantile bins.
//! By default the bins are placed on the cumulative training-interaction
//! curve, so a `(20, 60, 20)` split covers those fractions of the training
//! data rather than of the users.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UserSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Pop,
    Seq,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::Pop, Axis::Seq];

    pub fn label_names(self) -> [&'static str; 3] {
        match self {
            Axis::Pop => ["niche", "diverse", "popular"],
            Axis::Seq => ["short", "medium", "long"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Pop => "pop",
            Axis::Seq => "seq",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pop" | "popularity" => Ok(Axis::Pop),
            "seq" | "sequence" | "sequence_length" => Ok(Axis::Seq),
            other => Err(Error::Config(format!("unknown group axis `{other}`"))),
        }
    }
}

/// Quantile bin, ordered bottom < middle < top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Bottom,
    Middle,
    Top,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Bottom, Tier::Middle, Tier::Top];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self, axis: Axis) -> &'static str {
        axis.label_names()[self.index()]
    }

    pub fn from_label(axis: Axis, label: &str) -> Result<Tier> {
        axis.label_names()
            .iter()
            .position(|l| *l == label)
            .map(|i| Tier::ALL[i])
            .ok_or_else(|| Error::Data(format!("`{label}` is not a {} group", axis.name())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SplitName {
    #[serde(rename = "33")]
    Balanced,
    #[serde(rename = "2060")]
    SemiBalanced,
    #[serde(rename = "1080")]
    Imbalanced,
}

// Accepts `"33"` as well as a bare `33`.
impl<'de> Deserialize<'de> for SplitName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(u64),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(s) => s,
            Raw::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "33" => Ok(SplitName::Balanced),
            "2060" => Ok(SplitName::SemiBalanced),
            "1080" => Ok(SplitName::Imbalanced),
            other => Err(Error::Config(format!("unknown quantile split `{other}` (expected 33, 2060 or 1080)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSplit {
    pub name: SplitName,
    /// (bottom, middle, top)
    pub fractions: [f64; 3],
}

impl QuantileSplit {
    pub fn named(name: SplitName) -> Self {
        let fractions = match name {
            SplitName::Balanced => [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            SplitName::SemiBalanced => [0.2, 0.6, 0.2],
            SplitName::Imbalanced => [0.1, 0.8, 0.1],
        };
        QuantileSplit { name, fractions }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fractions.iter().any(|f| *f <= 0.0) {
            return Err(Error::Config(format!("invalid split fractions {:?}", self.fractions)));
        }
        Ok(())
    }
}

/// Whether quantile boundaries cut the training-interaction mass or the user count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Data,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Pop,
    Seq,
    Intersect,
}

impl Scheme {
    pub fn axes(self) -> &'static [Axis] {
        match self {
            Scheme::Pop => &[Axis::Pop],
            Scheme::Seq => &[Axis::Seq],
            Scheme::Intersect => &[Axis::Pop, Axis::Seq],
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pop" | "popularity" => Ok(Scheme::Pop),
            "seq" | "sequence_length" => Ok(Scheme::Seq),
            "intersect" | "intersecting" => Ok(Scheme::Intersect),
            other => Err(Error::Config(format!("unknown group scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemFrequencyTable {
    pub freq: BTreeMap<u32, u64>,
    pub total: u64,
}

/// Counts item occurrences over training prefixes only.
pub fn item_frequencies(sequences: &[UserSequence]) -> Result<ItemFrequencyTable> {
    let mut freq = BTreeMap::new();
    for seq in sequences {
        for &item in seq.train_prefix() {
            *freq.entry(item).or_insert(0u64) += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Data("no training interactions to count".into()));
    }
    let total = freq.values().sum();
    Ok(ItemFrequencyTable { freq, total })
}

/// The `ceil(top_fraction * |items|)` most frequent items, ties by item index.
pub fn popular_item_set(table: &ItemFrequencyTable, top_fraction: f64) -> Result<BTreeSet<u32>> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(Error::Config(format!("popular fraction {top_fraction} outside (0, 1)")));
    }
    if table.freq.is_empty() {
        return Err(Error::Data("empty item frequency table".into()));
    }
    let mut ranked: Vec<(u32, u64)> = table.freq.iter().map(|(&i, &f)| (i, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    // Guard the ceiling against representation error such as 0.2 * 15 = 3.0000000000000004.
    let n = ((top_fraction * ranked.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(ranked.into_iter().take(n).map(|(i, _)| i).collect())
}

/// Share of training-prefix positions whose item is popular.
pub fn popularity_ratio(seq: &UserSequence, popular: &BTreeSet<u32>) -> f64 {
    let prefix = seq.train_prefix();
    if prefix.is_empty() {
        return 0.0;
    }
    prefix.iter().filter(|i| popular.contains(i)).count() as f64 / prefix.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredUser {
    pub user: u32,
    pub score: f64,
    /// Training interactions owned by the user; the unit of `SplitMode::Data`.
    pub mass: f64,
}

/// Cuts users, sorted by `(score, user)`, into bottom/middle/top bins.
///
/// In data mode a user falls into the bin containing the midpoint of its
/// mass on the cumulative curve. In user mode the bottom and top bins take
/// `floor(f * N)` users and the middle absorbs the rounding remainder.
pub fn assign_by_quantile(
    scores: &[ScoredUser],
    split: &QuantileSplit,
    mode: SplitMode,
) -> Result<BTreeMap<u32, Tier>> {
    split.validate()?;
    if scores.len() < 3 {
        return Err(Error::Config(format!("quantile grouping needs at least 3 users, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.score.is_finite() || !s.mass.is_finite() || s.mass < 0.0) {
        return Err(Error::Data("non-finite group score".into()));
    }
    let mut order: Vec<&ScoredUser> = scores.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.user.cmp(&b.user)));

    let [bottom, middle, _] = split.fractions;
    let mut out = BTreeMap::new();
    match mode {
        SplitMode::Data => {
            let total: f64 = order.iter().map(|s| s.mass).sum();
            if total <= 0.0 {
                return Err(Error::Data("no training interactions to split".into()));
            }
            let mut cum = 0.0;
            for s in order {
                let mid = (cum + 0.5 * s.mass) / total;
                cum += s.mass;
                let tier = if mid < bottom {
                    Tier::Bottom
                } else if mid < bottom + middle {
                    Tier::Middle
                } else {
                    Tier::Top
                };
                out.insert(s.user, tier);
            }
        }
        SplitMode::User => {
            let n = order.len();
            let n_bottom = (bottom * n as f64 + 1e-9).floor() as usize;
            let n_top = (split.fractions[2] * n as f64 + 1e-9).floor() as usize;
            for (rank, s) in order.into_iter().enumerate() {
                let tier = if rank < n_bottom {
                    Tier::Bottom
                } else if rank < n - n_top {
                    Tier::Middle
                } else {
                    Tier::Top
                };
                out.insert(s.user, tier);
            }
        }
    }
    Ok(out)
}

/// Per-user group labels under one or both axes. Users are dense indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub scheme: Scheme,
    pub mode: SplitMode,
    pub popular_fraction: f64,
    pub split_pop: Option<QuantileSplit>,
    pub split_seq: Option<QuantileSplit>,
    pub pop: Option<Vec<Tier>>,
    pub seq: Option<Vec<Tier>>,
}

impl GroupAssignment {
    pub fn labels(&self, axis: Axis) -> Option<&[Tier]> {
        match axis {
            Axis::Pop => self.pop.as_deref(),
            Axis::Seq => self.seq.as_deref(),
        }
    }

    pub fn axes(&self) -> Vec<Axis> {
        Axis::ALL.into_iter().filter(|a| self.labels(*a).is_some()).collect()
    }

    pub fn num_users(&self) -> usize {
        self.pop.as_ref().or(self.seq.as_ref()).map_or(0, Vec::len)
    }

    /// Users per tier along `axis`.
    pub fn group_sizes(&self, axis: Axis) -> Option<[usize; 3]> {
        self.labels(axis).map(|labels| {
            let mut c = [0; 3];
            for t in labels {
                c[t.index()] += 1;
            }
            c
        })
    }

    /// Percentage of users per tier (the "usplit").
    pub fn user_split(&self, axis: Axis) -> Option<[f64; 3]> {
        let sizes = self.group_sizes(axis)?;
        let n: usize = sizes.iter().sum();
        Some(sizes.map(|s| 100.0 * s as f64 / n as f64))
    }

    /// Percentage of training interactions per tier (the achieved "dsplit").
    pub fn data_split(&self, axis: Axis, sequences: &[UserSequence]) -> Option<[f64; 3]> {
        let labels = self.labels(axis)?;
        let mut mass = [0.0; 3];
        for seq in sequences {
            mass[labels[seq.user as usize].index()] += seq.train_prefix().len() as f64;
        }
        let total: f64 = mass.iter().sum();
        Some(mass.map(|m| 100.0 * m / total))
    }
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub scheme: Scheme,
    pub split_pop: QuantileSplit,
    pub split_seq: QuantileSplit,
    pub mode: SplitMode,
    pub popular_fraction: f64,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            scheme: Scheme::Pop,
            split_pop: QuantileSplit::named(SplitName::Balanced),
            split_seq: QuantileSplit::named(SplitName::Balanced),
            mode: SplitMode::Data,
            popular_fraction: 0.2,
        }
    }
}

fn tiers_for(num_users: usize, scores: &[ScoredUser], split: &QuantileSplit, mode: SplitMode) -> Result<Vec<Tier>> {
    let map = assign_by_quantile(scores, split, mode)?;
    if map.len() != num_users {
        return Err(Error::Data("sequences do not cover every user".into()));
    }
    Ok(map.into_values().collect())
}

/// Labels every user under the axes of `opts.scheme`.
/// `sequences[u].user` must equal `u`.
pub fn annotate(sequences: &[UserSequence], opts: &AnnotateOptions) -> Result<GroupAssignment> {
    if sequences.iter().enumerate().any(|(i, s)| s.user as usize != i) {
        return Err(Error::Data("sequences must be indexed by dense user id".into()));
    }
    let n = sequences.len();
    let mass = |s: &UserSequence| s.train_prefix().len() as f64;
    let mut out = GroupAssignment {
        scheme: opts.scheme,
        mode: opts.mode,
        popular_fraction: opts.popular_fraction,
        split_pop: None,
        split_seq: None,
        pop: None,
        seq: None,
    };
    for axis in opts.scheme.axes() {
        match axis {
            Axis::Pop => {
                let freqs = item_frequencies(sequences)?;
                let popular = popular_item_set(&freqs, opts.popular_fraction)?;
                let scores: Vec<ScoredUser> = sequences
                    .iter()
                    .map(|s| ScoredUser { user: s.user, score: popularity_ratio(s, &popular), mass: mass(s) })
                    .collect();
                out.pop = Some(tiers_for(n, &scores, &opts.split_pop, opts.mode)?);
                out.split_pop = Some(opts.split_pop);
            }
            Axis::Seq => {
                let scores: Vec<ScoredUser> = sequences
                    .iter()
                    .map(|s| ScoredUser { user: s.user, score: mass(s), mass: mass(s) })
                    .collect();
                out.seq = Some(tiers_for(n, &scores, &opts.split_seq, opts.mode)?);
                out.split_seq = Some(opts.split_seq);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UserLabels {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pop_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seq_label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AxisSummary {
    split: QuantileSplit,
    sizes: [usize; 3],
    usplit_percent: [f64; 3],
    dsplit_percent: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupFile {
    scheme: Scheme,
    mode: SplitMode,
    popular_fraction: f64,
    axes: BTreeMap<Axis, AxisSummary>,
    users: BTreeMap<String, UserLabels>,
}

impl GroupAssignment {
    /// Writes the JSON group file (user id -> labels plus split summary).
    pub fn save(&self, path: &Path, dataset: &Dataset, sequences: &[UserSequence]) -> Result<()> {
        let mut axes = BTreeMap::new();
        for axis in self.axes() {
            let split = match axis {
                Axis::Pop => self.split_pop,
                Axis::Seq => self.split_seq,
            }
            .ok_or_else(|| Error::Data("labels without split".into()))?;
            axes.insert(
                axis,
                AxisSummary {
                    split,
                    sizes: self.group_sizes(axis).unwrap(),
                    usplit_percent: self.user_split(axis).unwrap(),
                    dsplit_percent: self.data_split(axis, sequences).unwrap(),
                },
            );
        }
        let users = dataset
            .users
            .iter()
            .enumerate()
            .map(|(u, id)| {
                let label = |axis| self.labels(axis).map(|l| l[u].label(axis).to_string());
                (id.clone(), UserLabels { pop_label: label(Axis::Pop), seq_label: label(Axis::Seq) })
            })
            .collect();
        let file = GroupFile { scheme: self.scheme, mode: self.mode, popular_fraction: self.popular_fraction, axes, users };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, dataset: &Dataset) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: GroupFile = serde_json::from_slice(&raw)?;
        let mut out = GroupAssignment {
            scheme: file.scheme,
            mode: file.mode,
            popular_fraction: file.popular_fraction,
            split_pop: file.axes.get(&Axis::Pop).map(|a| a.split),
            split_seq: file.axes.get(&Axis::Seq).map(|a| a.split),
            pop: None,
            seq: None,
        };
        for axis in file.axes.keys() {
            let mut labels = Vec::with_capacity(dataset.num_users());
            for id in &dataset.users {
                let entry = file
                    .users
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("user `{id}` missing from group file")))?;
                let label = match axis {
                    Axis::Pop => entry.pop_label.as_deref(),
                    Axis::Seq => entry.seq_label.as_deref(),
                }
                .ok_or_else(|| Error::Data(format!("user `{id}` has no {} label", axis.name())))?;
                labels.push(Tier::from_label(*axis, label)?);
            }
            match axis {
                Axis::Pop => out.pop = Some(labels),
                Axis::Seq => out.seq = Some(labels),
            }
        }
        Ok(out)
    }
}
