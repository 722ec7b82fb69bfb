//! Synthetic interaction logs with a planted minority population.
//!
//! Majority users walk a cyclic chain over one item pool; minority users
//! walk a different chain (another stride), either over a separate pool,
//! where their items are individually rare, or over the majority's own pool,
//! where the two chains compete for the same items. Output is written in the MovieLens `::` format so it runs
//! through the ordinary `prepare` path.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{core_filter, Dataset, Interaction};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub minority_fraction: f64,
    pub majority_items: usize,
    pub minority_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of following the chain rather than jumping uniformly within the pool.
    pub follow_prob: f64,
    pub majority_stride: usize,
    pub minority_stride: usize,
    /// Probability that a minority step lands in the majority pool.
    pub minority_crossover: f64,
    /// Minority users walk the majority pool instead of their own.
    pub shared_pool: bool,
    /// Length range for minority users; defaults to `min_len..=max_len`.
    pub minority_len: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 400,
            minority_fraction: 0.1,
            majority_items: 60,
            minority_items: 40,
            min_len: 8,
            max_len: 24,
            follow_prob: 0.85,
            majority_stride: 1,
            minority_stride: 3,
            minority_crossover: 0.0,
            shared_pool: false,
            minority_len: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users < 3 || self.majority_items < 2 || self.minority_items < 2 {
            return Err(Error::Config("synthetic data needs >= 3 users and >= 2 items per pool".into()));
        }
        for (lo, hi) in [(self.min_len, self.max_len), self.minority_len.unwrap_or((self.min_len, self.max_len))] {
            if lo < 5 || hi < lo {
                return Err(Error::Config("synthetic lengths need 5 <= min <= max".into()));
            }
        }
        for (name, p) in [
            ("minority_fraction", self.minority_fraction),
            ("follow_prob", self.follow_prob),
            ("minority_crossover", self.minority_crossover),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn minority_users(&self) -> usize {
        (self.minority_fraction * self.users as f64).round() as usize
    }
}

/// Raw interactions plus the ids of the planted minority users.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub interactions: Vec<Interaction>,
    pub minority: Vec<String>,
}

pub fn generate_interactions(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Synthetic);
    let n_minority = cfg.minority_users();
    let mut interactions = Vec::new();
    let mut minority = Vec::new();
    let mut order = 0u64;
    for u in 0..cfg.users {
        // Spread minority users through the id range.
        let is_minority = n_minority > 0 && u % (cfg.users / n_minority).max(1) == 0 && minority.len() < n_minority;
        let user = format!("{}", u + 1);
        if is_minority {
            minority.push(user.clone());
        }
        let (offset, pool, stride) = match (is_minority, cfg.shared_pool) {
            (true, false) => (cfg.majority_items, cfg.minority_items, cfg.minority_stride),
            (true, true) => (0, cfg.majority_items, cfg.minority_stride),
            (false, _) => (0, cfg.majority_items, cfg.majority_stride),
        };
        let (lo, hi) = match cfg.minority_len {
            Some(range) if is_minority => range,
            _ => (cfg.min_len, cfg.max_len),
        };
        let len = rng.gen_range(lo..=hi);
        let mut cur = rng.gen_range(0..pool);
        for t in 0..len {
            let item = if is_minority && rng.gen::<f64>() < cfg.minority_crossover {
                rng.gen_range(0..cfg.majority_items)
            } else {
                offset + cur
            };
            interactions.push(Interaction {
                user: user.clone(),
                item: format!("{}", item + 1),
                timestamp: 1_000_000 + (u * 1000 + t) as i64,
                source_order: order,
            });
            order += 1;
            cur = if rng.gen::<f64>() < cfg.follow_prob { (cur + stride) % pool } else { rng.gen_range(0..pool) };
        }
    }
    Ok(SynthOutput { interactions, minority })
}

/// Generated log after core-`k` filtering.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    core_filter(&generate_interactions(cfg)?.interactions, 5)
}

/// `user::item::rating::timestamp` lines.
pub fn ratings_dat(interactions: &[Interaction]) -> String {
    let mut out = String::new();
    for it in interactions {
        let _ = writeln!(out, "{}::{}::5::{}", it.user, it.item, it.timestamp);
    }
    out
}

pub fn write_ratings(path: &Path, interactions: &[Interaction]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ratings_dat(interactions)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_movielens;

    #[test]
    fn deterministic_and_parseable() {
        let cfg = SynthConfig { users: 60, ..SynthConfig::default() };
        let a = generate_interactions(&cfg).unwrap();
        let b = generate_interactions(&cfg).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.minority.len(), 6);
        let parsed = parse_movielens(ratings_dat(&a.interactions).as_bytes()).unwrap();
        assert_eq!(parsed.len(), a.interactions.len());
        let ds = generate(&cfg).unwrap();
        assert!(ds.num_users() > 50);
    }

    #[test]
    fn minority_items_are_disjoint_without_crossover() {
        let cfg = SynthConfig { users: 100, ..SynthConfig::default() };
        let out = generate_interactions(&cfg).unwrap();
        for it in &out.interactions {
            let item: usize = it.item.parse().unwrap();
            let minority = out.minority.contains(&it.user);
            assert_eq!(minority, item > cfg.majority_items, "{it:?}");
        }
    }

    #[test]
    fn shared_pool_and_minority_lengths() {
        let cfg = SynthConfig { users: 100, shared_pool: true, minority_len: Some((5, 6)), ..SynthConfig::default() };
        let out = generate_interactions(&cfg).unwrap();
        let mut lens = std::collections::HashMap::new();
        for it in &out.interactions {
            assert!(it.item.parse::<usize>().unwrap() <= cfg.majority_items);
            *lens.entry(it.user.clone()).or_insert(0) += 1;
        }
        for u in &out.minority {
            assert!((5..=6).contains(&lens[u]));
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_interactions(&SynthConfig { min_len: 2, ..SynthConfig::default() }).is_err());
        assert!(generate_interactions(&SynthConfig { follow_prob: 1.5, ..SynthConfig::default() }).is_err());
    }
}
