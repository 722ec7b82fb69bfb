//! Batch-loss aggregation objectives.
//!
//! Every objective reduces a [`BatchLosses`] to a scalar that is linear in
//! the per-position losses once its data-dependent weights (CVaR's `q`, the
//! DRO distribution `omega`) are frozen. [`Aggregate`] therefore carries the
//! scalar together with `d value / d l_{u,j}`, which is exactly the seed the
//! model's backward pass needs.

pub mod oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::groups::{Axis, ItemFrequencyTable, Tier};
use crate::model::BatchLosses;

pub const NUM_GROUPS: usize = 3;

/// Scalar objective value plus its gradient w.r.t. every `l_{u,j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub value: f64,
    pub position_weights: Vec<Vec<f64>>,
}

impl Aggregate {
    /// `value = sum_{u,j} w_{u,j} * l_{u,j}`, summed in batch order.
    fn from_position_weights(b: &BatchLosses, position_weights: Vec<Vec<f64>>) -> Self {
        let value = b
            .per_position
            .iter()
            .zip(&position_weights)
            .map(|(l, w)| l.iter().zip(w).map(|(l, w)| l * w).sum::<f64>())
            .sum();
        Aggregate { value, position_weights }
    }

    fn from_user_weights(b: &BatchLosses, user_weights: &[f64]) -> Self {
        Self::from_position_weights(b, b.spread_user_weights(user_weights))
    }
}

fn require_batch(b: &BatchLosses) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(1.0 / b.len() as f64)
}

/// Mean of per-user losses.
pub fn erm_loss(b: &BatchLosses) -> Result<Aggregate> {
    let inv_b = require_batch(b)?;
    Ok(Aggregate::from_user_weights(b, &vec![inv_b; b.len()]))
}

/// Item weights `w(h) = sum_i f(i) / f(h)` and their logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemWeightTable {
    pub w: BTreeMap<u32, f64>,
    pub w_log: BTreeMap<u32, f64>,
}

impl ItemWeightTable {
    pub fn from_frequencies(freqs: &ItemFrequencyTable) -> Self {
        let total = freqs.total as f64;
        Self::from_weights(freqs.freq.iter().map(|(&i, &f)| (i, total / f as f64)))
    }

    pub fn from_weights(weights: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let w: BTreeMap<u32, f64> = weights.into_iter().collect();
        let w_log = w.iter().map(|(&i, &x)| (i, x.ln())).collect();
        ItemWeightTable { w, w_log }
    }
}

/// Class-balanced loss: each position weighted by the inverse frequency of
/// its target (or the log of that weight).
pub fn cb_loss(b: &BatchLosses, table: &ItemWeightTable, log_variant: bool) -> Result<Aggregate> {
    let inv_b = require_batch(b)?;
    let weights = if log_variant { &table.w_log } else { &table.w };
    let mut pw = Vec::with_capacity(b.len());
    for (targets, norm) in b.targets.iter().zip(&b.normalizers) {
        let row = targets
            .iter()
            .map(|&t| {
                if t == PAD {
                    return Ok(0.0);
                }
                let w = weights
                    .get(&t)
                    .ok_or_else(|| Error::Data(format!("target item {t} missing from the item weight table")))?;
                Ok(inv_b * w / norm)
            })
            .collect::<Result<Vec<f64>>>()?;
        pw.push(row);
    }
    Ok(Aggregate::from_position_weights(b, pw))
}

/// Group weights `w(g) = sum_g f(g) / f(g)` with `f(g)` the group's user count.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeightTable {
    pub sizes: [usize; NUM_GROUPS],
    pub w: [Option<f64>; NUM_GROUPS],
    pub w_log: [Option<f64>; NUM_GROUPS],
}

impl GroupWeightTable {
    pub fn from_labels(labels: &[Tier]) -> Self {
        let mut sizes = [0usize; NUM_GROUPS];
        for t in labels {
            sizes[t.index()] += 1;
        }
        Self::from_sizes(sizes)
    }

    pub fn from_sizes(sizes: [usize; NUM_GROUPS]) -> Self {
        let total: usize = sizes.iter().sum();
        let w = sizes.map(|s| (s > 0).then(|| total as f64 / s as f64));
        let w_log = w.map(|w| w.map(f64::ln));
        GroupWeightTable { sizes, w, w_log }
    }
}

fn label_of(labels: &[Tier], user: u32) -> Result<Tier> {
    labels
        .get(user as usize)
        .copied()
        .ok_or_else(|| Error::Data(format!("user {user} has no group label")))
}

/// Inverse-propensity weighting by group size.
pub fn ipw_loss(b: &BatchLosses, table: &GroupWeightTable, labels: &[Tier], log_variant: bool) -> Result<Aggregate> {
    let inv_b = require_batch(b)?;
    let weights = if log_variant { &table.w_log } else { &table.w };
    let uw = b
        .users
        .iter()
        .map(|&u| {
            let g = label_of(labels, u)?;
            let w = weights[g.index()].ok_or_else(|| Error::Data(format!("group {g:?} is empty in the weight table")))?;
            Ok(inv_b * w)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Aggregate::from_user_weights(b, &uw))
}

/// Distribution `q` attaining the CVaR supremum: the `floor(alpha B)`
/// largest losses get `1 / (alpha B)`, the next one the leftover mass.
/// Ties are broken by batch position.
pub fn cvar_weights(losses: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("CVaR alpha {alpha} outside (0, 1]")));
    }
    let n = losses.len();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let scaled = alpha * n as f64;
    let cap = 1.0 / scaled;
    let m = (scaled.floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut q = vec![0.0; n];
    for &i in &order[..m] {
        q[i] = cap;
    }
    if m < n {
        let rest = 1.0 - m as f64 * cap;
        if rest > 0.0 {
            q[order[m]] = rest;
        }
    }
    Ok(q)
}

/// Conditional value at risk of the per-user losses at level `alpha`.
pub fn cvar_loss(b: &BatchLosses, alpha: f64) -> Result<Aggregate> {
    let q = cvar_weights(&b.per_user, alpha)?;
    Ok(Aggregate::from_user_weights(b, &q))
}

/// Mean loss per group among the batch users; `None` for groups absent from the batch.
pub fn group_batch_losses(b: &BatchLosses, labels: &[Tier]) -> Result<[Option<f64>; NUM_GROUPS]> {
    let mut sum = [0.0; NUM_GROUPS];
    let mut count = [0usize; NUM_GROUPS];
    for (&u, &l) in b.users.iter().zip(&b.per_user) {
        let g = label_of(labels, u)?.index();
        sum[g] += l;
        count[g] += 1;
    }
    Ok(std::array::from_fn(|g| (count[g] > 0).then(|| sum[g] / count[g] as f64)))
}

/// How the streaming estimate is formed from the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamingRule {
    /// `L~_t = (1 - beta) L~_{t-1} + beta L_t`
    #[default]
    Ema,
    /// `L~_t = (1 - beta) L_{t-1} + beta L_t` with `L_{t-1}` the previous raw batch loss.
    Literal,
}

/// Group distribution maintained by GDRO and SDRO.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupWeights {
    pub omega: Vec<f64>,
    /// Streaming estimates `L~_g` (SDRO only).
    pub streaming: Vec<Option<f64>>,
    /// Last raw batch loss per group, used by the literal streaming rule.
    pub last_raw: Vec<Option<f64>>,
    pub t: u64,
}

impl GroupWeights {
    /// Uniform over the groups with at least one user; empty groups get
    /// weight 0 and keep it.
    pub fn for_sizes(sizes: &[usize]) -> Self {
        let live = sizes.iter().filter(|s| **s > 0).count().max(1);
        let mut state = Self::uniform(sizes.len());
        for (w, s) in state.omega.iter_mut().zip(sizes) {
            *w = if *s > 0 { 1.0 / live as f64 } else { 0.0 };
        }
        state
    }

    pub fn uniform(groups: usize) -> Self {
        GroupWeights {
            omega: vec![1.0 / groups as f64; groups],
            streaming: vec![None; groups],
            last_raw: vec![None; groups],
            t: 0,
        }
    }
}

/// Exponentiated-gradient ascent: `omega_g ∝ omega_g exp(eta L_g)`.
/// Absent groups (`None`) use `L_g = 0`; groups at weight exactly 0 stay there.
pub fn eg_update(state: &GroupWeights, group_losses: &[Option<f64>], eta: f64) -> Result<GroupWeights> {
    if group_losses.len() != state.omega.len() {
        return Err(Error::Data("group loss count does not match omega".into()));
    }
    if !eta.is_finite() {
        return Err(Error::Numeric(format!("non-finite step size {eta}")));
    }
    let exps: Vec<f64> = group_losses.iter().map(|l| eta * l.unwrap_or(0.0)).collect();
    if let Some(bad) = exps.iter().position(|e| !e.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss for group {bad}")));
    }
    let mut next = state.clone();
    next.t += 1;
    // A common shift cancels under normalisation.
    if exps.iter().all(|e| *e == exps[0]) {
        return Ok(next);
    }
    let max = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = state.omega.iter().zip(&exps).map(|(w, e)| w * (e - max).exp()).collect();
    let z: f64 = raw.iter().sum();
    next.omega = raw
        .iter()
        .zip(&state.omega)
        .map(|(r, w)| if *w == 0.0 { 0.0 } else { (r / z).max(f64::MIN_POSITIVE) })
        .collect();
    Ok(next)
}

/// Updates the streaming estimates from this batch and then takes an
/// [`eg_update`] step on them. Absent groups keep their estimate and use
/// `L = 0` in the step.
pub fn streaming_update(
    state: &GroupWeights,
    group_losses: &[Option<f64>],
    beta: f64,
    eta: f64,
    rule: StreamingRule,
) -> Result<GroupWeights> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("streaming beta {beta} outside (0, 1]")));
    }
    let mut streaming = state.streaming.clone();
    let mut last_raw = state.last_raw.clone();
    let mut step = vec![None; group_losses.len()];
    for (g, loss) in group_losses.iter().enumerate() {
        let Some(l) = *loss else { continue };
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for group {g}")));
        }
        let previous = match rule {
            StreamingRule::Ema => streaming[g],
            StreamingRule::Literal => last_raw[g],
        };
        let est = previous.map_or(l, |p| (1.0 - beta) * p + beta * l);
        streaming[g] = Some(est);
        last_raw[g] = Some(l);
        step[g] = Some(est);
    }
    let mut next = eg_update(state, &step, eta)?;
    next.streaming = streaming;
    next.last_raw = last_raw;
    Ok(next)
}

/// `sum_g omega_g L_g` over groups present in the batch; each user's loss is
/// weighted by `omega_g / |batch ∩ g|`.
pub fn gdro_loss(state: &GroupWeights, b: &BatchLosses, labels: &[Tier]) -> Result<Aggregate> {
    require_batch(b)?;
    let mut count = vec![0usize; state.omega.len()];
    let groups = b.users.iter().map(|&u| label_of(labels, u).map(Tier::index)).collect::<Result<Vec<usize>>>()?;
    for &g in &groups {
        count[g] += 1;
    }
    let uw: Vec<f64> = groups.iter().map(|&g| state.omega[g] / count[g] as f64).collect();
    Ok(Aggregate::from_user_weights(b, &uw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "ERM", alias = "erm")]
    Erm,
    #[serde(rename = "CB", alias = "cb")]
    Cb,
    #[serde(rename = "CBlog", alias = "cblog")]
    CbLog,
    #[serde(rename = "IPW", alias = "ipw")]
    Ipw,
    #[serde(rename = "IPWlog", alias = "ipwlog")]
    IpwLog,
    #[serde(rename = "GDRO", alias = "gdro")]
    Gdro,
    #[serde(rename = "SDRO", alias = "sdro")]
    Sdro,
    #[serde(rename = "CVaR", alias = "cvar")]
    Cvar,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Erm => "ERM",
            ObjectiveKind::Cb => "CB",
            ObjectiveKind::CbLog => "CBlog",
            ObjectiveKind::Ipw => "IPW",
            ObjectiveKind::IpwLog => "IPWlog",
            ObjectiveKind::Gdro => "GDRO",
            ObjectiveKind::Sdro => "SDRO",
            ObjectiveKind::Cvar => "CVaR",
        }
    }

    pub fn needs_groups(self) -> bool {
        matches!(self, ObjectiveKind::Ipw | ObjectiveKind::IpwLog | ObjectiveKind::Gdro | ObjectiveKind::Sdro)
    }

    pub fn is_dro(self) -> bool {
        matches!(self, ObjectiveKind::Gdro | ObjectiveKind::Sdro)
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown objective `{s}`")))
    }
}

fn default_alpha() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.01
}
fn default_beta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub group_axis: Option<Axis>,
    #[serde(default)]
    pub streaming: StreamingRule,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            alpha: default_alpha(),
            eta: default_eta(),
            beta: default_beta(),
            group_axis: None,
            streaming: StreamingRule::default(),
        }
    }

    pub fn with_axis(mut self, axis: Axis) -> Self {
        self.group_axis = Some(axis);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta {} must be positive", self.eta)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1]", self.beta)));
        }
        Ok(())
    }

    /// Display name, e.g. `GDRO_seq` when a group axis is pinned.
    pub fn method_name(&self) -> String {
        match (self.kind.needs_groups(), self.group_axis) {
            (true, Some(axis)) => format!("{}_{}", self.kind.name(), axis.name()),
            _ => self.kind.name().to_string(),
        }
    }
}

/// Result of one aggregation step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub aggregate: Aggregate,
    /// Per-group mean batch loss on the objective's axis (if any).
    pub group_losses: Option<[Option<f64>; NUM_GROUPS]>,
    /// Group distribution after this step's update (DRO objectives).
    pub omega: Option<Vec<f64>>,
}

/// An objective bound to its static tables and mutable DRO state.
#[derive(Debug, Clone)]
pub struct Objective {
    pub config: ObjectiveConfig,
    item_weights: Option<ItemWeightTable>,
    group_weights: Option<GroupWeightTable>,
    labels: Option<Vec<Tier>>,
    state: Option<GroupWeights>,
}

impl Objective {
    /// `labels` are the user labels on the objective's axis; required by IPW/GDRO/SDRO.
    pub fn new(config: ObjectiveConfig, item_weights: Option<ItemWeightTable>, labels: Option<Vec<Tier>>) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        if matches!(kind, ObjectiveKind::Cb | ObjectiveKind::CbLog) && item_weights.is_none() {
            return Err(Error::Config(format!("{} needs an item weight table", kind.name())));
        }
        if kind.needs_groups() && labels.is_none() {
            return Err(Error::Config(format!("{} needs group labels", kind.name())));
        }
        let group_weights = match kind {
            ObjectiveKind::Ipw | ObjectiveKind::IpwLog => labels.as_deref().map(GroupWeightTable::from_labels),
            _ => None,
        };
        let state = match (&labels, kind.is_dro()) {
            (Some(l), true) => Some(GroupWeights::for_sizes(&GroupWeightTable::from_labels(l).sizes)),
            _ => None,
        };
        Ok(Objective { config, item_weights, group_weights, labels, state })
    }

    pub fn state(&self) -> Option<&GroupWeights> {
        self.state.as_ref()
    }

    /// Aggregates one batch, updating the DRO distribution first where applicable.
    pub fn step(&mut self, b: &BatchLosses) -> Result<StepOutput> {
        let cfg = &self.config;
        let group_losses = match &self.labels {
            Some(l) => Some(group_batch_losses(b, l)?),
            None => None,
        };
        let aggregate = match cfg.kind {
            ObjectiveKind::Erm => erm_loss(b)?,
            ObjectiveKind::Cb | ObjectiveKind::CbLog => {
                cb_loss(b, self.item_weights.as_ref().unwrap(), cfg.kind == ObjectiveKind::CbLog)?
            }
            ObjectiveKind::Ipw | ObjectiveKind::IpwLog => ipw_loss(
                b,
                self.group_weights.as_ref().unwrap(),
                self.labels.as_deref().unwrap(),
                cfg.kind == ObjectiveKind::IpwLog,
            )?,
            ObjectiveKind::Cvar => cvar_loss(b, cfg.alpha)?,
            ObjectiveKind::Gdro | ObjectiveKind::Sdro => {
                let current = self.state.as_ref().unwrap();
                let losses = group_losses.unwrap();
                let next = if cfg.kind == ObjectiveKind::Gdro {
                    eg_update(current, &losses, cfg.eta)?
                } else {
                    streaming_update(current, &losses, cfg.beta, cfg.eta, cfg.streaming)?
                };
                let agg = gdro_loss(&next, b, self.labels.as_deref().unwrap())?;
                self.state = Some(next);
                agg
            }
        };
        Ok(StepOutput { aggregate, group_losses, omega: self.state.as_ref().map(|s| s.omega.clone()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Denominator;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn erm() {
        assert!(close(erm_loss(&BatchLosses::from_user_losses(&[1.0, 2.0, 3.0])).unwrap().value, 2.0));
        assert_eq!(erm_loss(&BatchLosses::from_user_losses(&[4.5])).unwrap().value, 4.5);
        assert_eq!(erm_loss(&BatchLosses::from_user_losses(&[0.0, 0.0])).unwrap().value, 0.0);
        assert!(erm_loss(&BatchLosses::from_user_losses(&[])).is_err());
    }

    #[test]
    fn cb_hand_evaluated() {
        // freq {a:3, b:1}: w(a) = 4/3, w(b) = 4; one user with both targets, normaliser 2.
        let freqs = ItemFrequencyTable { freq: BTreeMap::from([(1, 3), (2, 1)]), total: 4 };
        let table = ItemWeightTable::from_frequencies(&freqs);
        let b = BatchLosses::new(vec![0], vec![vec![1, 2]], vec![vec![1.0, 1.0]], Denominator::Valid);
        assert!(close(cb_loss(&b, &table, false).unwrap().value, 8.0 / 3.0));
    }

    #[test]
    fn cb_uniform_frequencies() {
        let freqs = ItemFrequencyTable { freq: (1..=4).map(|i| (i, 5)).collect(), total: 20 };
        let table = ItemWeightTable::from_frequencies(&freqs);
        let b = BatchLosses::new(vec![0, 1], vec![vec![1, 2], vec![0, 3]], vec![vec![0.5, 1.5], vec![0.0, 2.0]], Denominator::Valid);
        let erm = erm_loss(&b).unwrap().value;
        assert!(close(cb_loss(&b, &table, false).unwrap().value, 4.0 * erm));

        let e_table = ItemWeightTable::from_weights((1..=4).map(|i| (i, std::f64::consts::E)));
        assert_eq!(cb_loss(&b, &e_table, true).unwrap(), erm_loss(&b).unwrap());
    }

    #[test]
    fn cb_missing_target() {
        let table = ItemWeightTable::from_weights([(1, 2.0)]);
        let b = BatchLosses::new(vec![0], vec![vec![9]], vec![vec![1.0]], Denominator::Valid);
        assert!(cb_loss(&b, &table, false).is_err());
    }

    #[test]
    fn ipw() {
        let table = GroupWeightTable::from_sizes([10, 90, 0]);
        assert!(close(table.w[0].unwrap(), 10.0));
        let table = GroupWeightTable::from_sizes([25, 75, 0]);
        let labels = [Tier::Bottom, Tier::Middle];
        let b = BatchLosses::from_user_losses(&[1.0, 1.0]);
        assert!(close(ipw_loss(&b, &table, &labels, false).unwrap().value, 8.0 / 3.0));

        let single = GroupWeightTable::from_labels(&[Tier::Middle; 4]);
        let b = BatchLosses::from_user_losses(&[0.3, 1.7, 2.2]);
        assert_eq!(ipw_loss(&b, &single, &[Tier::Middle; 4], false).unwrap(), erm_loss(&b).unwrap());
        assert!(ipw_loss(&b, &single, &[Tier::Middle; 2], false).is_err());
    }

    #[test]
    fn cvar_examples() {
        let v = |l: &[f64], a: f64| cvar_loss(&BatchLosses::from_user_losses(l), a).unwrap().value;
        assert!(close(v(&[1.0, 2.0, 3.0, 4.0], 1.0), 2.5));
        assert!(close(v(&[4.0, 1.0, 3.0, 2.0], 0.5), 3.5));
        assert!(close(v(&[4.0, 3.0, 1.0, 2.0], 0.3), 4.0 / 1.2 + (1.0 - 1.0 / 1.2) * 3.0));
        assert!(cvar_weights(&[1.0], 0.0).is_err());
        assert!(cvar_weights(&[1.0], 1.5).is_err());
    }

    #[test]
    fn cvar_ties_follow_batch_position() {
        let q = cvar_weights(&[2.0, 5.0, 2.0, 2.0], 0.5).unwrap();
        assert_eq!(q, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn cvar_alpha_one_is_erm_exactly() {
        let b = BatchLosses::from_user_losses(&[0.1, 0.7, 0.2, 0.9, 0.3]);
        assert_eq!(cvar_loss(&b, 1.0).unwrap(), erm_loss(&b).unwrap());
    }

    #[test]
    fn eg_examples() {
        let s = GroupWeights::uniform(2);
        let eta = 0.5;
        let next = eg_update(&s, &[Some(std::f64::consts::LN_2 / eta), Some(0.0)], eta).unwrap();
        assert!(close(next.omega[0], 2.0 / 3.0) && close(next.omega[1], 1.0 / 3.0));
        let s = GroupWeights { omega: vec![0.2, 0.5, 0.3], ..GroupWeights::uniform(3) };
        assert_eq!(eg_update(&s, &[Some(1.0), Some(2.0), Some(3.0)], 0.0).unwrap().omega, s.omega);
        assert_eq!(eg_update(&s, &[Some(1.5); 3], 0.7).unwrap().omega, s.omega);
        assert!(eg_update(&s, &[Some(f64::NAN), Some(0.0), Some(0.0)], 0.1).is_err());
    }

    #[test]
    fn streaming_recurrence() {
        let mut s = GroupWeights::uniform(2);
        s.streaming = vec![Some(1.0), None];
        let next = streaming_update(&s, &[Some(3.0), None], 0.25, 0.1, StreamingRule::Ema).unwrap();
        assert!(close(next.streaming[0].unwrap(), 1.5));
        assert_eq!(next.streaming[1], None);

        // Literal rule mixes the previous raw loss, not the previous estimate.
        let mut s = GroupWeights::uniform(1);
        s.streaming = vec![Some(100.0)];
        s.last_raw = vec![Some(1.0)];
        let next = streaming_update(&s, &[Some(3.0)], 0.25, 0.1, StreamingRule::Literal).unwrap();
        assert!(close(next.streaming[0].unwrap(), 1.5));
    }

    #[test]
    fn streaming_constant_losses_are_a_fixed_point() {
        let mut s = GroupWeights::uniform(3);
        for _ in 0..5 {
            s = streaming_update(&s, &[Some(0.7), Some(1.1), Some(2.0)], 0.3, 0.05, StreamingRule::Ema).unwrap();
            assert_eq!(s.streaming, vec![Some(0.7), Some(1.1), Some(2.0)]);
        }
    }

    #[test]
    fn gdro_examples() {
        let labels = [Tier::Bottom, Tier::Middle, Tier::Middle];
        let b = BatchLosses::from_user_losses(&[1.0, 2.0, 4.0]);
        let s = GroupWeights { omega: vec![0.5, 0.5, 0.0], ..GroupWeights::uniform(3) };
        assert!(close(gdro_loss(&s, &b, &labels).unwrap().value, 2.0));

        let s = GroupWeights { omega: vec![2.0 / 3.0, 1.0 / 3.0, 0.0], ..GroupWeights::uniform(3) };
        let b = BatchLosses::from_user_losses(&[3.0, 0.0, 0.0]);
        assert!(close(gdro_loss(&s, &b, &labels).unwrap().value, 2.0));

        let one = GroupWeights { omega: vec![1.0], ..GroupWeights::uniform(1) };
        let b = BatchLosses::from_user_losses(&[0.4, 1.3]);
        assert_eq!(gdro_loss(&one, &b, &[Tier::Bottom; 2]).unwrap(), erm_loss(&b).unwrap());
    }

    #[test]
    fn empty_groups_stay_at_zero() {
        let s = GroupWeights::for_sizes(&[0, 5, 3]);
        assert_eq!(s.omega, vec![0.0, 0.5, 0.5]);
        let next = eg_update(&s, &[None, Some(1.0), Some(3.0)], 0.5).unwrap();
        assert_eq!(next.omega[0], 0.0);
        assert!(close(next.omega.iter().sum(), 1.0));

        let labels = vec![Tier::Middle; 4];
        let mut gdro = Objective::new(ObjectiveConfig::new(ObjectiveKind::Gdro), None, Some(labels.clone())).unwrap();
        let mut sdro = Objective::new(ObjectiveConfig::new(ObjectiveKind::Sdro), None, Some(labels)).unwrap();
        for losses in [[0.3, 2.0, 1.1, 0.7], [5.0, 0.1, 0.2, 0.9]] {
            let b = BatchLosses::from_user_losses(&losses);
            let erm = erm_loss(&b).unwrap();
            assert_eq!(gdro.step(&b).unwrap().aggregate, erm);
            assert_eq!(sdro.step(&b).unwrap().aggregate, erm);
        }
    }

    #[test]
    fn objective_requires_tables() {
        assert!(Objective::new(ObjectiveConfig::new(ObjectiveKind::Cb), None, None).is_err());
        assert!(Objective::new(ObjectiveConfig::new(ObjectiveKind::Gdro), None, None).is_err());
        assert!(Objective::new(ObjectiveConfig { alpha: 0.0, ..ObjectiveConfig::new(ObjectiveKind::Cvar) }, None, None).is_err());
    }

    #[test]
    fn method_names() {
        assert_eq!(ObjectiveConfig::new(ObjectiveKind::Sdro).with_axis(Axis::Seq).method_name(), "SDRO_seq");
        assert_eq!(ObjectiveConfig::new(ObjectiveKind::Cvar).with_axis(Axis::Seq).method_name(), "CVaR");
        assert_eq!("CBlog".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::CbLog);
        assert_eq!("gdro".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::Gdro);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn omega3() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01..1.0f64, 3).prop_map(|w| {
                let z: f64 = w.iter().sum();
                w.iter().map(|x| x / z).collect()
            })
        }

        fn group_losses() -> impl Strategy<Value = Vec<Option<f64>>> {
            prop::collection::vec(prop::option::weighted(0.8, 0.0..30.0f64), 3)
        }

        proptest! {
            #[test]
            fn eg_stays_on_simplex(omega in omega3(), losses in group_losses(), eta in 0.0..5.0f64) {
                let s = GroupWeights { omega, ..GroupWeights::uniform(3) };
                let next = eg_update(&s, &losses, eta).unwrap();
                prop_assert!((next.omega.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(next.omega.iter().all(|w| *w > 0.0));
            }

            #[test]
            fn eg_is_permutation_equivariant(omega in omega3(), losses in group_losses(), eta in 0.0..2.0f64) {
                let s = GroupWeights { omega: omega.clone(), ..GroupWeights::uniform(3) };
                let perm = [2usize, 0, 1];
                let ps = GroupWeights { omega: perm.iter().map(|&i| omega[i]).collect(), ..GroupWeights::uniform(3) };
                let pl: Vec<Option<f64>> = perm.iter().map(|&i| losses[i]).collect();
                let a = eg_update(&s, &losses, eta).unwrap();
                let b = eg_update(&ps, &pl, eta).unwrap();
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert!((b.omega[j] - a.omega[i]).abs() < 1e-12);
                }
            }

            #[test]
            fn sdro_beta_one_is_gdro(stream in prop::collection::vec(group_losses(), 1..20), eta in 0.001..1.0f64) {
                let mut g = GroupWeights::uniform(3);
                let mut s = GroupWeights::uniform(3);
                for losses in &stream {
                    g = eg_update(&g, losses, eta).unwrap();
                    s = streaming_update(&s, losses, 1.0, eta, StreamingRule::Ema).unwrap();
                    prop_assert_eq!(&g.omega, &s.omega);
                }
            }

            #[test]
            fn gdro_uniform_equal_groups_is_erm(losses in prop::collection::vec(0.0..10.0f64, 6)) {
                let labels = [Tier::Bottom, Tier::Middle, Tier::Top, Tier::Top, Tier::Middle, Tier::Bottom];
                let b = BatchLosses::from_user_losses(&losses);
                let v = gdro_loss(&GroupWeights::uniform(3), &b, &labels).unwrap().value;
                prop_assert!((v - erm_loss(&b).unwrap().value).abs() < 1e-12);
            }

            #[test]
            fn positively_homogeneous(losses in prop::collection::vec(0.0..10.0f64, 1..12), lambda in 0.1..10.0f64, alpha in 0.05..=1.0f64) {
                let n = losses.len();
                let labels: Vec<Tier> = (0..n).map(|i| Tier::ALL[i % 3]).collect();
                let items = ItemWeightTable::from_weights([(1, 2.5)]);
                let groups = GroupWeightTable::from_labels(&labels);
                let omega = GroupWeights { omega: vec![0.2, 0.3, 0.5], ..GroupWeights::uniform(3) };
                let scaled: Vec<f64> = losses.iter().map(|l| l * lambda).collect();
                let (b, bs) = (BatchLosses::from_user_losses(&losses), BatchLosses::from_user_losses(&scaled));
                let pairs = [
                    (erm_loss(&b).unwrap().value, erm_loss(&bs).unwrap().value),
                    (cb_loss(&b, &items, false).unwrap().value, cb_loss(&bs, &items, false).unwrap().value),
                    (ipw_loss(&b, &groups, &labels, true).unwrap().value, ipw_loss(&bs, &groups, &labels, true).unwrap().value),
                    (cvar_loss(&b, alpha).unwrap().value, cvar_loss(&bs, alpha).unwrap().value),
                    (gdro_loss(&omega, &b, &labels).unwrap().value, gdro_loss(&omega, &bs, &labels).unwrap().value),
                ];
                for (v, vs) in pairs {
                    prop_assert!((vs - lambda * v).abs() <= 1e-9 * vs.abs().max(1.0));
                }
            }

            #[test]
            fn weight_tables_are_at_least_one(freqs in prop::collection::vec(1u64..1000, 1..30), sizes in prop::collection::vec(0usize..100, 3)) {
                let table = ItemFrequencyTable {
                    total: freqs.iter().sum(),
                    freq: freqs.iter().enumerate().map(|(i, f)| (i as u32 + 1, *f)).collect(),
                };
                let w = ItemWeightTable::from_frequencies(&table);
                prop_assert!(w.w.values().all(|x| *x >= 1.0) && w.w_log.values().all(|x| *x >= 0.0));
                let g = GroupWeightTable::from_sizes([sizes[0], sizes[1], sizes[2]]);
                prop_assert!(g.w.iter().flatten().all(|x| *x >= 1.0) && g.w_log.iter().flatten().all(|x| *x >= 0.0));
            }
        }
    }
}
