//! Full-catalogue ranking evaluation, NDCG@K and paired significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{pad_truncate, Split, UserSequence, PAD};
use crate::error::{Error, Result};
use crate::groups::{Axis, GroupAssignment, Tier};
use crate::model::ModelState;

/// Pessimistic rank of `target` among items `1..scores.len()`: every other
/// item scoring at least as high is ranked above it. `scores[0]` (padding)
/// is ignored.
pub fn rank_target(scores: &[f64], target: u32) -> Result<usize> {
    let t = target as usize;
    if target == PAD || t >= scores.len() {
        return Err(Error::Data(format!("target {target} outside the catalogue")));
    }
    let st = scores[t];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite score for item {i}")));
        }
        if s > st || (s == st && i != t) {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub k: usize,
    pub split: Split,
    /// Drop history items (other than the target) from the candidate set.
    pub exclude_seen: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { k: 20, split: Split::Test, exclude_seen: false, batch_size: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub axis: Axis,
    pub group: String,
    pub size: usize,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub split: Split,
    pub exclude_seen: bool,
    pub overall: f64,
    pub groups: Vec<GroupMetric>,
    /// NDCG per dense user index.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_user: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<usize>,
    /// Group label per dense user index, for each axis.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub user_groups: BTreeMap<Axis, Vec<Tier>>,
}

impl MetricReport {
    /// Builds overall and per-group means from per-user values.
    pub fn from_per_user(
        per_user: Vec<f64>,
        ranks: Vec<usize>,
        assignment: Option<&GroupAssignment>,
        opts: &EvalOptions,
    ) -> Result<Self> {
        if per_user.is_empty() {
            return Err(Error::Data("no users to evaluate".into()));
        }
        let overall = per_user.iter().sum::<f64>() / per_user.len() as f64;
        let mut groups = Vec::new();
        let mut user_groups = BTreeMap::new();
        if let Some(a) = assignment {
            for axis in a.axes() {
                let labels = a.labels(axis).unwrap();
                if labels.len() != per_user.len() {
                    return Err(Error::Data(format!(
                        "group file labels {} users, evaluation has {}",
                        labels.len(),
                        per_user.len()
                    )));
                }
                for tier in Tier::ALL {
                    let members: Vec<f64> =
                        labels.iter().zip(&per_user).filter(|(t, _)| **t == tier).map(|(_, v)| *v).collect();
                    let ndcg =
                        if members.is_empty() { 0.0 } else { members.iter().sum::<f64>() / members.len() as f64 };
                    groups.push(GroupMetric { axis, group: tier.label(axis).to_string(), size: members.len(), ndcg });
                }
                user_groups.insert(axis, labels.to_vec());
            }
        }
        Ok(MetricReport {
            k: opts.k,
            split: opts.split,
            exclude_seen: opts.exclude_seen,
            overall,
            groups,
            per_user,
            ranks,
            user_groups,
        })
    }

    pub fn group(&self, axis: Axis, group: &str) -> Option<&GroupMetric> {
        self.groups.iter().find(|g| g.axis == axis && g.group == group)
    }

    /// Lowest group mean over all axes.
    pub fn worst_group(&self) -> Option<&GroupMetric> {
        self.groups.iter().filter(|g| g.size > 0).min_by(|a, b| a.ndcg.total_cmp(&b.ndcg))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }
}

/// Scores every user's split target against the full catalogue.
pub fn evaluate(
    state: &ModelState,
    sequences: &[UserSequence],
    assignment: Option<&GroupAssignment>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if opts.k == 0 || opts.batch_size == 0 {
        return Err(Error::Config("k and batch_size must be positive".into()));
    }
    if let Some(a) = assignment {
        if a.num_users() != sequences.len() {
            return Err(Error::Data(format!(
                "group file labels {} users, dataset has {}",
                a.num_users(),
                sequences.len()
            )));
        }
    }
    let l = state.config.max_len;
    let mut per_user = vec![0.0; sequences.len()];
    let mut ranks = vec![0; sequences.len()];
    for chunk in sequences.chunks(opts.batch_size) {
        let inputs: Vec<_> = chunk.iter().map(|s| pad_truncate(s.eval_input(opts.split), l)).collect();
        let scores = state.score_next(&inputs)?;
        for (seq, mut s) in chunk.iter().zip(scores) {
            let target = seq.eval_target(opts.split);
            if opts.exclude_seen {
                let seen: BTreeSet<u32> = seq.eval_input(opts.split).iter().copied().collect();
                for i in seen {
                    if i != target {
                        s[i as usize] = f64::NEG_INFINITY;
                    }
                }
                // Excluded items must not count as ties or trip the finiteness check.
                let floor = s.iter().skip(1).filter(|v| v.is_finite()).cloned().fold(f64::INFINITY, f64::min);
                let below = floor - 1.0;
                s.iter_mut().skip(1).filter(|v| **v == f64::NEG_INFINITY).for_each(|v| *v = below);
            }
            let rank = rank_target(&s, target)?;
            ranks[seq.user as usize] = rank;
            per_user[seq.user as usize] = ndcg_at_k(rank, opts.k);
        }
    }
    MetricReport::from_per_user(per_user, ranks, assignment, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n: usize,
    /// Differences had zero variance.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() != b.len() {
        return Err(Error::Data("paired samples differ in length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Data("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(SignificanceResult { t_statistic: t, p_value: p, significant: p < 0.05, n, degenerate: true });
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let p = student_t_two_sided(t, df);
    Ok(SignificanceResult { t_statistic: t, p_value: p, significant: p < 0.05, n, degenerate: false })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// One cell of the percentage-increase table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercentRow {
    pub method: String,
    /// Axis name, or `all` for the overall row.
    pub axis: String,
    pub group: String,
    pub baseline_value: f64,
    pub method_value: f64,
    /// `None` when the baseline mean is 0.
    pub pct_increase: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
}

fn member_values(report: &MetricReport, members: &[usize]) -> Vec<f64> {
    members.iter().map(|&u| report.per_user[u]).collect()
}

/// Per-method, per-group `100 (m - m_base) / m_base` with paired t-tests
/// over the group's users. Groups come from the baseline's user labels;
/// methods are emitted in the map's order.
pub fn percent_increase_report(reports: &BTreeMap<String, MetricReport>, baseline: &str) -> Result<Vec<PercentRow>> {
    let base = reports
        .get(baseline)
        .ok_or_else(|| Error::Config(format!("baseline `{baseline}` missing from the reports")))?;
    if base.per_user.is_empty() {
        return Err(Error::Data(format!("baseline `{baseline}` has no per-user values")));
    }
    let mut cells: Vec<(String, String, Vec<usize>)> = vec![("all".into(), "overall".into(), (0..base.per_user.len()).collect())];
    for (axis, labels) in &base.user_groups {
        for tier in Tier::ALL {
            let members = labels.iter().enumerate().filter(|(_, t)| **t == tier).map(|(u, _)| u).collect();
            cells.push((axis.name().into(), tier.label(*axis).into(), members));
        }
    }
    let mut rows = Vec::new();
    for (method, report) in reports {
        if report.per_user.len() != base.per_user.len() || report.user_groups != base.user_groups {
            return Err(Error::Data(format!("`{method}` was evaluated on a different user set")));
        }
        for (axis, group, members) in &cells {
            if members.is_empty() {
                continue;
            }
            let m = member_values(report, members);
            let b = member_values(base, members);
            let mv = m.iter().sum::<f64>() / m.len() as f64;
            let bv = b.iter().sum::<f64>() / b.len() as f64;
            let pct = (bv != 0.0).then(|| 100.0 * (mv - bv) / bv);
            let sig = if members.len() >= 2 { Some(paired_t_test(&m, &b)?) } else { None };
            rows.push(PercentRow {
                method: method.clone(),
                axis: axis.clone(),
                group: group.clone(),
                baseline_value: bv,
                method_value: mv,
                pct_increase: pct,
                p_value: sig.map(|s| s.p_value),
                significant: sig.is_some_and(|s| s.significant),
            });
        }
    }
    Ok(rows)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v}"))
}

pub fn percent_rows_csv(rows: &[PercentRow]) -> String {
    let mut out = String::from("method,axis,group,baseline_value,method_value,pct_increase,p_value,significant\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.axis,
            r.group,
            r.baseline_value,
            r.method_value,
            opt_cell(r.pct_increase),
            opt_cell(r.p_value),
            r.significant
        );
    }
    out
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart, one panel per group axis, one bar per non-baseline method.
pub fn percent_rows_svg(rows: &[PercentRow], baseline: &str) -> String {
    let axes: Vec<&str> = {
        let mut seen = Vec::new();
        for r in rows.iter().filter(|r| r.axis != "all") {
            if !seen.contains(&r.axis.as_str()) {
                seen.push(r.axis.as_str());
            }
        }
        if seen.is_empty() {
            vec!["all"]
        } else {
            seen
        }
    };
    let mut methods: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.method != baseline) {
        if !methods.contains(&r.method.as_str()) {
            methods.push(r.method.as_str());
        }
    }
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.pct_increase).collect();
    let top = vals.iter().cloned().fold(1.0f64, f64::max);
    let bottom = vals.iter().cloned().fold(-1.0f64, f64::min);
    let span = top - bottom;

    let (panel_w, panel_h, margin) = (420.0, 300.0, 50.0);
    let width = axes.len() as f64 * (panel_w + margin) + margin;
    let height = panel_h + 2.0 * margin + 20.0 * methods.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<desc>Percentage increase in NDCG relative to {}</desc>"#, xml_escape(baseline));
    for (pi, axis) in axes.iter().enumerate() {
        let x0 = margin + pi as f64 * (panel_w + margin);
        let y_of = |v: f64| margin + (top - v) / span * panel_h;
        let _ = writeln!(svg, r#"<g class="panel" data-axis="{axis}">"#);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-weight="bold">{axis}</text>"#, x0, margin - 20.0);
        let zero = y_of(0.0);
        let _ = writeln!(svg, r#"<line x1="{x0}" y1="{zero}" x2="{}" y2="{zero}" stroke="black"/>"#, x0 + panel_w);
        let groups: Vec<&str> = {
            let mut g = Vec::new();
            for r in rows.iter().filter(|r| r.axis == *axis) {
                if !g.contains(&r.group.as_str()) {
                    g.push(r.group.as_str());
                }
            }
            g
        };
        let slot = panel_w / groups.len().max(1) as f64;
        let bar_w = slot * 0.8 / methods.len().max(1) as f64;
        for (gi, group) in groups.iter().enumerate() {
            let gx = x0 + gi as f64 * slot;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                gx + slot / 2.0,
                margin + panel_h + 15.0,
                xml_escape(group)
            );
            for (mi, method) in methods.iter().enumerate() {
                let Some(r) = rows.iter().find(|r| r.axis == *axis && r.group == *group && r.method == *method) else {
                    continue;
                };
                let Some(v) = r.pct_increase else { continue };
                let (y, h) = if v >= 0.0 { (y_of(v), zero - y_of(v)) } else { (zero, y_of(v) - zero) };
                let x = gx + slot * 0.1 + mi as f64 * bar_w;
                let star = if r.significant { "*" } else { "" };
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{}" data-method="{}" data-group="{}" data-value="{v}"><title>{} {}: {v:.2}%{star}</title></rect>"#,
                    PALETTE[mi % PALETTE.len()],
                    xml_escape(method),
                    xml_escape(group),
                    xml_escape(method),
                    xml_escape(group)
                );
            }
        }
        let _ = writeln!(svg, "</g>");
    }
    for (mi, method) in methods.iter().enumerate() {
        let y = margin + panel_h + 35.0 + 20.0 * mi as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{margin}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            PALETTE[mi % PALETTE.len()],
            margin + 18.0,
            y,
            xml_escape(method)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
