//! Staged experiment pipeline: prepare -> annotate -> train -> evaluate -> report.
//!
//! Each stage writes into its own directory under the output root together
//! with a `manifest.json` holding the input hashes, a config echo, the tool
//! version and wall-clock time. A stage whose input hash and outputs are
//! unchanged is skipped unless forced.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{DatasetSection, ExperimentConfig, GroupsSection, MethodSpec};
use crate::data::{build_sequences, core_filter, Dataset, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricReport};
use crate::groups::{annotate, item_frequencies, Axis, GroupAssignment, ItemFrequencyTable, Scheme};
use crate::model::ModelState;
use crate::objectives::ObjectiveKind;
use crate::report::{write_report, ReportFiles};
use crate::synth::{generate_interactions, write_ratings};
use crate::train::{sweep, train_run, write_run, SweepGrid, SweepResult, TrainData};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prepare,
    Annotate,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Prepare, Stage::Annotate, Stage::Train, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Annotate => "annotate",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Parses `prepare,annotate` style lists into canonical order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut stages = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<Vec<Stage>>>()?;
    if stages.is_empty() {
        return Err(Error::Config("no stages given".into()));
    }
    stages.sort();
    stages.dedup();
    Ok(stages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub input_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    /// Output file name -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

fn input_hash(stage: &str, inputs: &BTreeMap<String, String>, config: &serde_json::Value) -> Result<String> {
    let blob = serde_json::to_vec(&json!({ "stage": stage, "tool_version": TOOL_VERSION, "inputs": inputs, "config": config }))?;
    Ok(hex::encode(Sha256::digest(blob)))
}

fn up_to_date(dir: &Path, hash: &str) -> bool {
    let Ok(m) = Manifest::load(dir) else { return false };
    m.input_hash == hash && m.outputs.iter().all(|(name, sha)| file_sha256(&dir.join(name)).is_ok_and(|s| s == *sha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Runs `work` in `dir` unless its manifest already matches.
fn run_stage(
    dir: &Path,
    stage: &str,
    inputs: BTreeMap<String, String>,
    config: serde_json::Value,
    force: bool,
    work: impl FnOnce(&Path) -> Result<(Vec<String>, serde_json::Value)>,
) -> Result<StageStatus> {
    let hash = input_hash(stage, &inputs, &config)?;
    if !force && up_to_date(dir, &hash) {
        log::info!("{stage}: up-to-date ({})", dir.display());
        return Ok(StageStatus::UpToDate);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let start = Instant::now();
    let (files, details) = work(dir)?;
    let outputs = files
        .into_iter()
        .map(|f| file_sha256(&dir.join(&f)).map(|h| (f, h)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Manifest {
        stage: stage.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        input_hash: hash,
        inputs,
        config,
        outputs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        details,
    }
    .save(dir)?;
    log::info!("{stage}: done ({})", dir.display());
    Ok(StageStatus::Ran)
}

/// Output locations under one root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn prepare(&self) -> PathBuf {
        self.root.join("prepare")
    }
    pub fn annotate(&self) -> PathBuf {
        self.root.join("annotate")
    }
    pub fn groups_file(&self) -> PathBuf {
        self.annotate().join("groups.json")
    }
    pub fn train(&self, method: &str) -> PathBuf {
        self.root.join("train").join(method)
    }
    pub fn evaluate(&self, method: &str) -> PathBuf {
        self.root.join("evaluate").join(method)
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Loaded output of `prepare`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub hash: String,
    pub sequences: Vec<UserSequence>,
    pub frequencies: ItemFrequencyTable,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let dataset = Dataset::load(dir)?;
    let hash = dataset.content_hash();
    let sequences = build_sequences(&dataset)?;
    let frequencies = item_frequencies(&sequences)?;
    Ok(Prepared { dataset, hash, sequences, frequencies })
}

/// Reads, filters and stores a raw log. Returns the dataset hash.
fn prepare_dataset(ds: &DatasetSection, dir: &Path) -> Result<(Vec<String>, serde_json::Value)> {
    let (path, mut files) = match (&ds.path, &ds.synthetic) {
        (Some(p), _) => (p.clone(), vec![]),
        (None, Some(s)) => {
            let p = dir.join("ratings.dat");
            write_ratings(&p, &generate_interactions(s)?.interactions)?;
            (p, vec!["ratings.dat".to_string()])
        }
        (None, None) => return Err(Error::Config("dataset has neither path nor synthetic".into())),
    };
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let interactions = ds.kind.parse(BufReader::new(file))?;
    let dataset = core_filter(&interactions, ds.core_k)?;
    build_sequences(&dataset)?;
    let hash = dataset.save(dir)?;
    files.extend(["interactions.bin".to_string(), "index.json".to_string()]);
    let details = json!({
        "dataset_hash": hash,
        "raw_interactions": interactions.len(),
        "users": dataset.num_users(),
        "items": dataset.num_items(),
        "interactions": dataset.num_interactions(),
    });
    Ok((files, details))
}

fn raw_input(ds: &DatasetSection) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    if let Some(p) = &ds.path {
        if !p.exists() {
            return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
        }
        inputs.insert("raw_sha256".into(), file_sha256(p)?);
    }
    Ok(inputs)
}

fn dataset_hash(prepare_dir: &Path) -> Result<String> {
    let m = Manifest::load(prepare_dir)
        .map_err(|e| Error::Config(format!("prepared dataset missing under {}: {e}", prepare_dir.display())))?;
    m.details["dataset_hash"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Data("prepare manifest lacks dataset_hash".into()))
}

fn load_groups(path: &Path, dataset: &Dataset) -> Result<GroupAssignment> {
    if !path.exists() {
        return Err(Error::Config(format!("group file {} does not exist", path.display())));
    }
    GroupAssignment::load(path, dataset)
}

fn method_inputs(layout: &Layout) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset_hash".into(), dataset_hash(&layout.prepare())?);
    let groups = layout.groups_file();
    if !groups.exists() {
        return Err(Error::Config(format!("group file {} does not exist", groups.display())));
    }
    inputs.insert("groups_sha256".into(), file_sha256(&groups)?);
    Ok(inputs)
}

/// Trains (or sweeps) one method into `dir`.
fn train_method(
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    prepared: &Prepared,
    groups: &GroupAssignment,
    inputs: &BTreeMap<String, String>,
    dir: &Path,
) -> Result<(Vec<String>, serde_json::Value)> {
    let run = cfg.run_config(method, prepared.dataset.num_items());
    let data = TrainData { sequences: &prepared.sequences, groups: Some(groups), item_frequencies: &prepared.frequencies };
    let extra = serde_json::to_value(inputs)?;
    let files = vec!["best.ckpt".to_string(), "trace.csv".to_string(), "run.json".to_string()];
    match cfg.sweep.grid_for(method.kind, method.tune) {
        None => {
            let outcome = train_run(&run, &data)?;
            write_run(dir, &run, &outcome, extra)?;
            Ok((files, json!({ "best_epoch": outcome.best_epoch, "val_ndcg": outcome.val_ndcg })))
        }
        Some(grid) => {
            let result: SweepResult = sweep(&run, &grid, &data, &dir.join("sweep"), cfg.sweep.jobs, extra)?;
            let best = result.best();
            for f in &files {
                fs::copy(best.dir.join(f), dir.join(f)).map_err(|e| Error::io(dir.join(f), e))?;
            }
            Ok((files, json!({ "sweep": result, "selected": best.value })))
        }
    }
}

/// Evaluates a trained method and checks it was trained on this dataset.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    prepared: &Prepared,
    groups: Option<&GroupAssignment>,
    opts: &crate::eval::EvalOptions,
) -> Result<MetricReport> {
    if let Some(run_dir) = checkpoint.parent() {
        let run = run_dir.join("run.json");
        if run.exists() {
            let raw = fs::read(&run).map_err(|e| Error::io(&run, e))?;
            let v: serde_json::Value = serde_json::from_slice(&raw)?;
            if let Some(h) = v["inputs"]["dataset_hash"].as_str() {
                if h != prepared.hash {
                    return Err(Error::Data(format!(
                        "checkpoint was trained on dataset {h}, but the given dataset hashes to {}",
                        prepared.hash
                    )));
                }
            }
        }
    }
    let state = ModelState::load(checkpoint)?;
    if state.config.catalogue_size != prepared.dataset.num_items() {
        return Err(Error::Data("checkpoint catalogue size does not match the dataset".into()));
    }
    evaluate(&state, &prepared.sequences, groups, opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub target: String,
    pub status: StageStatus,
}

/// Runs the requested stages (in canonical order) for every configured method.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[Stage], force: bool) -> Result<Vec<StageReport>> {
    let layout = Layout::new(cfg.out_root());
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut out = Vec::new();
    for stage in stages {
        let wrap = |e: Error| Error::Context { stage: stage.name().to_string(), source: Box::new(e) };
        let reports = run_one(cfg, &layout, stage, force).map_err(wrap)?;
        out.extend(reports);
    }
    Ok(out)
}

fn run_one(cfg: &ExperimentConfig, layout: &Layout, stage: Stage, force: bool) -> Result<Vec<StageReport>> {
    let single = |target: &str, status| vec![StageReport { stage, target: target.to_string(), status }];
    match stage {
        Stage::Prepare => Ok(single("dataset", prepare_stage(&cfg.dataset, &layout.prepare(), force)?)),
        Stage::Annotate => Ok(single("groups", annotate_stage(&layout.prepare(), &cfg.groups, &layout.annotate(), force)?)),
        Stage::Train => {
            require_methods(cfg)?;
            let inputs = method_inputs(layout)?;
            let mut loaded: Option<(Prepared, GroupAssignment)> = None;
            let mut reports = Vec::new();
            for method in &cfg.objectives {
                let name = method.name();
                let run = cfg.run_config(method, 0);
                let grid = cfg.sweep.grid_for(method.kind, method.tune);
                let config = json!({ "run": run, "grid": grid });
                let status = run_stage(&layout.train(&name), "train", inputs.clone(), config, force, |dir| {
                    if loaded.is_none() {
                        let prepared = load_prepared(&layout.prepare())?;
                        let groups = load_groups(&layout.groups_file(), &prepared.dataset)?;
                        loaded = Some((prepared, groups));
                    }
                    let (prepared, groups) = loaded.as_ref().unwrap();
                    train_method(cfg, method, prepared, groups, &inputs, dir)
                })?;
                reports.push(StageReport { stage, target: name, status });
            }
            Ok(reports)
        }
        Stage::Evaluate => {
            require_methods(cfg)?;
            let mut reports = Vec::new();
            for method in &cfg.objectives {
                let name = method.name();
                let status = evaluate_stage(
                    &layout.train(&name).join("best.ckpt"),
                    &layout.prepare(),
                    Some(&layout.groups_file()),
                    &cfg.eval.options(),
                    &layout.evaluate(&name),
                    force,
                )?;
                reports.push(StageReport { stage, target: name, status });
            }
            Ok(reports)
        }
        Stage::Report => {
            require_methods(cfg)?;
            let runs: Vec<(String, PathBuf)> =
                cfg.objectives.iter().map(|m| (m.name(), layout.evaluate(&m.name()))).collect();
            Ok(single("report", report_stage(&runs, &cfg.eval.baseline, &layout.report(), force)?))
        }
    }
}

/// Parses, core-filters and stores the raw log into `dir`.
pub fn prepare_stage(ds: &DatasetSection, dir: &Path, force: bool) -> Result<StageStatus> {
    let config = json!({ "dataset": ds });
    run_stage(dir, "prepare", raw_input(ds)?, config, force, |d| prepare_dataset(ds, d))
}

/// Writes `groups.json` for the dataset prepared in `prepare_dir`.
pub fn annotate_stage(prepare_dir: &Path, groups: &GroupsSection, dir: &Path, force: bool) -> Result<StageStatus> {
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset_hash".to_string(), dataset_hash(prepare_dir)?);
    let config = json!({ "groups": groups });
    run_stage(dir, "annotate", inputs, config, force, |d| {
        let prepared = load_prepared(prepare_dir)?;
        let assignment = annotate(&prepared.sequences, &groups.annotate_options())?;
        assignment.save(&d.join("groups.json"), &prepared.dataset, &prepared.sequences)?;
        let mut summary = BTreeMap::new();
        for a in assignment.axes() {
            summary.insert(
                a,
                json!({
                    "sizes": assignment.group_sizes(a),
                    "usplit_percent": assignment.user_split(a),
                    "dsplit_percent": assignment.data_split(a, &prepared.sequences),
                }),
            );
        }
        Ok((vec!["groups.json".to_string()], json!({ "axes": summary })))
    })
}

/// Evaluates `checkpoint` into `dir/metrics.json`.
pub fn evaluate_stage(
    checkpoint: &Path,
    prepare_dir: &Path,
    groups_file: Option<&Path>,
    opts: &EvalOptions,
    dir: &Path,
    force: bool,
) -> Result<StageStatus> {
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset_hash".to_string(), dataset_hash(prepare_dir)?);
    inputs.insert("checkpoint_sha256".into(), file_sha256(checkpoint)?);
    if let Some(g) = groups_file {
        if !g.exists() {
            return Err(Error::Config(format!("group file {} does not exist", g.display())));
        }
        inputs.insert("groups_sha256".into(), file_sha256(g)?);
    }
    run_stage(dir, "evaluate", inputs, json!({ "eval": opts }), force, |d| {
        let prepared = load_prepared(prepare_dir)?;
        let groups = groups_file.map(|g| load_groups(g, &prepared.dataset)).transpose()?;
        let report = evaluate_checkpoint(checkpoint, &prepared, groups.as_ref(), opts)?;
        report.save(&d.join("metrics.json"))?;
        Ok((vec!["metrics.json".to_string()], json!({ "overall": report.overall, "groups": report.groups })))
    })
}

/// Builds the report bundle from evaluated runs (`name`, directory holding `metrics.json`).
pub fn report_stage(runs: &[(String, PathBuf)], baseline: &str, dir: &Path, force: bool) -> Result<StageStatus> {
    let mut inputs = BTreeMap::new();
    let mut reports = Vec::new();
    for (name, run) in runs {
        let path = run.join("metrics.json");
        if !path.exists() {
            return Err(Error::Config(format!("metrics {} do not exist", path.display())));
        }
        inputs.insert(name.clone(), file_sha256(&path)?);
        reports.push((name.clone(), MetricReport::load(&path)?));
    }
    let config = json!({ "baseline": baseline, "methods": runs.iter().map(|(m, _)| m).collect::<Vec<_>>() });
    run_stage(dir, "report", inputs, config, force, |d| {
        let files: ReportFiles = write_report(d, &reports, baseline)?;
        let names = [&files.table, &files.percent_csv, &files.percent_svg]
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        Ok((names, json!({ "rows": files.rows })))
    })
}

/// Sweeps every configured method the grid applies to into `<out>/sweep/<method>/`.
pub fn sweep_stage(cfg: &ExperimentConfig, grid: &SweepGrid, jobs: usize, force: bool) -> Result<Vec<StageReport>> {
    let layout = Layout::new(cfg.out_root());
    let inputs = method_inputs(&layout)?;
    let methods: Vec<&MethodSpec> = cfg.objectives.iter().filter(|m| grid.validate(m.kind).is_ok()).collect();
    if methods.is_empty() {
        return Err(Error::Config(format!("no configured objective can be swept over {:?}", grid.param)));
    }
    let prepared = load_prepared(&layout.prepare())?;
    let groups = load_groups(&layout.groups_file(), &prepared.dataset)?;
    let data = TrainData { sequences: &prepared.sequences, groups: Some(&groups), item_frequencies: &prepared.frequencies };
    let mut reports = Vec::new();
    for method in methods {
        let name = method.name();
        let run = cfg.run_config(method, prepared.dataset.num_items());
        let dir = layout.root.join("sweep").join(&name);
        let config = json!({ "run": run, "grid": grid });
        let status = run_stage(&dir, "sweep", inputs.clone(), config, force, |d| {
            let result = sweep(&run, grid, &data, d, jobs, serde_json::to_value(&inputs)?)?;
            Ok((vec!["sweep.json".to_string()], json!({ "selected": result.best().value })))
        })?;
        reports.push(StageReport { stage: Stage::Train, target: name, status });
    }
    Ok(reports)
}

fn require_methods(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.objectives.is_empty() {
        return Err(Error::Config("no [[objective]] entries configured".into()));
    }
    if !cfg.objectives.iter().any(|m| m.name() == cfg.eval.baseline) {
        return Err(Error::Config(format!("baseline `{}` is not among the configured objectives", cfg.eval.baseline)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableId {
    Poponly,
    Seqonly,
    Popseq,
}

impl std::str::FromStr for TableId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poponly" => Ok(TableId::Poponly),
            "seqonly" => Ok(TableId::Seqonly),
            "popseq" => Ok(TableId::Popseq),
            other => Err(Error::Config(format!("unknown table `{other}` (poponly, seqonly, popseq)"))),
        }
    }
}

impl TableId {
    pub fn name(self) -> &'static str {
        match self {
            TableId::Poponly => "poponly",
            TableId::Seqonly => "seqonly",
            TableId::Popseq => "popseq",
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            TableId::Poponly => Scheme::Pop,
            TableId::Seqonly => Scheme::Seq,
            TableId::Popseq => Scheme::Intersect,
        }
    }

    /// Method rows in table order.
    pub fn methods(self) -> Vec<MethodSpec> {
        use ObjectiveKind::*;
        match self {
            TableId::Poponly | TableId::Seqonly => {
                [Erm, Cb, CbLog, Ipw, IpwLog, Gdro, Sdro, Cvar].into_iter().map(|k| MethodSpec::new(k, None)).collect()
            }
            TableId::Popseq => {
                let mut v: Vec<MethodSpec> = [Erm, Cb, CbLog, Cvar].into_iter().map(|k| MethodSpec::new(k, None)).collect();
                for k in [Ipw, IpwLog, Gdro, Sdro] {
                    for axis in Axis::ALL {
                        v.push(MethodSpec::new(k, Some(axis)));
                    }
                }
                v
            }
        }
    }
}

/// Trains and evaluates every method of `table` and writes its report
/// bundle under `<out>/<table>/`.
pub fn reproduce_table(cfg: &ExperimentConfig, table: TableId, force: bool) -> Result<Vec<StageReport>> {
    let mut c = cfg.clone();
    c.groups.scheme = table.scheme();
    c.objectives = table.methods();
    c.eval.baseline = "ERM".into();
    c.out = Some(cfg.out_root().join(table.name()));
    c.validate()?;
    run_pipeline(&c, &Stage::ALL, force)
}
