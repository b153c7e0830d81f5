//! Batch harness: instances, trials, budgets and communication ranges.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{Action, CommRange, Episode, EpisodeConfig, Maps, Termination};
use crate::error::{Error, Result};
use crate::field::{generate_field_spec, FieldSpec, GenerationConfig, GroundTruth};
use crate::geometry::Point;
use crate::planners::{build_planner, Planner, PlannerConfig, PlannerKind, SgaRrtPlanner};
use crate::roadmap::{build_prm, Roadmap};
use crate::seed;
use crate::trace::{RoundRecord, TraceHeader, TraceWriter};

const INSTANCE_TAG: u64 = 0x1157;
const TRIAL_TAG: u64 = 0x7121;
const MAX_INSTANCE_ATTEMPTS: u64 = 64;

/// How a planner is exposed to the risk field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    /// Plans with the risk belief.
    Aware,
    /// Ignores risk; risky roadmap nodes are removed beforehand.
    Stripped,
    /// Ignores risk entirely.
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub label: String,
    pub planner: PlannerConfig,
    pub risk_mode: RiskMode,
}

impl RosterEntry {
    pub fn new(label: &str, kind: PlannerKind, risk_mode: RiskMode) -> Self {
        Self {
            label: label.into(),
            planner: PlannerConfig::with_kind(kind),
            risk_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub instances: usize,
    pub trials: usize,
    pub budgets: Vec<f64>,
    pub comm_ranges: Vec<CommRange>,
    pub roster: Vec<RosterEntry>,
    pub base_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub roadmap_nodes: usize,
    pub roadmap_k: usize,
    pub episode: EpisodeConfig,
    pub generation: GenerationConfig,
    /// Write one trace file per trial under `output_dir/traces`.
    pub write_traces: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            instances: 30,
            trials: 10,
            budgets: vec![2.0, 3.0, 4.0, 5.0],
            comm_ranges: vec![
                CommRange::Limited(0.3),
                CommRange::Limited(0.6),
                CommRange::Global,
            ],
            roster: vec![
                RosterEntry::new("ti", PlannerKind::TiSampling, RiskMode::Aware),
                RosterEntry::new("greedy", PlannerKind::Greedy, RiskMode::Stripped),
                RosterEntry::new("sga_rrt", PlannerKind::SgaRrt, RiskMode::Stripped),
            ],
            base_seed: 0,
            output_dir: None,
            roadmap_nodes: 200,
            roadmap_k: 20,
            episode: EpisodeConfig::default(),
            generation: GenerationConfig::default(),
            write_traces: false,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.trials == 0 {
            return Err(Error::Config(
                "instances and trials must be positive".into(),
            ));
        }
        if self.budgets.is_empty() || self.comm_ranges.is_empty() || self.roster.is_empty() {
            return Err(Error::Config(
                "budgets, ranges and roster must be non-empty".into(),
            ));
        }
        if self.budgets.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("budgets must be positive".into()));
        }
        let mut labels: Vec<&str> = self.roster.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.roster.len() {
            return Err(Error::Config("roster labels must be unique".into()));
        }
        for r in &self.roster {
            r.planner.validate()?;
            if r.planner.kind == PlannerKind::External {
                return Err(Error::Config(
                    "external planners cannot run in batch".into(),
                ));
            }
        }
        self.generation.validate()?;
        let mut cfg = self.episode.clone();
        cfg.team_budget = self.budgets[0];
        cfg.comm_range = self.comm_ranges[0];
        cfg.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("invalid plan file: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn trial_seed(&self, instance: usize, trial: usize) -> u64 {
        seed::derive(&[self.base_seed, TRIAL_TAG, instance as u64, trial as u64])
    }

    fn needs_stripped(&self) -> bool {
        self.roster
            .iter()
            .any(|r| r.risk_mode == RiskMode::Stripped)
    }
}

/// One generated world: field, shared start and roadmap.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: usize,
    pub seed: u64,
    pub attempts: u64,
    pub truth: Arc<GroundTruth>,
    pub roadmap: Arc<Roadmap>,
    pub stripped: Option<Arc<Roadmap>>,
}

#[derive(Serialize)]
struct InstanceFixture<'a> {
    id: usize,
    seed: u64,
    field: &'a FieldSpec,
    roadmap: &'a Roadmap,
    #[serde(skip_serializing_if = "Option::is_none")]
    stripped: Option<&'a Roadmap>,
}

impl Instance {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&InstanceFixture {
            id: self.id,
            seed: self.seed,
            field: self.truth.spec(),
            roadmap: &self.roadmap,
            stripped: self.stripped.as_deref(),
        })?)
    }
}

/// Removes roadmap nodes whose true risk reaches `threshold`, then repairs
/// connectivity. The start node is always kept. Fails when no remaining node
/// carries interest at or above `interest_floor`.
pub fn strip_risky_nodes(
    map: &Roadmap,
    truth: &GroundTruth,
    threshold: f64,
    interest_floor: f64,
) -> Result<Roadmap> {
    let remove: Vec<bool> = map
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, p)| i != map.start() && truth.risk_at(p) >= threshold)
        .collect();
    if !remove.iter().any(|&r| r) {
        return Ok(map.clone());
    }
    let (out, _) = map.without_nodes(&remove);
    if out.len() < 2 {
        return Err(Error::InstanceRejected(
            "stripping left fewer than two nodes".into(),
        ));
    }
    if !out
        .nodes()
        .iter()
        .any(|p| truth.interest_at(p) >= interest_floor)
    {
        return Err(Error::InstanceRejected(
            "stripping removed every node with interest".into(),
        ));
    }
    Ok(out)
}

pub fn generate_instance(plan: &ExperimentPlan, id: usize) -> Result<Instance> {
    let threshold = plan.episode.risk_threshold;
    let mut last = None;
    for attempt in 0..MAX_INSTANCE_ATTEMPTS {
        let s = seed::derive(&[plan.base_seed, INSTANCE_TAG, id as u64, attempt]);
        let spec = generate_field_spec(s, &plan.generation)?;
        let truth = GroundTruth::new(spec, plan.episode.grid_resolution)?;
        let mut rng = seed::rng(seed::derive(&[s, 1]));
        let mut start = None;
        for _ in 0..1000 {
            let p = Point::new(rng.random::<f64>(), rng.random::<f64>());
            if truth.risk_at(&p) < threshold {
                start = Some(p);
                break;
            }
        }
        let Some(start) = start else {
            last = Some(Error::InstanceRejected("no safe start position".into()));
            continue;
        };
        let roadmap = build_prm(
            seed::derive(&[s, 2]),
            plan.roadmap_nodes,
            plan.roadmap_k,
            start,
        )?;
        let stripped = if plan.needs_stripped() {
            match strip_risky_nodes(&roadmap, &truth, threshold, plan.episode.interest_threshold) {
                Ok(m) => Some(Arc::new(m)),
                Err(e @ Error::InstanceRejected(_)) => {
                    last = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        return Ok(Instance {
            id,
            seed: s,
            attempts: attempt + 1,
            truth: Arc::new(truth),
            roadmap: Arc::new(roadmap),
            stripped,
        });
    }
    Err(last.unwrap_or_else(|| Error::InstanceRejected(format!("instance {id}"))))
}

/// Summary of one finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub final_trace: f64,
    pub phi_series: Vec<f64>,
    pub rounds: usize,
    pub decisions: usize,
    pub deadlock_steps: usize,
    pub path_length: f64,
    pub termination: Option<Termination>,
}

/// Drives `episode` to termination, calling `on_round` after every step.
pub fn run_episode(
    episode: &mut Episode,
    planner: &mut dyn Planner,
    mut on_round: impl FnMut(&Episode, &[Option<Action>], &crate::episode::StepOutcome) -> Result<()>,
) -> Result<EpisodeSummary> {
    let mut phi_series = vec![episode.team_trace()];
    while !episode.is_done() {
        let actions = planner.plan_round(episode)?;
        let outcome = episode.step(&actions)?;
        planner.observe_outcome(episode, &outcome)?;
        on_round(episode, &actions, &outcome)?;
        phi_series.push(episode.team_trace());
    }
    let (decisions, deadlock_steps) = episode.decision_counts();
    Ok(EpisodeSummary {
        final_trace: episode.team_trace(),
        phi_series,
        rounds: episode.round(),
        decisions,
        deadlock_steps,
        path_length: episode.agents().iter().map(|a| a.path_length).sum(),
        termination: episode.termination(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub instance: usize,
    pub trial: usize,
    pub planner: String,
    pub budget: f64,
    pub range: String,
    /// Final trace of the pooled team belief; absent when the trial failed.
    pub final_trace: Option<f64>,
    pub steps: usize,
    pub phi: Vec<f64>,
    pub path_length: f64,
    pub decisions: usize,
    pub deadlock_steps: usize,
    /// Sites measured while the measuring agent's risk UCB there, as known
    /// when the move was chosen, was at or above the threshold. Deadlock
    /// unmasks are excluded.
    pub risk_sites: usize,
    /// Same count using each agent's belief right after the measurement.
    pub risk_sites_after: usize,
    pub measurements: usize,
    pub wall_time_ms: u64,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

impl TrialRecord {
    fn sort_key(&self) -> (String, u64, String, usize, usize) {
        (
            self.planner.clone(),
            self.budget.to_bits(),
            self.range.clone(),
            self.instance,
            self.trial,
        )
    }
}

/// Everything needed to run one trial.
#[derive(Clone, Debug)]
pub struct TrialSpec<'a> {
    pub instance: &'a Instance,
    pub trial: usize,
    pub entry: &'a RosterEntry,
    pub budget: f64,
    pub range: CommRange,
}

pub fn episode_config(plan: &ExperimentPlan, spec: &TrialSpec<'_>) -> EpisodeConfig {
    let mut cfg = plan.episode.clone();
    cfg.team_budget = spec.budget;
    cfg.comm_range = spec.range;
    if spec.entry.risk_mode != RiskMode::Aware {
        cfg.risk_enabled = false;
        cfg.hard_risk = false;
    }
    cfg
}

/// Builds the episode and planner for one trial.
pub fn prepare_trial(
    plan: &ExperimentPlan,
    spec: &TrialSpec<'_>,
) -> Result<(Episode, Box<dyn Planner + Send>, u64)> {
    let trial_seed = plan.trial_seed(spec.instance.id, spec.trial);
    let cfg = episode_config(plan, spec);
    let map = match (spec.entry.risk_mode, &spec.instance.stripped) {
        (RiskMode::Stripped, Some(m)) => m.clone(),
        (RiskMode::Stripped, None) => {
            return Err(Error::Config("stripped roadmap missing".into()));
        }
        _ => spec.instance.roadmap.clone(),
    };
    let (episode, _) = Episode::reset(
        spec.instance.truth.clone(),
        Maps::Shared(map),
        cfg.clone(),
        seed::derive(&[trial_seed, 1]),
    )?;
    let mut pc = spec.entry.planner.clone();
    pc.seed = seed::derive(&[trial_seed, 2]);
    let planner: Box<dyn Planner + Send> = match (pc.kind, spec.entry.risk_mode) {
        (PlannerKind::SgaRrt, RiskMode::Stripped) => Box::new(
            SgaRrtPlanner::new(pc).avoiding(spec.instance.truth.clone(), cfg.risk_threshold),
        ),
        _ => build_planner(&pc)?,
    };
    Ok((episode, planner, seed::derive(&[trial_seed, 1])))
}

fn trace_path(dir: &Path, spec: &TrialSpec<'_>) -> PathBuf {
    dir.join("traces").join(format!(
        "{}_b{}_r{}_i{}_t{}.jsonl",
        spec.entry.label,
        spec.budget,
        spec.range.label(),
        spec.instance.id,
        spec.trial
    ))
}

pub fn run_trial(plan: &ExperimentPlan, spec: &TrialSpec<'_>) -> TrialRecord {
    let started = Instant::now();
    let mut record = TrialRecord {
        instance: spec.instance.id,
        trial: spec.trial,
        planner: spec.entry.label.clone(),
        budget: spec.budget,
        range: spec.range.label(),
        final_trace: None,
        steps: 0,
        phi: vec![],
        path_length: 0.0,
        decisions: 0,
        deadlock_steps: 0,
        risk_sites: 0,
        risk_sites_after: 0,
        measurements: 0,
        wall_time_ms: 0,
        termination: None,
        error: None,
    };
    let result = (|| -> Result<(EpisodeSummary, Episode)> {
        let (mut episode, mut planner, ep_seed) = prepare_trial(plan, spec)?;
        let mut writer = match (&plan.output_dir, plan.write_traces) {
            (Some(dir), true) => {
                let path = trace_path(dir, spec);
                let file = BufWriter::new(fs::File::create(path)?);
                let header = TraceHeader::new(&spec.entry.label, ep_seed, &episode);
                Some(TraceWriter::new(file, &header)?)
            }
            _ => None,
        };
        let summary = run_episode(&mut episode, planner.as_mut(), |ep, actions, outcome| {
            if let Some(w) = writer.as_mut() {
                w.write_round(&RoundRecord::capture(ep, actions, outcome))?;
            }
            Ok(())
        })?;
        if let Some(w) = writer {
            w.finish()?;
        }
        Ok((summary, episode))
    })();
    match result {
        Ok((s, episode)) => {
            let th = episode.config().risk_threshold;
            record.final_trace = Some(s.final_trace);
            record.steps = s.rounds;
            record.phi = s.phi_series;
            record.path_length = s.path_length;
            record.decisions = s.decisions;
            record.deadlock_steps = s.deadlock_steps;
            record.measurements = episode.measurements().len();
            let sites = episode.measurements().iter().filter(|m| !m.deadlock);
            record.risk_sites = sites.clone().filter(|m| m.planned_risk_ucb >= th).count();
            record.risk_sites_after = sites.filter(|m| m.risk_ucb >= th).count();
            record.termination = s.termination;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record.wall_time_ms = started.elapsed().as_millis() as u64;
    record
}

/// Aggregated cell of the result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub planner: String,
    pub budget: f64,
    pub range: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when `n == 1` and the std is reported as 0 by convention.
    pub single: bool,
}

/// Mean and sample standard deviation of the final trace per
/// (planner, budget, range) cell. Failed trials are skipped.
pub fn aggregate(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut sorted: Vec<&TrialRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let mut cells: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(String, u64, String)> = Vec::new();
    for r in sorted {
        let key = (r.planner.clone(), r.budget.to_bits(), r.range.clone());
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = cells.entry(key).or_default();
        if let Some(v) = r.final_trace {
            entry.push(v);
        }
    }
    let mut out = Vec::new();
    for key in order {
        let values = &cells[&key];
        if values.is_empty() {
            warn!(
                "cell {} / {} / {} has no successful trials",
                key.0,
                f64::from_bits(key.1),
                key.2
            );
            continue;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        out.push(CellSummary {
            planner: key.0,
            budget: f64::from_bits(key.1),
            range: key.2,
            mean,
            std,
            n,
            single: n == 1,
        });
    }
    out
}

pub fn write_summary_csv<W: Write>(cells: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["planner", "budget", "range", "mean", "std", "n"])?;
    for c in cells {
        w.write_record([
            c.planner.clone(),
            c.budget.to_string(),
            c.range.clone(),
            format!("{:.6}", c.mean),
            format!("{:.6}", c.std),
            c.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records<W: Write>(records: &[TrialRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<TrialRecord>,
    pub cells: Vec<CellSummary>,
    pub failed_instances: Vec<(usize, String)>,
}

impl RunResult {
    pub fn errored(&self) -> bool {
        !self.failed_instances.is_empty() || self.records.iter().any(|r| r.error.is_some())
    }

    pub fn csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_summary_csv(&self.cells, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Runs every (instance, trial, planner, budget, range) combination. Trials
/// run in parallel; results are sorted before aggregation so the output does
/// not depend on scheduling. Writes `results.csv` and `records.jsonl` when
/// the plan names an output directory.
pub fn run_plan(plan: &ExperimentPlan) -> Result<RunResult> {
    plan.validate()?;
    if let Some(dir) = &plan.output_dir {
        fs::create_dir_all(dir)?;
        if plan.write_traces {
            fs::create_dir_all(dir.join("traces"))?;
        }
    }
    let generated: Vec<Result<Instance>> = (0..plan.instances)
        .into_par_iter()
        .map(|i| generate_instance(plan, i))
        .collect();
    let mut instances = Vec::new();
    let mut failed_instances = Vec::new();
    for (i, inst) in generated.into_iter().enumerate() {
        match inst {
            Ok(inst) => instances.push(inst),
            Err(e) => failed_instances.push((i, e.to_string())),
        }
    }
    let mut specs = Vec::new();
    for inst in &instances {
        for trial in 0..plan.trials {
            for entry in &plan.roster {
                for &budget in &plan.budgets {
                    for &range in &plan.comm_ranges {
                        specs.push(TrialSpec {
                            instance: inst,
                            trial,
                            entry,
                            budget,
                            range,
                        });
                    }
                }
            }
        }
    }
    let mut records: Vec<TrialRecord> = specs.par_iter().map(|s| run_trial(plan, s)).collect();
    records.sort_by_key(|r| r.sort_key());
    let cells = aggregate(&records);
    if let Some(dir) = &plan.output_dir {
        write_summary_csv(
            &cells,
            BufWriter::new(fs::File::create(dir.join("results.csv"))?),
        )?;
        write_records(
            &records,
            BufWriter::new(fs::File::create(dir.join("records.jsonl"))?),
        )?;
    }
    Ok(RunResult {
        records,
        cells,
        failed_instances,
    })
}
