//! JSON-lines episode traces.
//!
//! The first line is a [`TraceHeader`] with everything needed to rebuild the
//! episode; every following line is one [`RoundRecord`]. Replaying a trace
//! re-runs the recorded actions and checks that each regenerated record
//! serializes to the same line.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::episode::{Action, Episode, EpisodeConfig, Maps, StepEvents, StepOutcome, Termination};
use crate::error::{Error, Result};
use crate::field::{FieldSpec, GroundTruth};
use crate::geometry::Point;
use crate::planners::CandidatePlan;
use crate::roadmap::Roadmap;

pub const TRACE_FORMAT: &str = "maipp-trace/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub planner: String,
    pub seed: u64,
    pub config: EpisodeConfig,
    pub field: FieldSpec,
    /// One roadmap shared by all agents, or one per agent.
    pub roadmaps: Vec<Roadmap>,
}

impl TraceHeader {
    pub fn new(planner: &str, seed: u64, episode: &Episode) -> Self {
        let roadmaps = match episode.maps() {
            Maps::Shared(m) => vec![m.as_ref().clone()],
            Maps::PerAgent(v) => v.iter().map(|m| m.as_ref().clone()).collect(),
        };
        Self {
            format: TRACE_FORMAT.into(),
            planner: planner.into(),
            seed,
            config: episode.config().clone(),
            field: episode.truth().spec().clone(),
            roadmaps,
        }
    }

    pub fn maps(&self) -> Maps {
        if self.roadmaps.len() == 1 {
            Maps::Shared(Arc::new(self.roadmaps[0].clone()))
        } else {
            Maps::PerAgent(self.roadmaps.iter().cloned().map(Arc::new).collect())
        }
    }

    /// Fresh episode in the recorded initial state.
    pub fn rebuild(&self) -> Result<Episode> {
        let truth = Arc::new(GroundTruth::new(
            self.field.clone(),
            self.config.grid_resolution,
        )?);
        let (ep, _) = Episode::reset(truth, self.maps(), self.config.clone(), self.seed)?;
        Ok(ep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub actions: Vec<Option<Action>>,
    /// Positions at the end of the round.
    pub positions: Vec<Point>,
    pub rewards: Vec<f64>,
    /// Each agent's interest-belief trace at the end of the round.
    pub phi: Vec<f64>,
    pub team_phi: f64,
    pub remaining_budget: f64,
    pub groups: Vec<Vec<usize>>,
    pub events: Vec<StepEvents>,
    pub deadlocks: Vec<bool>,
    pub done: bool,
    pub termination: Option<Termination>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidatePlan>,
}

impl RoundRecord {
    /// Record of the round that `episode` has just completed.
    pub fn capture(episode: &Episode, actions: &[Option<Action>], outcome: &StepOutcome) -> Self {
        Self {
            round: episode.round() - 1,
            actions: actions.to_vec(),
            positions: episode.positions(),
            rewards: outcome.rewards.clone(),
            phi: episode
                .agents()
                .iter()
                .map(|a| a.interest.covariance_trace())
                .collect(),
            team_phi: episode.team_trace(),
            remaining_budget: episode.remaining_budget(),
            groups: outcome.groups.clone(),
            events: outcome.events.clone(),
            deadlocks: outcome.deadlocks.clone(),
            done: outcome.done,
            termination: outcome.termination,
            candidates: Vec::new(),
        }
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write_round(&mut self, record: &RoundRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub header: TraceHeader,
    pub rounds: Vec<RoundRecord>,
    /// Raw round lines, kept for byte-level comparison.
    pub lines: Vec<String>,
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Trace> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Config("empty trace".into()))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    if header.format != TRACE_FORMAT {
        return Err(Error::Config(format!(
            "unknown trace format {:?}",
            header.format
        )));
    }
    let mut rounds = Vec::new();
    let mut raw = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rounds.push(serde_json::from_str(&line)?);
        raw.push(line);
    }
    Ok(Trace {
        header,
        rounds,
        lines: raw,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub rounds: usize,
    pub final_team_phi: f64,
    pub termination: Option<Termination>,
}

/// Re-executes the recorded actions and checks every round matches.
pub fn replay(trace: &Trace) -> Result<ReplayReport> {
    let mut ep = trace.header.rebuild()?;
    for (i, (rec, line)) in trace.rounds.iter().zip(&trace.lines).enumerate() {
        let outcome = ep.step(&rec.actions)?;
        let mut again = RoundRecord::capture(&ep, &rec.actions, &outcome);
        again.candidates = rec.candidates.clone();
        let text = serde_json::to_string(&again)?;
        if &text != line {
            return Err(Error::Contract(format!("replay diverged at round {i}")));
        }
    }
    Ok(ReplayReport {
        rounds: trace.rounds.len(),
        final_team_phi: ep.team_trace(),
        termination: ep.termination(),
    })
}
