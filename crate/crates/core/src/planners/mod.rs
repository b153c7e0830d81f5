//! Planners that drive an [`Episode`] one decision round at a time.

use serde::{Deserialize, Serialize};

use crate::episode::{Action, Episode, Observation, StepOutcome};
use crate::error::{Error, Result};
use crate::geometry::Point;

mod external;
mod greedy;
mod rrt;
mod sga;
mod ti;

pub use external::ExternalPlanner;
pub use greedy::{greedy_target, interest_targets, plan_greedy, GreedyPlanner};
pub use rrt::{sample_rrt_candidates, RrtParams};
pub use sga::{plan_sga_round, truncate_polyline, SgaRrtPlanner};
pub use ti::{plan_ti, TiDecision, TiPlanner};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    SgaRrt,
    Greedy,
    TiSampling,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub kind: PlannerKind,
    /// Accepted RRT path lengths `[a, b]`.
    pub rrt_length_range: (f64, f64),
    pub rrt_step: f64,
    pub rrt_max_iterations: usize,
    pub sga_candidates: usize,
    /// Length of the selected RRT path executed before replanning.
    pub execute_segment: f64,
    pub ti_num_candidates: usize,
    pub ti_trajectory_nodes: usize,
    /// Multiplies the interest UCB in TI neighbour weights.
    pub info_weight: f64,
    /// Discount applied through `1 - intent_weight * fused_intent`.
    pub intent_weight: f64,
    /// Discount applied through `max(0, 1 - risk_weight * risk_ucb)`.
    pub risk_weight: f64,
    pub use_intent: bool,
    /// Greedy skips interest cells whose variance is already below this.
    pub greedy_variance_floor: f64,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            kind: PlannerKind::TiSampling,
            rrt_length_range: (0.9, 1.0),
            rrt_step: 0.05,
            rrt_max_iterations: 1500,
            sga_candidates: 16,
            execute_segment: 0.2,
            ti_num_candidates: 8,
            ti_trajectory_nodes: 5,
            info_weight: 1.0,
            intent_weight: 0.9,
            risk_weight: 0.5,
            use_intent: true,
            greedy_variance_floor: 0.05,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.rrt_length_range;
        if !(0.0 < a && a < b) {
            return Err(Error::Config(format!(
                "rrt_length_range ({a}, {b}) needs 0 < a < b"
            )));
        }
        if self.ti_num_candidates == 0 || self.ti_trajectory_nodes == 0 || self.sga_candidates == 0
        {
            return Err(Error::Config("candidate counts must be at least 1".into()));
        }
        if !(self.rrt_step > 0.0) || !(self.execute_segment > 0.0) {
            return Err(Error::Config(
                "rrt_step and execute_segment must be positive".into(),
            ));
        }
        if self.intent_weight < 0.0 || self.risk_weight < 0.0 || self.info_weight <= 0.0 {
            return Err(Error::Config("invalid scoring weights".into()));
        }
        Ok(())
    }

    pub fn with_kind(kind: PlannerKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }
}

/// A candidate route and its predicted score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePlan {
    /// Roadmap node ids, when the plan lives on the roadmap.
    pub nodes: Vec<usize>,
    pub points: Vec<Point>,
    pub score: f64,
    pub planner: PlannerKind,
}

pub trait Planner {
    fn name(&self) -> String;

    /// Chooses each agent's action for the next round. May publish intents.
    fn plan_round(&mut self, episode: &mut Episode) -> Result<Vec<Option<Action>>>;

    /// Called with the result of every step.
    fn observe_outcome(&mut self, _episode: &Episode, _outcome: &StepOutcome) -> Result<()> {
        Ok(())
    }
}

/// Least risky selectable neighbour, lowest id on ties.
pub fn fallback_action(obs: &Observation) -> Option<usize> {
    obs.neighbors
        .iter()
        .zip(&obs.mask)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .min_by(|&a, &b| obs.risk[a].total_cmp(&obs.risk[b]).then(a.cmp(&b)))
}

pub fn build_planner(config: &PlannerConfig) -> Result<Box<dyn Planner + Send>> {
    config.validate()?;
    Ok(match config.kind {
        PlannerKind::SgaRrt => Box::new(SgaRrtPlanner::new(config.clone())),
        PlannerKind::Greedy => Box::new(GreedyPlanner::new(config.clone())),
        PlannerKind::TiSampling => Box::new(TiPlanner::new(config.clone())),
        PlannerKind::External => {
            return Err(Error::Config(
                "external planners need a bridge connection".into(),
            ))
        }
    })
}
