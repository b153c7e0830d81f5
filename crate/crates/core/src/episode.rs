//! Shared-budget multi-agent episode engine.
//!
//! Decisions are taken in synchronous rounds. Within a round agents commit in
//! id order, so later agents see earlier commitments in their masks (node
//! collisions and the remaining team budget). Motion between decisions is
//! simulated continuously at unit speed; every `measurement_interval` of
//! travel an agent samples both fields at its position and the sample is
//! shared with the agents inside its communication group at that instant.

use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::field::{FieldKind, GroundTruth};
use crate::geometry::{measurement_sites, polyline_length, Point};
use crate::gp::{GpBelief, KernelParams, QueryGrid};
use crate::intent::{fuse_intents, IntentDistribution};
use crate::roadmap::{feasibility_mask, FeasibilityMask, MaskQuery, Roadmap};
use crate::seed::{self, Rng};

const BUDGET_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CommRange {
    Global,
    Limited(f64),
}

impl CommRange {
    pub fn label(&self) -> String {
        match self {
            CommRange::Global => "global".into(),
            CommRange::Limited(r) => format!("{r}"),
        }
    }
}

impl Serialize for CommRange {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CommRange::Global => s.serialize_str("global"),
            CommRange::Limited(r) => s.serialize_f64(*r),
        }
    }
}

impl<'de> Deserialize<'de> for CommRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) if r > 0.0 => Ok(CommRange::Limited(r)),
            Raw::Num(r) => Err(serde::de::Error::custom(format!(
                "communication range must be positive, got {r}"
            ))),
            Raw::Str(s) if s == "global" => Ok(CommRange::Global),
            Raw::Str(s) => s
                .parse::<f64>()
                .ok()
                .filter(|r| *r > 0.0)
                .map(CommRange::Limited)
                .ok_or_else(|| serde::de::Error::custom(format!("bad range {s:?}"))),
        }
    }
}

impl std::str::FromStr for CommRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(CommRange::Global);
        }
        match s.parse::<f64>() {
            Ok(r) if r > 0.0 => Ok(CommRange::Limited(r)),
            _ => Err(Error::Config(format!("bad communication range {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Every agent starts at the roadmap's start node.
    Shared,
    /// Each agent starts at a uniformly drawn roadmap node.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Penalties {
    pub backtrack: f64,
    pub collision: f64,
    pub overflow: f64,
    /// Charged per measurement site whose risk UCB reaches the threshold.
    pub risk: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            backtrack: 0.1,
            collision: 0.2,
            overflow: 1.0,
            risk: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub num_agents: usize,
    pub team_budget: f64,
    pub measurement_interval: f64,
    pub comm_range: CommRange,
    pub risk_enabled: bool,
    pub risk_threshold: f64,
    pub hard_risk: bool,
    pub interest_threshold: f64,
    pub beta_interest: f64,
    pub beta_risk: f64,
    pub penalties: Penalties,
    pub lambda_term: f64,
    pub backtrack_window: usize,
    pub mask_overflow: bool,
    pub mask_collisions: bool,
    pub start_mode: StartMode,
    pub kernel: KernelParams,
    /// Kernel of the risk belief; the interest kernel when unset.
    pub risk_kernel: Option<KernelParams>,
    pub grid_resolution: usize,
    pub max_rounds: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            num_agents: 3,
            team_budget: 3.0,
            measurement_interval: 0.2,
            comm_range: CommRange::Global,
            risk_enabled: true,
            risk_threshold: 0.7,
            hard_risk: false,
            interest_threshold: 0.4,
            beta_interest: 1.0,
            beta_risk: 1.0,
            penalties: Penalties::default(),
            lambda_term: 1.0 / 900.0,
            backtrack_window: 3,
            mask_overflow: true,
            mask_collisions: true,
            start_mode: StartMode::Shared,
            kernel: KernelParams::default(),
            risk_kernel: Some(KernelParams {
                signal_variance: 0.1,
                ..KernelParams::default()
            }),
            grid_resolution: 30,
            max_rounds: 10_000,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.penalties;
        if self.num_agents == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        if !(self.team_budget > 0.0) || !(self.measurement_interval > 0.0) {
            return Err(Error::Config(
                "team_budget and measurement_interval must be positive".into(),
            ));
        }
        if [
            p.backtrack,
            p.collision,
            p.overflow,
            p.risk,
            self.lambda_term,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("penalties must be non-negative".into()));
        }
        if !(self.beta_interest > 0.0) || !(self.beta_risk >= 0.0) {
            return Err(Error::Config("invalid confidence parameters".into()));
        }
        if let CommRange::Limited(r) = self.comm_range {
            if !(r > 0.0) {
                return Err(Error::Config("communication range must be positive".into()));
            }
        }
        if let Some(k) = &self.risk_kernel {
            k.validate()?;
        }
        self.kernel.validate()
    }

    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            penalties: self.penalties,
            lambda_term: self.lambda_term,
            risk_enabled: self.risk_enabled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardParams {
    pub penalties: Penalties,
    pub lambda_term: f64,
    pub risk_enabled: bool,
}

impl Default for RewardParams {
    fn default() -> Self {
        EpisodeConfig::default().reward_params()
    }
}

/// Penalty-bearing events of one agent in one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub backtrack: bool,
    pub collision: bool,
    pub overflow: bool,
    pub risk_violations: usize,
}

pub fn reward_for_step(
    params: &RewardParams,
    phi_prev: f64,
    phi_now: f64,
    events: &StepEvents,
    terminal: bool,
) -> f64 {
    let info = if phi_prev > 0.0 {
        ((phi_prev - phi_now) / phi_prev).max(0.0)
    } else {
        0.0
    };
    let p = &params.penalties;
    let mut penalty = 0.0;
    if events.backtrack {
        penalty += p.backtrack;
    }
    if events.collision {
        penalty += p.collision;
    }
    if events.overflow {
        penalty += p.overflow;
    }
    if params.risk_enabled {
        penalty += p.risk * events.risk_violations as f64;
    }
    let term = if terminal {
        params.lambda_term * phi_now
    } else {
        0.0
    };
    info - penalty - term
}

/// Groups agents into connected components of the proximity graph.
/// Groups are ordered by their smallest member.
pub fn communication_partition(positions: &[Point], range: CommRange) -> Vec<Vec<usize>> {
    let n = positions.len();
    let r2 = match range {
        CommRange::Global => return vec![(0..n).collect()],
        CommRange::Limited(r) => r * r,
    };
    let mut label: Vec<usize> = (0..n).collect();
    fn root(label: &mut [usize], mut i: usize) -> usize {
        while label[i] != i {
            label[i] = label[label[i]];
            i = label[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if positions[i].dist_sq(&positions[j]) <= r2 {
                let (a, b) = (root(&mut label, i), root(&mut label, j));
                let (lo, hi) = (a.min(b), a.max(b));
                label[hi] = lo;
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut label, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

fn group_of(groups: &[Vec<usize>], agent: usize) -> &[usize] {
    groups
        .iter()
        .find(|g| g.contains(&agent))
        .map(|g| g.as_slice())
        .unwrap_or(&[])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Move along the roadmap edge to this neighbour.
    Node(usize),
    /// Follow a free-space polyline starting at the agent's position.
    Path(Vec<Point>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BudgetExhausted,
    Overflow,
    RoundLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub agent: usize,
    pub round: usize,
    pub time: f64,
    pub position: Point,
    pub interest: f64,
    pub risk: f64,
    /// Risk UCB at the site from the measuring agent's belief at the end of
    /// the round.
    pub risk_ucb: f64,
    /// Risk UCB at the site from the measuring agent's belief when the round
    /// was decided.
    pub planned_risk_ucb: f64,
    /// Taken while following an edge released by the deadlock rule.
    pub deadlock: bool,
}

#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: usize,
    pub node: Option<usize>,
    pub position: Point,
    /// Executed waypoints, starting with the start position.
    pub trajectory: Vec<Point>,
    /// Roadmap nodes visited, in order.
    pub visited: Vec<usize>,
    pub path_length: f64,
    pub since_measurement: f64,
    pub interest: GpBelief,
    pub risk: GpBelief,
    pub intent: Option<IntentDistribution>,
}

impl AgentState {
    /// Last `window` distinct nodes before the current one.
    pub fn recent_nodes(&self, window: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let cur = self.node;
        for &v in self.visited.iter().rev() {
            if Some(v) == cur || out.contains(&v) {
                continue;
            }
            out.push(v);
            if out.len() == window {
                break;
            }
        }
        out
    }
}

/// What an agent sees when deciding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: usize,
    pub round: usize,
    /// Interest graph node attributes `(mean, std, fused intent)`.
    pub interest: Vec<[f64; 3]>,
    /// Risk graph node attribute: `mean + beta * std`.
    pub risk: Vec<f64>,
    pub current_node: Option<usize>,
    pub position: Point,
    pub remaining_budget: f64,
    pub budget_fraction: f64,
    pub trajectory_tail: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub mask: Vec<bool>,
    pub deadlock_unmask: Option<usize>,
}

impl Observation {
    pub fn feasibility(&self) -> FeasibilityMask {
        FeasibilityMask {
            neighbors: self.neighbors.clone(),
            feasible: self.mask.clone(),
            deadlock_unmask: self.deadlock_unmask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub events: Vec<StepEvents>,
    pub done: bool,
    pub termination: Option<Termination>,
    /// Groups at the start of the round.
    pub groups: Vec<Vec<usize>>,
    pub deadlocks: Vec<bool>,
    pub measurements: usize,
}

/// Roadmaps available to the agents: one shared graph or one per agent.
#[derive(Clone, Debug)]
pub enum Maps {
    Shared(Arc<Roadmap>),
    PerAgent(Vec<Arc<Roadmap>>),
}

impl Maps {
    pub fn for_agent(&self, agent: usize) -> &Arc<Roadmap> {
        match self {
            Maps::Shared(m) => m,
            Maps::PerAgent(v) => &v[agent],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    config: EpisodeConfig,
    truth: Arc<GroundTruth>,
    maps: Maps,
    agents: Vec<AgentState>,
    team: GpBelief,
    remaining: f64,
    round: usize,
    time: f64,
    done: bool,
    termination: Option<Termination>,
    rng: Rng,
    log: Vec<MeasurementRecord>,
    decisions: usize,
    deadlock_steps: usize,
}

struct Move {
    agent: usize,
    polyline: Vec<Point>,
    length: f64,
    target: Option<usize>,
    deadlock: bool,
}

impl Episode {
    pub fn reset(
        truth: Arc<GroundTruth>,
        maps: Maps,
        config: EpisodeConfig,
        seed: u64,
    ) -> Result<(Episode, Vec<Observation>)> {
        config.validate()?;
        let m = config.num_agents;
        if let Maps::PerAgent(v) = &maps {
            if v.len() != m {
                return Err(Error::Config(format!(
                    "{} roadmaps for {m} agents",
                    v.len()
                )));
            }
        }
        let grid = Arc::new(QueryGrid::new(config.grid_resolution)?);
        let empty = GpBelief::new(config.kernel, grid.clone())?;
        let empty_risk = GpBelief::new(config.risk_kernel.unwrap_or(config.kernel), grid)?;
        let mut rng = seed::rng(seed);
        let mut agents = Vec::with_capacity(m);
        for id in 0..m {
            let map = maps.for_agent(id);
            let node = match config.start_mode {
                StartMode::Shared => map.start(),
                StartMode::Uniform => rand::Rng::random_range(&mut rng, 0..map.len()),
            };
            let position = map.node(node);
            agents.push(AgentState {
                id,
                node: Some(node),
                position,
                trajectory: vec![position],
                visited: vec![node],
                path_length: 0.0,
                since_measurement: 0.0,
                interest: empty.clone(),
                risk: empty_risk.clone(),
                intent: None,
            });
        }
        let ep = Episode {
            remaining: config.team_budget,
            config,
            truth,
            maps,
            agents,
            team: empty,
            round: 0,
            time: 0.0,
            done: false,
            termination: None,
            rng,
            log: Vec::new(),
            decisions: 0,
            deadlock_steps: 0,
        };
        let obs = (0..m)
            .map(|i| ep.observe(i, &[]))
            .collect::<Result<Vec<_>>>()?;
        Ok((ep, obs))
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn truth(&self) -> &Arc<GroundTruth> {
        &self.truth
    }

    pub fn maps(&self) -> &Maps {
        &self.maps
    }

    pub fn map(&self, agent: usize) -> &Arc<Roadmap> {
        self.maps.for_agent(agent)
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentState {
        &self.agents[i]
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn remaining_budget(&self) -> f64 {
        self.remaining
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    /// Pooled belief over every measurement taken by the team.
    pub fn team_belief(&self) -> &GpBelief {
        &self.team
    }

    pub fn team_trace(&self) -> f64 {
        self.team.covariance_trace()
    }

    pub fn measurements(&self) -> &[MeasurementRecord] {
        &self.log
    }

    /// Decisions taken so far and how many of them used a deadlock release.
    pub fn decision_counts(&self) -> (usize, usize) {
        (self.decisions, self.deadlock_steps)
    }

    pub fn positions(&self) -> Vec<Point> {
        self.agents.iter().map(|a| a.position).collect()
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        communication_partition(&self.positions(), self.config.comm_range)
    }

    /// Teammates whose intents reach `agent` this round.
    pub fn received_intents(&self, agent: usize) -> Vec<IntentDistribution> {
        let groups = self.groups();
        group_of(&groups, agent)
            .iter()
            .filter(|&&j| j != agent)
            .filter_map(|&j| self.agents[j].intent.clone())
            .collect()
    }

    /// Publishes an agent's intent for teammates deciding after it.
    pub fn set_intent(&mut self, agent: usize, intent: IntentDistribution) {
        self.agents[agent].intent = Some(intent);
    }

    fn committed(&self, upto: usize, partial: &[Option<Action>]) -> (f64, Vec<Point>) {
        let mut cost = 0.0;
        let mut occupied = Vec::new();
        for (j, act) in partial.iter().enumerate().take(upto) {
            match act {
                Some(Action::Node(v)) => {
                    if let Some(u) = self.agents[j].node {
                        let map = self.map(j);
                        cost += map.edge_cost(u, *v);
                        occupied.push(map.node(*v));
                    }
                }
                Some(Action::Path(p)) => cost += polyline_length(p),
                None => {}
            }
        }
        (cost, occupied)
    }

    /// Risk UCB per roadmap node from the agent's risk belief.
    pub fn node_risk_ucb(&self, agent: usize) -> Vec<f64> {
        let beta = self.config.beta_risk;
        self.agents[agent]
            .risk
            .predict(self.map(agent).nodes())
            .into_iter()
            .map(|(m, v)| m + beta * v.sqrt())
            .collect()
    }

    /// Node risk with each neighbour of `current` raised to the highest risk
    /// UCB over the measurement sites the agent would take on the way there.
    fn edge_risk(&self, agent: usize, current: usize, risk: &[f64]) -> Vec<f64> {
        let a = &self.agents[agent];
        let map = self.map(agent);
        let beta = self.config.beta_risk;
        let mut out = risk.to_vec();
        for &v in map.neighbors(current) {
            let (sites, _) = measurement_sites(
                &[a.position, map.node(v)],
                a.since_measurement,
                self.config.measurement_interval,
            );
            let pts: Vec<Point> = sites.into_iter().map(|s| s.1.clamp_workspace()).collect();
            for (m, var) in a.risk.predict(&pts) {
                out[v] = out[v].max(m + beta * var.sqrt());
            }
        }
        out
    }

    /// Mask for `agent` given the actions already committed by lower ids.
    pub fn mask(&self, agent: usize, partial: &[Option<Action>]) -> Result<FeasibilityMask> {
        let risk = self.node_risk_ucb(agent);
        self.mask_with(agent, partial, &risk)
    }

    fn mask_with(
        &self,
        agent: usize,
        partial: &[Option<Action>],
        risk: &[f64],
    ) -> Result<FeasibilityMask> {
        let a = &self.agents[agent];
        let Some(current) = a.node else {
            return Ok(FeasibilityMask {
                neighbors: vec![],
                feasible: vec![],
                deadlock_unmask: None,
            });
        };
        let (cost, occupied) = self.committed(agent, partial);
        let remaining = if self.done {
            0.0
        } else {
            (self.remaining - cost).max(0.0)
        };
        let hard = self.config.hard_risk && self.config.risk_enabled;
        let edge_risk;
        let risk = if hard {
            edge_risk = self.edge_risk(agent, current, risk);
            &edge_risk
        } else {
            risk
        };
        Ok(feasibility_mask(
            self.map(agent),
            &MaskQuery {
                current,
                remaining_budget: remaining,
                occupied: &occupied,
                risk_ucb: Some(risk),
                risk_threshold: self.config.risk_threshold,
                hard_risk: self.config.hard_risk && self.config.risk_enabled,
                mask_overflow: self.config.mask_overflow,
                mask_collisions: self.config.mask_collisions,
            },
        ))
    }

    /// Observation of `agent` given commitments of lower-id agents.
    pub fn observe(&self, agent: usize, partial: &[Option<Action>]) -> Result<Observation> {
        let a = &self.agents[agent];
        let map = self.map(agent);
        let nodes = map.nodes();
        let fused = fuse_intents(&self.received_intents(agent), nodes);
        let interest = a
            .interest
            .predict(nodes)
            .into_iter()
            .zip(&fused.values)
            .map(|((m, v), f)| [m, v.sqrt(), *f])
            .collect();
        let risk = self.node_risk_ucb(agent);
        let mask = self.mask_with(agent, partial, &risk)?;
        let (cost, _) = self.committed(agent, partial);
        let remaining = (self.remaining - cost).max(0.0);
        let tail_start = a
            .visited
            .len()
            .saturating_sub(self.config.backtrack_window + 1);
        Ok(Observation {
            agent,
            round: self.round,
            interest,
            risk,
            current_node: a.node,
            position: a.position,
            remaining_budget: remaining,
            budget_fraction: remaining / self.config.team_budget,
            trajectory_tail: a.visited[tail_start..].to_vec(),
            neighbors: mask.neighbors,
            mask: mask.feasible,
            deadlock_unmask: mask.deadlock_unmask,
        })
    }

    /// Whether any agent could still move under the remaining budget.
    fn can_continue(&self) -> bool {
        if self.remaining <= BUDGET_EPS {
            return false;
        }
        self.agents.iter().any(|a| match a.node {
            Some(u) => {
                let map = self.map(a.id);
                map.neighbors(u)
                    .iter()
                    .any(|&v| map.edge_cost(u, v) <= self.remaining + BUDGET_EPS)
            }
            None => true,
        })
    }

    /// Advances one synchronous decision round.
    pub fn step(&mut self, actions: &[Option<Action>]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("episode already terminated".into()));
        }
        let m = self.agents.len();
        if actions.len() != m {
            return Err(Error::Contract(format!(
                "expected {m} actions, got {}",
                actions.len()
            )));
        }
        let groups = self.groups();
        let phi_prev: Vec<f64> = self
            .agents
            .iter()
            .map(|a| a.interest.covariance_trace())
            .collect();
        let mut events = vec![StepEvents::default(); m];
        let mut moves: Vec<Move> = Vec::new();
        let mut deadlocks = vec![false; m];
        let mut overflow = false;
        let mut targets: Vec<Point> = Vec::new();

        for i in 0..m {
            let mask = self.mask(i, actions)?;
            let (cost_before, _) = self.committed(i, actions);
            let remaining = self.remaining - cost_before;
            match &actions[i] {
                None => {
                    if mask.any() {
                        return Err(Error::Contract(format!(
                            "agent {i} idled with feasible actions"
                        )));
                    }
                }
                Some(Action::Node(v)) => {
                    let a = &self.agents[i];
                    let Some(u) = a.node else {
                        return Err(Error::Contract(format!("agent {i} is off the roadmap")));
                    };
                    if !mask.allows(*v) {
                        return Err(Error::Contract(format!(
                            "agent {i} chose masked node {v} from {u}"
                        )));
                    }
                    let map = self.map(i);
                    let target = map.node(*v);
                    let length = map.edge_cost(u, *v);
                    self.decisions += 1;
                    if mask.deadlock_unmask == Some(*v) {
                        deadlocks[i] = true;
                        self.deadlock_steps += 1;
                    }
                    if a.recent_nodes(self.config.backtrack_window).contains(v) {
                        events[i].backtrack = true;
                    }
                    if targets.iter().any(|p| p.dist_sq(&target) < 1e-24) {
                        events[i].collision = true;
                    }
                    targets.push(target);
                    if length > remaining + BUDGET_EPS {
                        events[i].overflow = true;
                        overflow = true;
                        continue;
                    }
                    moves.push(Move {
                        agent: i,
                        polyline: vec![a.position, target],
                        length,
                        target: Some(*v),
                        deadlock: deadlocks[i],
                    });
                }
                Some(Action::Path(points)) => {
                    let a = &self.agents[i];
                    if points.len() < 2 || points[0].dist(&a.position) > 1e-9 {
                        return Err(Error::Contract(format!(
                            "agent {i} path must start at its position"
                        )));
                    }
                    for p in points {
                        p.check_workspace()?;
                    }
                    let length = polyline_length(points);
                    self.decisions += 1;
                    if length > remaining + BUDGET_EPS {
                        if self.config.mask_overflow {
                            return Err(Error::Contract(format!(
                                "agent {i} path of length {length} exceeds remaining budget {remaining}"
                            )));
                        }
                        events[i].overflow = true;
                        overflow = true;
                        continue;
                    }
                    moves.push(Move {
                        agent: i,
                        polyline: points.clone(),
                        length,
                        target: None,
                        deadlock: false,
                    });
                }
            }
        }

        // measurement events in time order
        let interval = self.config.measurement_interval;
        let mut site_events: Vec<(f64, usize, Point, bool)> = Vec::new();
        let mut carry = vec![0.0; m];
        for mv in &moves {
            let a = &self.agents[mv.agent];
            let (sites, rest) = measurement_sites(&mv.polyline, a.since_measurement, interval);
            carry[mv.agent] = rest;
            site_events.extend(
                sites
                    .into_iter()
                    .map(|(t, p)| (t, mv.agent, p, mv.deadlock)),
            );
        }
        site_events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let beta_r = self.config.beta_risk;
        let mut inbox: Vec<Vec<(Point, f64, f64)>> = vec![Vec::new(); m];
        let mut pending: Vec<(usize, f64, Point, f64, f64, bool, f64)> = Vec::new();
        for &(t, agent, p, deadlock) in &site_events {
            let positions: Vec<Point> = (0..m)
                .map(|j| match moves.iter().find(|mv| mv.agent == j) {
                    Some(mv) => point_along(&mv.polyline, t),
                    None => self.agents[j].position,
                })
                .collect();
            let p = p.clamp_workspace();
            let y_int = self
                .truth
                .sample_measurement(&p, FieldKind::Interest, &mut self.rng)?;
            let y_risk = self
                .truth
                .sample_measurement(&p, FieldKind::Risk, &mut self.rng)?;
            let groups_now = communication_partition(&positions, self.config.comm_range);
            for &j in group_of(&groups_now, agent) {
                inbox[j].push((p, y_int, y_risk));
            }
            let (mu, var) = self.agents[agent].risk.predict(&[p])[0];
            let planned = mu + beta_r * var.sqrt();
            pending.push((agent, self.time + t, p, y_int, y_risk, deadlock, planned));
        }

        for (agent, batch) in self.agents.iter_mut().zip(&inbox) {
            if batch.is_empty() {
                continue;
            }
            let int_batch: Vec<(Point, f64)> = batch.iter().map(|b| (b.0, b.1)).collect();
            let risk_batch: Vec<(Point, f64)> = batch.iter().map(|b| (b.0, b.2)).collect();
            agent.interest.ingest(&int_batch)?;
            agent.risk.ingest(&risk_batch)?;
        }
        let team_batch: Vec<(Point, f64)> = pending.iter().map(|r| (r.2, r.3)).collect();
        self.team.ingest(&team_batch)?;

        for (agent, round_time, p, y_int, y_risk, deadlock, planned) in pending {
            let (mu, var) = self.agents[agent].risk.predict(&[p])[0];
            let risk_ucb = mu + beta_r * var.sqrt();
            if risk_ucb >= self.config.risk_threshold {
                events[agent].risk_violations += 1;
            }
            self.log.push(MeasurementRecord {
                agent,
                round: self.round,
                time: round_time,
                position: p,
                interest: y_int,
                risk: y_risk,
                risk_ucb,
                planned_risk_ucb: planned,
                deadlock,
            });
        }

        let mut duration: f64 = 0.0;
        for mv in &moves {
            let a = &mut self.agents[mv.agent];
            let end = *mv.polyline.last().expect("non-empty polyline");
            a.trajectory.extend_from_slice(&mv.polyline[1..]);
            a.position = end;
            a.path_length += mv.length;
            a.since_measurement = carry[mv.agent];
            a.node = mv.target;
            if let Some(v) = mv.target {
                a.visited.push(v);
            }
            self.remaining -= mv.length;
            duration = duration.max(mv.length);
        }
        self.time += duration;
        self.round += 1;

        let termination = if overflow {
            Some(Termination::Overflow)
        } else if !self.can_continue() {
            Some(Termination::BudgetExhausted)
        } else if self.round >= self.config.max_rounds {
            Some(Termination::RoundLimit)
        } else {
            None
        };
        self.done = termination.is_some();
        self.termination = termination;

        let params = self.config.reward_params();
        let rewards = (0..m)
            .map(|i| {
                let phi_now = self.agents[i].interest.covariance_trace();
                reward_for_step(&params, phi_prev[i], phi_now, &events[i], self.done)
            })
            .collect();
        Ok(StepOutcome {
            rewards,
            events,
            done: self.done,
            termination,
            groups,
            deadlocks,
            measurements: site_events.len(),
        })
    }
}

/// Position after travelling `t` along a polyline (clamped to its end).
pub fn point_along(polyline: &[Point], t: f64) -> Point {
    let mut left = t;
    for w in polyline.windows(2) {
        let seg = w[0].dist(&w[1]);
        if left <= seg {
            return if seg > 0.0 {
                w[0].lerp(&w[1], left / seg)
            } else {
                w[0]
            };
        }
        left -= seg;
    }
    *polyline.last().expect("non-empty polyline")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSpec, GaussianComponent};

    fn truth() -> Arc<GroundTruth> {
        let spec = FieldSpec {
            interest_components: vec![GaussianComponent::isotropic(Point::new(0.5, 0.5), 0.2, 1.0)],
            risk_components: vec![],
            lambda_mix: 0.5,
            noise_std: 0.0,
            seed: 0,
        };
        Arc::new(GroundTruth::new(spec, 30).unwrap())
    }

    fn line_map() -> Arc<Roadmap> {
        let nodes = vec![
            Point::new(0.1, 0.5),
            Point::new(0.6, 0.5),
            Point::new(0.6, 0.8),
            Point::new(0.1, 0.2),
        ];
        Arc::new(Roadmap::from_parts(nodes, &[[0, 1], [1, 2], [0, 3]], 0).unwrap())
    }

    fn config(m: usize, budget: f64) -> EpisodeConfig {
        EpisodeConfig {
            num_agents: m,
            team_budget: budget,
            ..Default::default()
        }
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        let none = StepEvents::default();
        assert!((reward_for_step(&p, 900.0, 855.0, &none, false) - 0.05).abs() < 1e-15);
        let col = StepEvents {
            collision: true,
            ..Default::default()
        };
        assert_eq!(reward_for_step(&p, 500.0, 500.0, &col, false), -0.2);
        assert!((reward_for_step(&p, 90.0, 90.0, &none, true) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn risk_penalty_only_when_enabled() {
        let ev = StepEvents {
            risk_violations: 2,
            ..Default::default()
        };
        let mut p = RewardParams::default();
        assert_eq!(reward_for_step(&p, 10.0, 10.0, &ev, false), -1.0);
        p.risk_enabled = false;
        assert_eq!(reward_for_step(&p, 10.0, 10.0, &ev, false), 0.0);
    }

    #[test]
    fn partition_examples() {
        let pos = [
            Point::new(0.0, 0.0),
            Point::new(0.2, 0.0),
            Point::new(0.9, 0.9),
        ];
        assert_eq!(
            communication_partition(&pos, CommRange::Global),
            vec![vec![0, 1, 2]]
        );
        assert_eq!(
            communication_partition(&pos, CommRange::Limited(0.3)),
            vec![vec![0, 1], vec![2]]
        );
        assert_eq!(
            communication_partition(&pos, CommRange::Limited(2f64.sqrt())),
            vec![vec![0, 1, 2]]
        );
    }

    #[test]
    fn partition_is_multi_hop() {
        let pos = [
            Point::new(0.0, 0.0),
            Point::new(0.5, 0.0),
            Point::new(0.25, 0.0),
        ];
        assert_eq!(
            communication_partition(&pos, CommRange::Limited(0.3)),
            vec![vec![0, 1, 2]]
        );
    }

    #[test]
    fn comm_range_serde() {
        assert_eq!(
            serde_json::to_string(&CommRange::Global).unwrap(),
            "\"global\""
        );
        let r: CommRange = serde_json::from_str("0.3").unwrap();
        assert_eq!(r, CommRange::Limited(0.3));
        assert!(serde_json::from_str::<CommRange>("-1").is_err());
    }

    #[test]
    fn reset_starts_everyone_at_start_with_prior_trace() {
        let (ep, obs) =
            Episode::reset(truth(), Maps::Shared(line_map()), config(3, 2.0), 1).unwrap();
        assert!(ep.agents().iter().all(|a| a.node == Some(0)));
        assert!((ep.team_trace() - 900.0).abs() < 1e-6);
        assert_eq!(obs.len(), 3);
        assert_eq!(obs[0].interest.len(), 4);
        assert_eq!(ep.remaining_budget(), 2.0);
    }

    #[test]
    fn half_length_edge_measures_twice_and_charges_budget() {
        let (mut ep, _) =
            Episode::reset(truth(), Maps::Shared(line_map()), config(1, 2.0), 1).unwrap();
        let out = ep.step(&[Some(Action::Node(1))]).unwrap();
        assert_eq!(out.measurements, 2);
        let xs: Vec<f64> = ep.measurements().iter().map(|r| r.position.x).collect();
        assert!((xs[0] - 0.3).abs() < 1e-12 && (xs[1] - 0.5).abs() < 1e-12);
        assert!((ep.remaining_budget() - 1.5).abs() < 1e-12);
        assert!((ep.agent(0).since_measurement - 0.1).abs() < 1e-12);
    }

    #[test]
    fn masked_action_is_contract_error() {
        let (mut ep, _) =
            Episode::reset(truth(), Maps::Shared(line_map()), config(1, 0.4), 1).unwrap();
        // edge 0-1 costs 0.5 > 0.4
        assert!(matches!(
            ep.step(&[Some(Action::Node(1))]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            ep.step(&[Some(Action::Node(2))]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn exact_exhaustion_is_not_overflow() {
        let (mut ep, _) =
            Episode::reset(truth(), Maps::Shared(line_map()), config(1, 0.5), 1).unwrap();
        let out = ep.step(&[Some(Action::Node(1))]).unwrap();
        assert!(out.done);
        assert_eq!(out.termination, Some(Termination::BudgetExhausted));
        assert!(!out.events[0].overflow);
        let phi = ep.agent(0).interest.covariance_trace();
        let info = ((900.0 - phi) / 900.0).max(0.0);
        assert!((out.rewards[0] - (info - phi / 900.0)).abs() < 1e-12);
    }

    #[test]
    fn unmasked_overflow_terminates_with_penalty() {
        let mut cfg = config(1, 0.4);
        cfg.mask_overflow = false;
        let (mut ep, _) = Episode::reset(truth(), Maps::Shared(line_map()), cfg, 1).unwrap();
        let out = ep.step(&[Some(Action::Node(1))]).unwrap();
        assert!(out.events[0].overflow);
        assert_eq!(out.termination, Some(Termination::Overflow));
        // no motion, no measurement, terminal term on the prior trace
        assert!((out.rewards[0] - (-1.0 - 1.0)).abs() < 1e-12);
        assert_eq!(ep.remaining_budget(), 0.4);
    }

    #[test]
    fn second_agent_cannot_take_committed_node() {
        let (mut ep, _) =
            Episode::reset(truth(), Maps::Shared(line_map()), config(2, 2.0), 1).unwrap();
        let partial = [Some(Action::Node(1)), None];
        let mask = ep.mask(1, &partial).unwrap();
        assert!(!mask.allows(1));
        assert!(mask.allows(3));
        assert!(ep
            .step(&[Some(Action::Node(1)), Some(Action::Node(1))])
            .is_err());
        ep.step(&[Some(Action::Node(1)), Some(Action::Node(3))])
            .unwrap();
    }

    #[test]
    fn backtrack_is_flagged() {
        let (mut ep, _) =
            Episode::reset(truth(), Maps::Shared(line_map()), config(1, 5.0), 1).unwrap();
        ep.step(&[Some(Action::Node(1))]).unwrap();
        let out = ep.step(&[Some(Action::Node(0))]).unwrap();
        assert!(out.events[0].backtrack);
    }

    #[test]
    fn idle_with_options_is_rejected() {
        let (mut ep, _) =
            Episode::reset(truth(), Maps::Shared(line_map()), config(1, 5.0), 1).unwrap();
        assert!(ep.step(&[None]).is_err());
    }

    #[test]
    fn point_along_polyline() {
        let pl = [
            Point::new(0.0, 0.0),
            Point::new(0.3, 0.0),
            Point::new(0.3, 0.4),
        ];
        assert_eq!(point_along(&pl, 0.5), Point::new(0.3, 0.2));
        assert_eq!(point_along(&pl, 9.0), Point::new(0.3, 0.4));
    }
}
