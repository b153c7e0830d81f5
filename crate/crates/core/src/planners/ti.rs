//! Intent-aware trajectory sampling.
//!
//! Each agent draws a handful of short roadmap trajectories by weighted
//! neighbour expansion, scores them by predicted variance reduction per unit
//! length (discounted where teammates intend to go), takes the first edge of
//! the best one and broadcasts an intent fitted over all the trajectories it
//! drew.

use rand::Rng as _;

use crate::episode::{Action, Episode, Observation};
use crate::error::Result;
use crate::geometry::{measurement_sites, Point};
use crate::intent::{fit_intent, fuse_intents, IntentDistribution};
use crate::seed::{self, Rng};

use super::{fallback_action, CandidatePlan, Planner, PlannerConfig, PlannerKind};

pub struct TiPlanner {
    config: PlannerConfig,
    rng: Rng,
}

impl TiPlanner {
    pub fn new(config: PlannerConfig) -> Self {
        let rng = seed::rng(config.seed);
        Self { config, rng }
    }
}

#[derive(Clone, Debug)]
pub struct TiDecision {
    pub next: Option<usize>,
    pub intent: Option<IntentDistribution>,
    pub candidates: Vec<CandidatePlan>,
    pub best: Option<usize>,
}

/// Sampling weight of a node for the deciding agent.
fn node_weight(
    obs: &Observation,
    v: usize,
    config: &PlannerConfig,
    beta_interest: f64,
    risk_aware: bool,
) -> f64 {
    let [mean, std, fused] = obs.interest[v];
    let ucb = (mean + beta_interest * std).max(0.0);
    let intent = if config.use_intent {
        (1.0 - config.intent_weight * fused).max(0.0)
    } else {
        1.0
    };
    let risk = if risk_aware {
        (1.0 - config.risk_weight * obs.risk[v]).max(0.0)
    } else {
        1.0
    };
    config.info_weight * ucb * intent * risk
}

fn pick_weighted(options: &[usize], weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return options[rng.random_range(0..options.len())];
    }
    let mut x = rng.random::<f64>() * total;
    for (o, w) in options.iter().zip(weights) {
        if x < *w {
            return *o;
        }
        x -= w;
    }
    *options.last().expect("non-empty options")
}

pub fn plan_ti(
    episode: &Episode,
    agent: usize,
    partial: &[Option<Action>],
    config: &PlannerConfig,
    rng: &mut Rng,
) -> Result<TiDecision> {
    let obs = episode.observe(agent, partial)?;
    let none = TiDecision {
        next: None,
        intent: None,
        candidates: vec![],
        best: None,
    };
    let Some(current) = obs.current_node else {
        return Ok(none);
    };
    let first_options: Vec<usize> = obs
        .neighbors
        .iter()
        .zip(&obs.mask)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .collect();
    if first_options.is_empty() {
        return Ok(none);
    }
    let cfg = episode.config();
    let map = episode.map(agent);
    let state = episode.agent(agent);
    let hard_risk = cfg.hard_risk && cfg.risk_enabled;

    let mut candidates = Vec::with_capacity(config.ti_num_candidates);
    for _ in 0..config.ti_num_candidates {
        let mut nodes = vec![current];
        let mut length = 0.0;
        let mut cur = current;
        while nodes.len() <= config.ti_trajectory_nodes {
            let options: Vec<usize> = if nodes.len() == 1 {
                first_options.clone()
            } else {
                map.neighbors(cur)
                    .iter()
                    .copied()
                    .filter(|v| !nodes.contains(v))
                    .filter(|&v| length + map.edge_cost(cur, v) <= obs.remaining_budget + 1e-12)
                    .filter(|&v| !(hard_risk && obs.risk[v] >= cfg.risk_threshold))
                    .collect()
            };
            if options.is_empty() {
                break;
            }
            let weights: Vec<f64> = options
                .iter()
                .map(|&v| node_weight(&obs, v, config, cfg.beta_interest, cfg.risk_enabled))
                .collect();
            let next = pick_weighted(&options, &weights, rng);
            length += map.edge_cost(cur, next);
            nodes.push(next);
            cur = next;
        }
        candidates.push(nodes);
    }

    let belief = &state.interest;
    let phi = belief.covariance_trace();
    let received = episode.received_intents(agent);
    let grid_intent = (config.use_intent && !received.is_empty())
        .then(|| fuse_intents(&received, belief.grid().points()));
    let mut plans = Vec::with_capacity(candidates.len());
    for nodes in &candidates {
        let points: Vec<Point> = nodes.iter().map(|&v| map.node(v)).collect();
        let length: f64 = points.windows(2).map(|w| w[0].dist(&w[1])).sum();
        let (sites, _) =
            measurement_sites(&points, state.since_measurement, cfg.measurement_interval);
        let sites: Vec<Point> = sites.into_iter().map(|s| s.1.clamp_workspace()).collect();
        let reduction = if sites.is_empty() {
            0.0
        } else if let Some(f) = &grid_intent {
            // variance teammates are expected to remove is worth less
            let post = belief.predicted_variance(&sites)?;
            post.iter()
                .zip(belief.variance())
                .zip(&f.values)
                .map(|((after, before), f)| {
                    (before - after) * (1.0 - config.intent_weight * f).max(0.0)
                })
                .sum()
        } else {
            phi - belief.predicted_trace(&sites)?
        };
        let score = if length > 0.0 {
            reduction / length
        } else {
            0.0
        };
        plans.push(CandidatePlan {
            nodes: nodes.clone(),
            points,
            score,
            planner: PlannerKind::TiSampling,
        });
    }
    let best = plans
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    let next = best.and_then(|i| plans[i].nodes.get(1).copied());
    let next = match next {
        Some(v)
            if obs
                .mask
                .iter()
                .zip(&obs.neighbors)
                .any(|(&ok, &n)| ok && n == v) =>
        {
            Some(v)
        }
        _ => fallback_action(&obs),
    };
    let sampled: Vec<Vec<Point>> = plans.iter().map(|p| p.points[1..].to_vec()).collect();
    let intent = if sampled.iter().any(|s| !s.is_empty()) {
        Some(fit_intent(agent, episode.round(), &sampled)?)
    } else {
        None
    };
    Ok(TiDecision {
        next,
        intent,
        candidates: plans,
        best,
    })
}

impl Planner for TiPlanner {
    fn name(&self) -> String {
        format!(
            "ti({},{})",
            self.config.ti_num_candidates, self.config.ti_trajectory_nodes
        )
    }

    fn plan_round(&mut self, episode: &mut Episode) -> Result<Vec<Option<Action>>> {
        let mut actions: Vec<Option<Action>> = Vec::with_capacity(episode.num_agents());
        for agent in 0..episode.num_agents() {
            let decision = plan_ti(episode, agent, &actions, &self.config, &mut self.rng)?;
            if self.config.use_intent {
                if let Some(intent) = decision.intent {
                    episode.set_intent(agent, intent);
                }
            }
            actions.push(decision.next.map(Action::Node));
        }
        Ok(actions)
    }
}
