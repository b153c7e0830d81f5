use crate::episode::{Action, Episode};
use crate::error::Result;
use crate::geometry::Point;
use crate::gp::GpBelief;
use crate::roadmap::Roadmap;

use super::{fallback_action, Planner, PlannerConfig};

/// Nearest-viewpoint baseline.
pub struct GreedyPlanner {
    config: PlannerConfig,
}

impl GreedyPlanner {
    pub fn new(config: PlannerConfig) -> Self {
        Self { config }
    }
}

/// High-interest grid cells whose variance exceeds `floor`, nearest to
/// `here` first (lowest grid index on ties).
pub fn interest_targets(
    belief: &GpBelief,
    here: &Point,
    threshold: f64,
    beta: f64,
    floor: f64,
) -> Result<Vec<usize>> {
    let region = belief.high_interest_set(threshold, beta)?;
    let grid = belief.grid().points();
    let mut cells: Vec<(f64, usize)> = region
        .members
        .iter()
        .filter(|&&i| belief.variance()[i] > floor)
        .map(|&i| (grid[i].dist_sq(here), i))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(cells.into_iter().map(|c| c.1).collect())
}

/// Roadmap node the greedy planner heads for from `current`.
pub fn greedy_target(
    map: &Roadmap,
    belief: &GpBelief,
    current: usize,
    here: &Point,
    threshold: f64,
    beta: f64,
    floor: f64,
) -> Result<Option<usize>> {
    let grid = belief.grid().points();
    let near = interest_targets(belief, here, threshold, beta, floor)?
        .into_iter()
        .map(|i| map.nearest_node(&grid[i]))
        .find(|&t| t != current);
    if near.is_some() {
        return Ok(near);
    }
    // most uncertain node, nearest on ties
    let var: Vec<f64> = belief
        .predict(map.nodes())
        .into_iter()
        .map(|p| p.1)
        .collect();
    Ok((0..map.len()).filter(|&v| v != current).min_by(|&a, &b| {
        var[b]
            .total_cmp(&var[a])
            .then(
                map.node(a)
                    .dist_sq(here)
                    .total_cmp(&map.node(b).dist_sq(here)),
            )
            .then(a.cmp(&b))
    }))
}

/// Picks the next node for `agent`: head along the shortest route to the
/// closest still-uncertain cell of the high-interest region. With no such
/// cell, head for the most uncertain roadmap node instead.
pub fn plan_greedy(
    episode: &Episode,
    agent: usize,
    partial: &[Option<Action>],
    config: &PlannerConfig,
) -> Result<Option<usize>> {
    let obs = episode.observe(agent, partial)?;
    let Some(current) = obs.current_node else {
        return Ok(None);
    };
    if !obs.mask.iter().any(|&f| f) {
        return Ok(None);
    }
    let cfg = episode.config();
    let map = episode.map(agent);
    let target = greedy_target(
        map,
        &episode.agent(agent).interest,
        current,
        &obs.position,
        cfg.interest_threshold,
        cfg.beta_interest,
        config.greedy_variance_floor,
    )?;
    let Some(target) = target else {
        return Ok(fallback_action(&obs));
    };
    let route = map.shortest_path(current, target)?;
    let first = route.nodes[1];
    let mask = obs.feasibility();
    if mask.allows(first) {
        return Ok(Some(first));
    }
    // first hop blocked: best progress among selectable neighbours
    let goal = map.node(target);
    Ok(mask.feasible_nodes().min_by(|&a, &b| {
        let ca = map.edge_cost(current, a) + map.node(a).dist(&goal);
        let cb = map.edge_cost(current, b) + map.node(b).dist(&goal);
        ca.total_cmp(&cb).then(a.cmp(&b))
    }))
}

impl Planner for GreedyPlanner {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn plan_round(&mut self, episode: &mut Episode) -> Result<Vec<Option<Action>>> {
        let mut actions: Vec<Option<Action>> = Vec::with_capacity(episode.num_agents());
        for agent in 0..episode.num_agents() {
            let next = plan_greedy(episode, agent, &actions, &self.config)?;
            actions.push(next.map(Action::Node));
        }
        Ok(actions)
    }
}
