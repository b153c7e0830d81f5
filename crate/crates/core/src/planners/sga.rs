//! Sequential greedy assignment over RRT candidates.
//!
//! Agents plan in id order. Each one samples candidate paths, scores them by
//! the trace its belief would reach after measuring along the candidate and
//! along every plan already assigned to a higher-priority teammate in its
//! communication group, and keeps the lowest. Only the first
//! `execute_segment` of the winner is executed before the next round.

use std::sync::Arc;

use crate::episode::{Action, Episode};
use crate::error::Result;
use crate::field::GroundTruth;
use crate::geometry::{measurement_sites, polyline_length, Point};
use crate::seed::{self, Rng};

use super::rrt::{sample_rrt_candidates, RrtParams};
use super::{CandidatePlan, Planner, PlannerConfig};

pub struct SgaRrtPlanner {
    config: PlannerConfig,
    rng: Rng,
    /// Ground-truth risk region the baseline is kept out of, if any.
    avoid: Option<(Arc<GroundTruth>, f64)>,
}

impl SgaRrtPlanner {
    pub fn new(config: PlannerConfig) -> Self {
        let rng = seed::rng(config.seed);
        Self {
            config,
            rng,
            avoid: None,
        }
    }

    /// Keeps the tree out of cells whose true risk reaches `threshold`.
    pub fn avoiding(mut self, truth: Arc<GroundTruth>, threshold: f64) -> Self {
        self.avoid = Some((truth, threshold));
        self
    }
}

/// Truncates a polyline to its first `len` of arc length.
pub fn truncate_polyline(points: &[Point], len: f64) -> Vec<Point> {
    let mut out = vec![points[0]];
    let mut left = len;
    for w in points.windows(2) {
        let seg = w[0].dist(&w[1]);
        if seg >= left {
            if left > 0.0 {
                out.push(w[0].lerp(&w[1], left / seg));
            }
            return out;
        }
        out.push(w[1]);
        left -= seg;
    }
    out
}

/// One SGA round. Returns each agent's selected full plan (if any) and the
/// action that executes its prefix.
pub fn plan_sga_round(
    episode: &Episode,
    config: &PlannerConfig,
    rng: &mut Rng,
    forbidden: &dyn Fn(&Point) -> bool,
) -> Result<Vec<(Option<CandidatePlan>, Option<Action>)>> {
    let cfg = episode.config();
    let groups = episode.groups();
    let params = RrtParams {
        length_range: config.rrt_length_range,
        step: config.rrt_step,
        max_iterations: config.rrt_max_iterations,
    };
    let mut assigned: Vec<Vec<Point>> = vec![Vec::new(); episode.num_agents()];
    let mut committed = 0.0;
    let mut out = Vec::with_capacity(episode.num_agents());
    for agent in 0..episode.num_agents() {
        let remaining = episode.remaining_budget() - committed;
        if remaining <= 1e-12 {
            out.push((None, None));
            continue;
        }
        let state = episode.agent(agent);
        let group = groups
            .iter()
            .find(|g| g.contains(&agent))
            .cloned()
            .unwrap_or_default();
        let prior_sites: Vec<Point> = group
            .iter()
            .filter(|&&j| j < agent)
            .flat_map(|&j| assigned[j].iter().copied())
            .collect();
        let mut candidates = sample_rrt_candidates(
            state.position,
            &params,
            rng,
            config.sga_candidates,
            forbidden,
        );
        let mut site_sets = Vec::with_capacity(candidates.len());
        for plan in candidates.iter_mut() {
            let (sites, _) = measurement_sites(
                &plan.points,
                state.since_measurement,
                cfg.measurement_interval,
            );
            let sites: Vec<Point> = sites.into_iter().map(|s| s.1.clamp_workspace()).collect();
            let mut all = prior_sites.clone();
            all.extend_from_slice(&sites);
            plan.score = state.interest.predicted_trace(&all)?;
            site_sets.push(sites);
        }
        let best = candidates
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i);
        let Some(best) = best else {
            out.push((None, None));
            continue;
        };
        assigned[agent] = std::mem::take(&mut site_sets[best]);
        let plan = candidates.swap_remove(best);
        let seg = truncate_polyline(&plan.points, config.execute_segment.min(remaining));
        if seg.len() < 2 || polyline_length(&seg) <= 0.0 {
            out.push((Some(plan), None));
            continue;
        }
        committed += polyline_length(&seg);
        out.push((Some(plan), Some(Action::Path(seg))));
    }
    Ok(out)
}

impl Planner for SgaRrtPlanner {
    fn name(&self) -> String {
        let (a, b) = self.config.rrt_length_range;
        format!("sga_rrt({a},{b})")
    }

    fn plan_round(&mut self, episode: &mut Episode) -> Result<Vec<Option<Action>>> {
        let avoid = self.avoid.clone();
        let forbidden = move |p: &Point| match &avoid {
            Some((truth, th)) => truth.risk_at(p) >= *th,
            None => false,
        };
        let plans = plan_sga_round(episode, &self.config, &mut self.rng, &forbidden)?;
        Ok(plans.into_iter().map(|(_, a)| a).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_prefix_length() {
        let pl = [
            Point::new(0.0, 0.0),
            Point::new(0.1, 0.0),
            Point::new(0.1, 0.8),
        ];
        let seg = truncate_polyline(&pl, 0.2);
        assert!((polyline_length(&seg) - 0.2).abs() < 1e-12);
        assert_eq!(seg.len(), 3);
        let whole = truncate_polyline(&pl, 5.0);
        assert_eq!(whole, pl.to_vec());
    }
}
