use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::geometry::Point;
use crate::seed::Rng;

use super::{CandidatePlan, PlannerKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RrtParams {
    pub length_range: (f64, f64),
    pub step: f64,
    pub max_iterations: usize,
}

struct TreeNode {
    point: Point,
    parent: Option<usize>,
    cost: f64,
}

fn path_to(tree: &[TreeNode], mut i: usize) -> Vec<Point> {
    let mut out = vec![tree[i].point];
    while let Some(p) = tree[i].parent {
        out.push(tree[p].point);
        i = p;
    }
    out.reverse();
    out
}

/// Grows a goal-free RRT from `start` over the unit square and returns up
/// to `count` root-to-node paths whose length lies in the requested range.
///
/// Points for which `forbidden` holds are never added to the tree. If no
/// tree path falls in range, straight-line paths in evenly spread
/// directions are returned instead.
pub fn sample_rrt_candidates(
    start: Point,
    params: &RrtParams,
    rng: &mut Rng,
    count: usize,
    forbidden: &dyn Fn(&Point) -> bool,
) -> Vec<CandidatePlan> {
    let (lo, hi) = params.length_range;
    let mut tree = vec![TreeNode {
        point: start,
        parent: None,
        cost: 0.0,
    }];
    let mut in_range: Vec<usize> = Vec::new();
    for _ in 0..params.max_iterations {
        let q = Point::new(rng.random::<f64>(), rng.random::<f64>());
        if forbidden(&q) {
            continue;
        }
        let (near, d) = tree
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.point.dist(&q)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("tree has a root");
        if d <= 0.0 {
            continue;
        }
        let from = tree[near].point;
        let new = if d <= params.step {
            q
        } else {
            from.lerp(&q, params.step / d)
        };
        if forbidden(&new) {
            continue;
        }
        let cost = tree[near].cost + from.dist(&new);
        tree.push(TreeNode {
            point: new,
            parent: Some(near),
            cost,
        });
        if (lo..=hi).contains(&cost) {
            in_range.push(tree.len() - 1);
            if in_range.len() >= 4 * count {
                break;
            }
        }
    }

    let to_plan = |points: Vec<Point>| CandidatePlan {
        nodes: vec![],
        points,
        score: f64::NAN,
        planner: PlannerKind::SgaRrt,
    };
    if in_range.is_empty() {
        let offset = rng.random::<f64>() * 2.0 * PI;
        let len = 0.5 * (lo + hi);
        return (0..count)
            .map(|k| {
                let a = offset + 2.0 * PI * k as f64 / count as f64;
                let end = Point::new(start.x + len * a.cos(), start.y + len * a.sin());
                to_plan(vec![start, end.clamp_workspace()])
            })
            .filter(|p| p.points[0].dist(&p.points[1]) > 0.0)
            .collect();
    }
    let mut picks: Vec<usize> = if in_range.len() > count {
        sample(rng, in_range.len(), count)
            .into_iter()
            .map(|k| in_range[k])
            .collect()
    } else {
        in_range
    };
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|i| to_plan(path_to(&tree, i)))
        .collect()
}
