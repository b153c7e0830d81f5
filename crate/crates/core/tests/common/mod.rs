#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use maipp::episode::{Action, Episode, EpisodeConfig, Maps};
use maipp::field::{FieldSpec, GaussianComponent, GroundTruth};
use maipp::gp::KernelParams;
use maipp::planners::{Planner, PlannerConfig, PlannerKind, TiPlanner};
use maipp::roadmap::Roadmap;
use maipp::seed;
use maipp::Point;

/// Matérn 3/2 written out from scratch.
pub fn matern32(p: &KernelParams, a: &Point, b: &Point) -> f64 {
    let r = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    let s = 3f64.sqrt() * r / p.lengthscale;
    p.signal_variance * (1.0 + s) * (-s).exp()
}

/// Posterior mean and covariance through an explicit inverse of
/// `K(X, X) + noise * I`.
pub fn dense_posterior(
    p: &KernelParams,
    xs: &[Point],
    ys: &[f64],
    query: &[Point],
) -> (DVector<f64>, DMatrix<f64>) {
    let kss = DMatrix::from_fn(query.len(), query.len(), |i, j| {
        matern32(p, &query[i], &query[j])
    });
    if xs.is_empty() {
        return (DVector::zeros(query.len()), kss);
    }
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        matern32(p, &xs[i], &xs[j]) + if i == j { p.noise_variance } else { 0.0 }
    });
    let inv = k.try_inverse().expect("gram matrix should be invertible");
    let ks = DMatrix::from_fn(query.len(), n, |i, j| matern32(p, &query[i], &xs[j]));
    let y = DVector::from_column_slice(ys);
    let mean = &ks * &inv * y;
    let cov = kss - &ks * &inv * ks.transpose();
    (mean, cov)
}

pub fn random_point(rng: &mut impl Rng) -> Point {
    Point::new(rng.random::<f64>(), rng.random::<f64>())
}

/// Cheapest simple path by enumerating simple paths. Branches already
/// costlier than the best complete path are cut, which is safe because edge
/// costs are positive. Exponential; small graphs only.
pub fn exhaustive_shortest(map: &Roadmap, a: usize, b: usize) -> Option<f64> {
    fn walk(
        map: &Roadmap,
        at: usize,
        b: usize,
        cost: f64,
        seen: &mut [bool],
        best: &mut Option<f64>,
    ) {
        if best.is_some_and(|c| cost >= c) {
            return;
        }
        if at == b {
            if best.is_none_or(|c| cost < c) {
                *best = Some(cost);
            }
            return;
        }
        for &v in map.neighbors(at) {
            if !seen[v] {
                seen[v] = true;
                walk(map, v, b, cost + map.edge_cost(at, v), seen, best);
                seen[v] = false;
            }
        }
    }
    let mut seen = vec![false; map.len()];
    seen[a] = true;
    let mut best = None;
    walk(map, a, b, 0.0, &mut seen, &mut best);
    best
}

/// Random graph on `n` uniform nodes with each node joined to `k` nearest.
pub fn random_knn_graph(rng: &mut impl Rng, n: usize, k: usize) -> Roadmap {
    let nodes: Vec<Point> = (0..n).map(|_| random_point(rng)).collect();
    knn_graph(nodes, k)
}

pub fn knn_graph(nodes: Vec<Point>, k: usize) -> Roadmap {
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        let mut d: Vec<(f64, usize)> = (0..nodes.len())
            .filter(|&j| j != i)
            .map(|j| (nodes[i].dist(&nodes[j]), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(d.iter().take(k).map(|&(_, j)| [i, j]));
    }
    let mut map = Roadmap::from_parts(nodes, &edges, 0).unwrap();
    map.repair_connectivity();
    map
}

/// Picks uniformly among each agent's selectable neighbours.
pub struct RandomWalk {
    rng: seed::Rng,
}

impl RandomWalk {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: seed::rng(seed),
        }
    }
}

impl Planner for RandomWalk {
    fn name(&self) -> String {
        "random".into()
    }

    fn plan_round(&mut self, episode: &mut Episode) -> maipp::Result<Vec<Option<Action>>> {
        let mut actions: Vec<Option<Action>> = Vec::new();
        for agent in 0..episode.num_agents() {
            let mask = episode.mask(agent, &actions)?;
            let options: Vec<usize> = mask.feasible_nodes().collect();
            let pick = if options.is_empty() {
                None
            } else {
                Some(Action::Node(
                    options[self.rng.random_range(0..options.len())],
                ))
            };
            actions.push(pick);
        }
        Ok(actions)
    }
}

/// Two equal interest blobs either side of a horizontal corridor.
pub fn two_blob_truth() -> Arc<GroundTruth> {
    let spec = FieldSpec {
        interest_components: vec![
            GaussianComponent::isotropic(Point::new(0.2, 0.5), 0.08, 1.0),
            GaussianComponent::isotropic(Point::new(0.8, 0.5), 0.08, 1.0),
        ],
        risk_components: vec![],
        lambda_mix: 0.5,
        noise_std: 0.01,
        seed: 0,
    };
    Arc::new(GroundTruth::new(spec, 30).unwrap())
}

/// Roadmap confined to the band `0.4 <= y <= 0.6`, starting mid-corridor.
pub fn corridor_roadmap(seed_value: u64) -> Roadmap {
    let mut rng = seed::rng(seed_value);
    let mut nodes = vec![Point::new(0.5, 0.5)];
    for _ in 1..40 {
        nodes.push(Point::new(
            rng.random::<f64>(),
            0.4 + 0.2 * rng.random::<f64>(),
        ));
    }
    knn_graph(nodes, 10)
}

/// Runs the two-agent TI episode on the corridor and reports whether the
/// agents ended up working different blobs, judged by which side of the
/// corridor each agent's measurements lie on average.
pub fn agents_split(truth: &Arc<GroundTruth>, seed_value: u64, use_intent: bool) -> bool {
    let map = Arc::new(corridor_roadmap(seed_value));
    let cfg = EpisodeConfig {
        num_agents: 2,
        team_budget: 1.2,
        ..Default::default()
    };
    let (mut ep, _) = Episode::reset(truth.clone(), Maps::Shared(map), cfg, seed_value).unwrap();
    let mut pc = PlannerConfig::with_kind(PlannerKind::TiSampling);
    pc.use_intent = use_intent;
    pc.seed = seed_value + 1000;
    let mut planner = TiPlanner::new(pc);
    while !ep.is_done() {
        let actions = planner.plan_round(&mut ep).unwrap();
        ep.step(&actions).unwrap();
    }
    let side: Vec<f64> = (0..2)
        .map(|i| {
            let xs: Vec<f64> = ep
                .measurements()
                .iter()
                .filter(|m| m.agent == i)
                .map(|m| m.position.x)
                .collect();
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64 - 0.5
            }
        })
        .collect();
    side[0] * side[1] < 0.0
}
