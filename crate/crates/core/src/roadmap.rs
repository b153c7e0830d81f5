//! Probabilistic roadmap: uniform samples joined to their k nearest
//! neighbours, Dijkstra routing and per-step action masks.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::seed;

/// Undirected roadmap graph. Edge weights are always the Euclidean distance
/// between endpoints, so they are recomputed rather than stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoadmapJson", into = "RoadmapJson")]
pub struct Roadmap {
    nodes: Vec<Point>,
    neighbors: Vec<Vec<usize>>,
    start: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RoadmapJson {
    nodes: Vec<Point>,
    edges: Vec<[usize; 2]>,
    start: usize,
    seed: u64,
}

impl From<Roadmap> for RoadmapJson {
    fn from(m: Roadmap) -> Self {
        RoadmapJson {
            edges: m.edges(),
            nodes: m.nodes,
            start: m.start,
            seed: m.seed,
        }
    }
}

impl TryFrom<RoadmapJson> for Roadmap {
    type Error = Error;

    fn try_from(raw: RoadmapJson) -> Result<Self> {
        let mut map = Roadmap::from_parts(raw.nodes, &raw.edges, raw.start)?;
        map.seed = raw.seed;
        Ok(map)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathQuery {
    pub source: usize,
    pub target: usize,
    pub nodes: Vec<usize>,
    pub cost: f64,
}

pub fn build_prm(seed: u64, n_nodes: usize, k: usize, start: Point) -> Result<Roadmap> {
    if k == 0 || n_nodes < k + 1 {
        return Err(Error::Config(format!(
            "roadmap needs k >= 1 and n_nodes >= k + 1 (n_nodes = {n_nodes}, k = {k})"
        )));
    }
    start.check_workspace()?;
    let mut rng = seed::rng(seed);
    // node 0 is the shared start; the rest are uniform samples
    let mut nodes = Vec::with_capacity(n_nodes);
    nodes.push(start);
    for _ in 1..n_nodes {
        nodes.push(Point::new(rng.random::<f64>(), rng.random::<f64>()));
    }
    let n = nodes.len();
    let mut neighbors = vec![Vec::new(); n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| {
            nodes[i]
                .dist_sq(&nodes[a])
                .total_cmp(&nodes[i].dist_sq(&nodes[b]))
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
    }
    let mut map = Roadmap {
        nodes,
        neighbors,
        start: 0,
        seed,
    };
    map.normalize_adjacency();
    map.repair_connectivity();
    Ok(map)
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem {
    cost: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then on node index
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Roadmap {
    /// Builds a roadmap from explicit nodes and undirected edges.
    pub fn from_parts(nodes: Vec<Point>, edges: &[[usize; 2]], start: usize) -> Result<Self> {
        let n = nodes.len();
        if start >= n {
            return Err(Error::Config("start node out of range".into()));
        }
        for p in &nodes {
            p.check_workspace()?;
        }
        let mut neighbors = vec![Vec::new(); n];
        for &[u, v] in edges {
            if u >= n || v >= n || u == v {
                return Err(Error::Config(format!("bad edge ({u}, {v})")));
            }
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        let mut map = Roadmap {
            nodes,
            neighbors,
            start,
            seed: 0,
        };
        map.normalize_adjacency();
        Ok(map)
    }

    fn normalize_adjacency(&mut self) {
        for adj in &mut self.neighbors {
            adj.sort_unstable();
            adj.dedup();
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Point {
        self.nodes[id]
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sorted neighbour ids.
    pub fn neighbors(&self, id: usize) -> &[usize] {
        &self.neighbors[id]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn edge_cost(&self, u: usize, v: usize) -> f64 {
        self.nodes[u].dist(&self.nodes[v])
    }

    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for (u, adj) in self.neighbors.iter().enumerate() {
            out.extend(adj.iter().filter(|&&v| v > u).map(|&v| [u, v]));
        }
        out
    }

    pub fn nearest_node(&self, p: &Point) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, q) in self.nodes.iter().enumerate() {
            let d = q.dist_sq(p);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Joins every component to the largest one through its closest node pair.
    pub fn repair_connectivity(&mut self) {
        let mut comps = self.components();
        if comps.len() <= 1 {
            return;
        }
        // largest first, ties to the one holding the lowest id
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        let mut main = comps[0].clone();
        for comp in &comps[1..] {
            let mut best = (f64::INFINITY, 0, 0);
            for &u in comp {
                for &v in &main {
                    let d = self.nodes[u].dist_sq(&self.nodes[v]);
                    if d < best.0 {
                        best = (d, u, v);
                    }
                }
            }
            let (_, u, v) = best;
            self.neighbors[u].push(v);
            self.neighbors[v].push(u);
            main.extend_from_slice(comp);
        }
        self.normalize_adjacency();
    }

    /// Copy of the roadmap with the flagged nodes removed. The start node is
    /// always kept. Returns the map and the old-to-new id table.
    pub fn without_nodes(&self, remove: &[bool]) -> (Roadmap, Vec<Option<usize>>) {
        let mut remap = vec![None; self.len()];
        let mut nodes = Vec::new();
        for (i, p) in self.nodes.iter().enumerate() {
            if !remove[i] || i == self.start {
                remap[i] = Some(nodes.len());
                nodes.push(*p);
            }
        }
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for (u, adj) in self.neighbors.iter().enumerate() {
            let Some(nu) = remap[u] else { continue };
            neighbors[nu].extend(adj.iter().filter_map(|&v| remap[v]));
        }
        let mut map = Roadmap {
            nodes,
            neighbors,
            start: remap[self.start].expect("start is kept"),
            seed: self.seed,
        };
        map.normalize_adjacency();
        map.repair_connectivity();
        (map, remap)
    }

    /// Single-source Dijkstra. Returns distances and predecessors.
    pub fn dijkstra(&self, source: usize) -> (Vec<f64>, Vec<Option<usize>>) {
        let n = self.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapItem {
            cost: 0.0,
            node: source,
        });
        while let Some(HeapItem { cost, node }) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            for &v in &self.neighbors[node] {
                let nd = cost + self.edge_cost(node, v);
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = Some(node);
                    heap.push(HeapItem { cost: nd, node: v });
                }
            }
        }
        (dist, prev)
    }

    pub fn shortest_path(&self, a: usize, b: usize) -> Result<PathQuery> {
        if a >= self.len() || b >= self.len() {
            return Err(Error::Argument(format!("node id out of range ({a}, {b})")));
        }
        let (dist, prev) = self.dijkstra(a);
        if !dist[b].is_finite() {
            return Err(Error::Contract(format!("node {b} unreachable from {a}")));
        }
        let mut nodes = vec![b];
        let mut cur = b;
        while let Some(p) = prev[cur] {
            nodes.push(p);
            cur = p;
        }
        nodes.reverse();
        // report the cost as the sum of the returned segments
        let cost = nodes.windows(2).map(|w| self.edge_cost(w[0], w[1])).sum();
        Ok(PathQuery {
            source: a,
            target: b,
            nodes,
            cost,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: RoadmapJson = serde_json::from_str(s)?;
        Roadmap::try_from(raw)
    }
}

/// Inputs to [`feasibility_mask`] describing the deciding agent's situation.
#[derive(Clone, Debug)]
pub struct MaskQuery<'a> {
    pub current: usize,
    pub remaining_budget: f64,
    /// Positions other agents have already committed to this round.
    pub occupied: &'a [Point],
    /// Risk upper-confidence value per roadmap node.
    pub risk_ucb: Option<&'a [f64]>,
    pub risk_threshold: f64,
    pub hard_risk: bool,
    /// When false, over-budget neighbours stay selectable (and are penalized).
    pub mask_overflow: bool,
    /// When false, collisions are penalized instead of masked.
    pub mask_collisions: bool,
}

/// Which neighbours of the current node are selectable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMask {
    pub neighbors: Vec<usize>,
    pub feasible: Vec<bool>,
    /// Set when every neighbour was masked and the least risky
    /// budget-feasible one was released.
    pub deadlock_unmask: Option<usize>,
}

impl FeasibilityMask {
    pub fn any(&self) -> bool {
        self.feasible.iter().any(|&f| f)
    }

    pub fn allows(&self, node: usize) -> bool {
        self.neighbors
            .iter()
            .zip(&self.feasible)
            .any(|(&n, &f)| n == node && f)
    }

    pub fn feasible_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.neighbors
            .iter()
            .zip(&self.feasible)
            .filter(|(_, &f)| f)
            .map(|(&n, _)| n)
    }
}

const BUDGET_EPS: f64 = 1e-12;

pub fn feasibility_mask(map: &Roadmap, q: &MaskQuery<'_>) -> FeasibilityMask {
    let neighbors = map.neighbors(q.current).to_vec();
    let within_budget: Vec<bool> = neighbors
        .iter()
        .map(|&v| map.edge_cost(q.current, v) <= q.remaining_budget + BUDGET_EPS)
        .collect();
    let collides: Vec<bool> = neighbors
        .iter()
        .map(|&v| q.occupied.iter().any(|p| p.dist_sq(&map.node(v)) < 1e-24))
        .collect();
    let risky = |v: usize| match q.risk_ucb {
        Some(r) if q.hard_risk => r[v] >= q.risk_threshold,
        _ => false,
    };
    let mut feasible: Vec<bool> = neighbors
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            (within_budget[i] || !q.mask_overflow)
                && !(collides[i] && q.mask_collisions)
                && !risky(v)
        })
        .collect();
    let mut deadlock_unmask = None;
    if q.remaining_budget > BUDGET_EPS && !feasible.iter().any(|&f| f) && q.hard_risk {
        let ucb = |v: usize| q.risk_ucb.map_or(0.0, |r| r[v]);
        let candidate = neighbors
            .iter()
            .enumerate()
            .filter(|(i, _)| within_budget[*i] && !(collides[*i] && q.mask_collisions))
            .min_by(|a, b| ucb(*a.1).total_cmp(&ucb(*b.1)).then(a.1.cmp(b.1)));
        if let Some((i, &v)) = candidate {
            feasible[i] = true;
            deadlock_unmask = Some(v);
        }
    }
    if q.remaining_budget <= BUDGET_EPS && q.mask_overflow {
        feasible.iter_mut().for_each(|f| *f = false);
    }
    FeasibilityMask {
        neighbors,
        feasible,
        deadlock_unmask,
    }
}
