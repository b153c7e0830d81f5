//! Trajectory intents: a Gaussian fitted to an agent's sampled future
//! trajectories, exchanged between teammates and fused into a per-node
//! feature.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Floor added to the fitted covariance diagonal.
pub const INTENT_REG: f64 = 1e-4;

/// Broadcast payload: `{agent_id, step, mean: [x, y], cov: [[a, b], [b, c]]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentDistribution {
    pub agent_id: usize,
    pub step: usize,
    pub mean: Point,
    pub cov: [[f64; 2]; 2],
}

impl IntentDistribution {
    pub fn density(&self, p: &Point) -> f64 {
        let [[a, b], [_, c]] = self.cov;
        let det = a * c - b * b;
        if !(det > 0.0) {
            return 0.0;
        }
        let dx = p.x - self.mean.x;
        let dy = p.y - self.mean.y;
        let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
    }
}

/// Fits an intent to all node positions of the sampled trajectories.
pub fn fit_intent(
    agent_id: usize,
    step: usize,
    trajectories: &[Vec<Point>],
) -> Result<IntentDistribution> {
    fit_intent_with(agent_id, step, trajectories, INTENT_REG)
}

pub fn fit_intent_with(
    agent_id: usize,
    step: usize,
    trajectories: &[Vec<Point>],
    reg: f64,
) -> Result<IntentDistribution> {
    let pts: Vec<&Point> = trajectories.iter().flatten().collect();
    if pts.is_empty() {
        return Err(Error::Argument("intent needs at least one node".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    if pts.len() > 1 {
        for p in &pts {
            let dx = p.x - mx;
            let dy = p.y - my;
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        let d = n - 1.0;
        sxx /= d;
        sxy /= d;
        syy /= d;
    }
    Ok(IntentDistribution {
        agent_id,
        step,
        mean: Point::new(mx, my),
        cov: [[sxx + reg, sxy], [sxy, syy + reg]],
    })
}

/// Per-point fused intent of a set of teammates.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedIntentField {
    pub values: Vec<f64>,
    pub contributors: Vec<usize>,
}

/// Sums the intent densities at each query point and rescales the result to
/// peak 1. No intents, or densities that underflow everywhere, give zeros.
pub fn fuse_intents(intents: &[IntentDistribution], query: &[Point]) -> FusedIntentField {
    let mut values = vec![0.0; query.len()];
    // sort contributions so the float sums do not depend on list order
    let mut ordered: Vec<&IntentDistribution> = intents.iter().collect();
    ordered.sort_by(|a, b| {
        a.agent_id
            .cmp(&b.agent_id)
            .then(a.step.cmp(&b.step))
            .then(a.mean.x.total_cmp(&b.mean.x))
            .then(a.mean.y.total_cmp(&b.mean.y))
            .then_with(|| {
                let ca = a.cov.iter().flatten();
                let cb = b.cov.iter().flatten();
                ca.zip(cb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    for (v, p) in values.iter_mut().zip(query) {
        *v = ordered.iter().map(|d| d.density(p)).sum();
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    let mut contributors: Vec<usize> = ordered.iter().map(|d| d.agent_id).collect();
    contributors.dedup();
    FusedIntentField {
        values,
        contributors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_single_node() {
        let p = Point::new(0.3, 0.4);
        let d = fit_intent(0, 0, &[vec![p, p, p]]).unwrap();
        assert!(d.mean.dist(&p) < 1e-15);
        for (i, row) in d.cov.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let want = if i == j { INTENT_REG } else { 0.0 };
                assert!((c - want).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn symmetric_pair_mean() {
        let d = fit_intent(
            1,
            2,
            &[vec![Point::new(0.0, 0.0)], vec![Point::new(1.0, 1.0)]],
        )
        .unwrap();
        assert_eq!(d.mean, Point::new(0.5, 0.5));
    }

    #[test]
    fn empty_input_is_argument_error() {
        assert!(matches!(fit_intent(0, 0, &[]), Err(Error::Argument(_))));
        assert!(fit_intent(0, 0, &[vec![]]).is_err());
    }

    #[test]
    fn fusion_of_nothing_is_zero() {
        let q = [Point::new(0.1, 0.1), Point::new(0.9, 0.2)];
        let f = fuse_intents(&[], &q);
        assert_eq!(f.values, vec![0.0, 0.0]);
    }

    #[test]
    fn duplicate_intent_does_not_change_fusion() {
        let d = fit_intent(
            1,
            0,
            &[vec![
                Point::new(0.2, 0.3),
                Point::new(0.4, 0.3),
                Point::new(0.3, 0.5),
            ]],
        )
        .unwrap();
        let q: Vec<Point> = (0..5).map(|i| Point::new(0.1 * i as f64, 0.35)).collect();
        let one = fuse_intents(std::slice::from_ref(&d), &q);
        let two = fuse_intents(&[d.clone(), d], &q);
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_payload_layout() {
        let d = fit_intent(2, 5, &[vec![Point::new(0.2, 0.3)]]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&d).unwrap();
        assert_eq!(v["agent_id"], 2);
        assert_eq!(v["step"], 5);
        assert_eq!(v["mean"], serde_json::json!([0.2, 0.3]));
        assert_eq!(v["cov"].as_array().unwrap().len(), 2);
    }
}
