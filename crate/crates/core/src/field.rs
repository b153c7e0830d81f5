//! Ground-truth interest and risk fields.
//!
//! Each field is an equally weighted mixture of 2D Gaussian densities on the
//! unit square, rescaled so its maximum over the evaluation grid is 1. The
//! interest measurements the agents receive come from the mixed field
//! `y_mix = y_it * (1 - lambda * y_rk)`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::gp::QueryGrid;
use crate::seed::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub center: Point,
    /// Symmetric positive-definite 2x2 shape matrix.
    pub spread: [[f64; 2]; 2],
    pub amplitude: f64,
}

impl GaussianComponent {
    pub fn isotropic(center: Point, std: f64, amplitude: f64) -> Self {
        let v = std * std;
        Self {
            center,
            spread: [[v, 0.0], [0.0, v]],
            amplitude,
        }
    }

    fn det(&self) -> f64 {
        let s = &self.spread;
        s[0][0] * s[1][1] - s[0][1] * s[1][0]
    }

    pub fn is_valid(&self) -> bool {
        let s = &self.spread;
        (s[0][1] - s[1][0]).abs() <= 1e-12 * (1.0 + s[0][1].abs())
            && s[0][0] > 0.0
            && self.det() > 0.0
            && self.center.in_workspace()
            && self.amplitude >= 0.0
    }

    /// Bivariate normal density scaled by the amplitude.
    pub fn density(&self, x: &Point) -> f64 {
        let s = &self.spread;
        let det = self.det();
        let dx = x.x - self.center.x;
        let dy = x.y - self.center.y;
        // inverse of [[a, b], [b, c]] is [[c, -b], [-b, a]] / det
        let q = (s[1][1] * dx * dx - 2.0 * s[0][1] * dx * dy + s[0][0] * dy * dy) / det;
        self.amplitude * (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub interest_components: Vec<GaussianComponent>,
    pub risk_components: Vec<GaussianComponent>,
    pub lambda_mix: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl FieldSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: FieldSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(Error::Config(format!(
                "lambda_mix {} outside [0, 1]",
                self.lambda_mix
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        let all = self.interest_components.iter().chain(&self.risk_components);
        if let Some(bad) = all.into_iter().find(|c| !c.is_valid()) {
            return Err(Error::Config(format!("invalid component {bad:?}")));
        }
        Ok(())
    }
}

/// Ranges used when drawing a random [`FieldSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub interest_count: (usize, usize),
    pub risk_count: (usize, usize),
    /// Per-axis standard deviation of each component.
    pub std_range: (f64, f64),
    /// Largest ratio between the two axis standard deviations.
    pub max_anisotropy: f64,
    pub center_range: (f64, f64),
    pub lambda_mix: f64,
    pub noise_std: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            interest_count: (8, 12),
            risk_count: (4, 6),
            std_range: (0.05, 0.2),
            max_anisotropy: 1.5,
            center_range: (0.0, 1.0),
            lambda_mix: 0.5,
            noise_std: 0.01,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let range_err = |what: &str| Err(Error::Config(format!("{what}: min exceeds max")));
        if self.interest_count.0 > self.interest_count.1 {
            return range_err("interest_count");
        }
        if self.risk_count.0 > self.risk_count.1 {
            return range_err("risk_count");
        }
        if self.std_range.0 > self.std_range.1 {
            return range_err("std_range");
        }
        if self.center_range.0 > self.center_range.1 {
            return range_err("center_range");
        }
        if !(self.std_range.0 > 0.0) {
            return Err(Error::Config("std_range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.center_range.0)
            || !(0.0..=1.0).contains(&self.center_range.1)
        {
            return Err(Error::Config("center_range must lie within [0, 1]".into()));
        }
        if !(self.max_anisotropy >= 1.0) {
            return Err(Error::Config("max_anisotropy must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(Error::Config("lambda_mix must lie within [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

fn sample_component(cfg: &GenerationConfig, rng: &mut Rng) -> GaussianComponent {
    let (lo, hi) = cfg.center_range;
    let center = Point::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
    let (smin, smax) = cfg.std_range;
    let s1 = rng.random_range(smin..=smax);
    let ratio = rng.random_range(1.0..=cfg.max_anisotropy);
    let s2 = if rng.random_bool(0.5) {
        s1 * ratio
    } else {
        s1 / ratio
    }
    .clamp(smin, smax);
    let theta = rng.random_range(0.0..PI);
    let (sin, cos) = theta.sin_cos();
    let (v1, v2) = (s1 * s1, s2 * s2);
    let a = cos * cos * v1 + sin * sin * v2;
    let c = sin * sin * v1 + cos * cos * v2;
    let b = cos * sin * (v1 - v2);
    GaussianComponent {
        center,
        spread: [[a, b], [b, c]],
        amplitude: 1.0,
    }
}

pub fn generate_field_spec(seed: u64, config: &GenerationConfig) -> Result<FieldSpec> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let n_interest = rng.random_range(config.interest_count.0..=config.interest_count.1);
    let n_risk = rng.random_range(config.risk_count.0..=config.risk_count.1);
    let interest_components = (0..n_interest)
        .map(|_| sample_component(config, &mut rng))
        .collect();
    let risk_components = (0..n_risk)
        .map(|_| sample_component(config, &mut rng))
        .collect();
    Ok(FieldSpec {
        interest_components,
        risk_components,
        lambda_mix: config.lambda_mix,
        noise_std: config.noise_std,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// The mixed interest field `y_mix`.
    Interest,
    Risk,
}

/// Immutable evaluator over a [`FieldSpec`].
#[derive(Clone, Debug)]
pub struct GroundTruth {
    spec: FieldSpec,
    grid: QueryGrid,
    interest_scale: f64,
    risk_scale: f64,
}

fn mixture(components: &[GaussianComponent], x: &Point) -> f64 {
    if components.is_empty() {
        return 0.0;
    }
    components.iter().map(|c| c.density(x)).sum::<f64>() / components.len() as f64
}

fn peak_scale(components: &[GaussianComponent], grid: &QueryGrid) -> f64 {
    let peak = grid
        .points()
        .iter()
        .map(|p| mixture(components, p))
        .fold(0.0, f64::max);
    if peak > 0.0 {
        1.0 / peak
    } else {
        0.0
    }
}

impl GroundTruth {
    pub fn new(spec: FieldSpec, grid_resolution: usize) -> Result<Self> {
        spec.validate()?;
        let grid = QueryGrid::new(grid_resolution)?;
        let interest_scale = peak_scale(&spec.interest_components, &grid);
        let risk_scale = peak_scale(&spec.risk_components, &grid);
        Ok(Self {
            spec,
            grid,
            interest_scale,
            risk_scale,
        })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn grid(&self) -> &QueryGrid {
        &self.grid
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda_mix
    }

    /// Normalized interest field. Unchecked; callers validate the domain.
    pub fn interest_at(&self, x: &Point) -> f64 {
        self.interest_scale * mixture(&self.spec.interest_components, x)
    }

    pub fn risk_at(&self, x: &Point) -> f64 {
        self.risk_scale * mixture(&self.spec.risk_components, x)
    }

    pub fn mixed_at(&self, x: &Point) -> f64 {
        self.interest_at(x) * (1.0 - self.spec.lambda_mix * self.risk_at(x))
    }

    pub fn eval_interest(&self, x: &Point) -> Result<f64> {
        x.check_workspace()?;
        Ok(self.interest_at(x))
    }

    pub fn eval_risk(&self, x: &Point) -> Result<f64> {
        x.check_workspace()?;
        Ok(self.risk_at(x))
    }

    pub fn eval_mixed(&self, x: &Point) -> Result<f64> {
        x.check_workspace()?;
        Ok(self.mixed_at(x))
    }

    pub fn eval(&self, x: &Point, kind: FieldKind) -> Result<f64> {
        match kind {
            FieldKind::Interest => self.eval_mixed(x),
            FieldKind::Risk => self.eval_risk(x),
        }
    }

    /// Noisy point measurement of the requested field.
    pub fn sample_measurement(&self, x: &Point, kind: FieldKind, rng: &mut Rng) -> Result<f64> {
        let value = self.eval(x, kind)?;
        if self.spec.noise_std == 0.0 {
            return Ok(value);
        }
        let noise =
            Normal::new(0.0, self.spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        Ok(value + noise.sample(rng))
    }

    /// Row-major grid dump of the requested field.
    pub fn grid_values(&self, kind: FieldKind) -> Vec<f64> {
        self.grid
            .points()
            .iter()
            .map(|p| match kind {
                FieldKind::Interest => self.mixed_at(p),
                FieldKind::Risk => self.risk_at(p),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(interest: Vec<GaussianComponent>, risk: Vec<GaussianComponent>) -> FieldSpec {
        FieldSpec {
            interest_components: interest,
            risk_components: risk,
            lambda_mix: 0.5,
            noise_std: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn default_generation_respects_counts() {
        let spec = generate_field_spec(42, &GenerationConfig::default()).unwrap();
        assert!((8..=12).contains(&spec.interest_components.len()));
        assert!((4..=6).contains(&spec.risk_components.len()));
        assert_eq!(spec.lambda_mix, 0.5);
        assert!(spec.interest_components.iter().all(|c| c.is_valid()));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_field_spec(42, &GenerationConfig::default()).unwrap();
        let b = generate_field_spec(42, &GenerationConfig::default()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn degenerate_count_range() {
        let cfg = GenerationConfig {
            interest_count: (10, 10),
            ..Default::default()
        };
        let spec = generate_field_spec(7, &cfg).unwrap();
        assert_eq!(spec.interest_components.len(), 10);
    }

    #[test]
    fn inverted_range_is_config_error() {
        let cfg = GenerationConfig {
            risk_count: (6, 4),
            ..Default::default()
        };
        assert!(matches!(
            generate_field_spec(1, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_risk_mixed_equals_interest() {
        let spec = generate_field_spec(
            3,
            &GenerationConfig {
                risk_count: (0, 0),
                ..Default::default()
            },
        )
        .unwrap();
        let truth = GroundTruth::new(spec, 30).unwrap();
        for p in truth.grid().points().iter().step_by(37) {
            assert_eq!(
                truth.eval_mixed(p).unwrap(),
                truth.eval_interest(p).unwrap()
            );
        }
    }

    #[test]
    fn peak_overlap_halves_mixed_value() {
        // both fields peak at the same grid node
        let g = Point::new(14.0 / 29.0, 14.0 / 29.0);
        let truth = GroundTruth::new(
            spec_with(
                vec![GaussianComponent::isotropic(g, 0.1, 1.0)],
                vec![GaussianComponent::isotropic(g, 0.1, 1.0)],
            ),
            30,
        )
        .unwrap();
        assert!((truth.eval_interest(&g).unwrap() - 1.0).abs() < 1e-12);
        assert!((truth.eval_risk(&g).unwrap() - 1.0).abs() < 1e-12);
        assert!((truth.eval_mixed(&g).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_component_matches_hand_density() {
        let std = 0.1_f64;
        let c = Point::new(0.5, 0.5);
        let truth = GroundTruth::new(
            spec_with(vec![GaussianComponent::isotropic(c, std, 1.0)], vec![]),
            30,
        )
        .unwrap();
        let dens = |p: Point| {
            let r2 = p.dist_sq(&c);
            (-(r2) / (2.0 * std * std)).exp() / (2.0 * PI * std * std)
        };
        // grid peak is the lattice point closest to the centre: (14/29, 14/29)
        let peak = dens(Point::new(14.0 / 29.0, 14.0 / 29.0));
        for p in [c, Point::new(0.62, 0.41)] {
            let expected = dens(p) / peak;
            assert!((truth.eval_interest(&p).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_workspace_is_domain_error() {
        let truth =
            GroundTruth::new(generate_field_spec(1, &Default::default()).unwrap(), 30).unwrap();
        assert!(matches!(
            truth.eval_mixed(&Point::new(1.2, 0.5)),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let spec = generate_field_spec(
            5,
            &GenerationConfig {
                noise_std: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let truth = GroundTruth::new(spec, 30).unwrap();
        let mut rng = seed::rng(1);
        let p = Point::new(0.3, 0.7);
        assert_eq!(
            truth
                .sample_measurement(&p, FieldKind::Interest, &mut rng)
                .unwrap(),
            truth.eval_mixed(&p).unwrap()
        );
    }

    #[test]
    fn measurement_mean_converges() {
        let spec = generate_field_spec(5, &GenerationConfig::default()).unwrap();
        let sigma = spec.noise_std;
        let truth = GroundTruth::new(spec, 30).unwrap();
        let mut rng = seed::rng(99);
        let p = Point::new(0.4, 0.6);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| {
                truth
                    .sample_measurement(&p, FieldKind::Interest, &mut rng)
                    .unwrap()
            })
            .sum::<f64>()
            / n as f64;
        // standard error is sigma / 100; allow three of them
        assert!((mean - truth.eval_mixed(&p).unwrap()).abs() < 3.0 * sigma / 100.0);
    }

    #[test]
    fn risk_far_from_components_is_negligible() {
        let std = 0.05;
        let truth = GroundTruth::new(
            spec_with(
                vec![GaussianComponent::isotropic(Point::new(0.5, 0.5), 0.1, 1.0)],
                vec![GaussianComponent::isotropic(Point::new(0.1, 0.1), std, 1.0)],
            ),
            30,
        )
        .unwrap();
        let q = Point::new(0.9, 0.9);
        // the normalized field is exp(-r^2 / 2 std^2) divided by the grid peak of
        // that same kernel, and the grid peak is at least exp(-h^2 / 4 std^2)
        // with h the grid spacing
        let h: f64 = 1.0 / 29.0;
        let bound = (-q.dist_sq(&Point::new(0.1, 0.1)) / (2.0 * std * std)).exp()
            / (-(h * h) / (4.0 * std * std)).exp();
        let v = truth.eval_risk(&q).unwrap();
        assert!(v <= bound && bound < 1e-3);
    }

    #[test]
    fn json_roundtrip_keeps_layout() {
        let spec = generate_field_spec(11, &Default::default()).unwrap();
        let json = spec.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let c = &value["interest_components"][0];
        assert!(c["center"].is_array());
        assert_eq!(c["spread"].as_array().unwrap().len(), 2);
        assert_eq!(FieldSpec::from_json(&json).unwrap(), spec);
    }
}
