//! Gaussian-process belief over a fixed query lattice.
//!
//! Posterior with a zero prior mean and a Matérn 3/2 kernel:
//!
//! `mean = K(X*, X) [K(X, X) + s^2 I]^-1 Y`
//!
//! `cov  = K(X*, X*) - K(X*, X) [K(X, X) + s^2 I]^-1 K(X*, X)^T`
//!
//! The Gram matrix is factored with a Cholesky decomposition. Only the
//! marginal variances are kept in memory; the full covariance is rebuilt on
//! request from the cached factor.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// First jitter tried when the Gram matrix will not factor.
    pub jitter: f64,
    pub max_jitter: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            lengthscale: 0.2,
            signal_variance: 1.0,
            noise_variance: 1e-4,
            jitter: 1e-8,
            max_jitter: 1e-4,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.signal_variance > 0.0 && self.jitter > 0.0) {
            return Err(Error::Config(
                "lengthscale, signal_variance and jitter must be positive".into(),
            ));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Config("noise_variance must be non-negative".into()));
        }
        if !(self.max_jitter >= self.jitter) {
            return Err(Error::Config("max_jitter must be at least jitter".into()));
        }
        Ok(())
    }

    /// Matérn 3/2 covariance between two positions.
    pub fn eval(&self, a: &Point, b: &Point) -> f64 {
        let s = SQRT_3 * a.dist(b) / self.lengthscale;
        self.signal_variance * (1.0 + s) * (-s).exp()
    }

    fn gram(&self, xs: &[Point]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance + self.noise_variance;
            for j in 0..i {
                let v = self.eval(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn cross(&self, rows: &[Point], cols: &[Point]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.eval(&rows[i], &cols[j]))
    }

    /// Factors `k`, adding diagonal jitter when plain factorization fails.
    fn factor(&self, k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok(c);
        }
        let mut jitter = self.jitter;
        loop {
            let mut kj = k.clone();
            for i in 0..kj.nrows() {
                kj[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(kj) {
                return Ok(c);
            }
            if jitter >= self.max_jitter {
                let max_diag = (0..k.nrows()).map(|i| k[(i, i)]).fold(f64::MIN, f64::max);
                return Err(Error::Numerical {
                    jitter,
                    size: k.nrows(),
                    max_diag,
                });
            }
            jitter = (jitter * 10.0).min(self.max_jitter);
        }
    }
}

/// Regular `res x res` lattice over the unit square, row-major
/// (`index = row * res + col`, `x = col / (res - 1)`, `y = row / (res - 1)`).
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGrid {
    resolution: usize,
    points: Vec<Point>,
}

impl QueryGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Config("grid resolution must be at least 2".into()));
        }
        let step = 1.0 / (resolution - 1) as f64;
        let points = (0..resolution * resolution)
            .map(|i| {
                Point::new(
                    (i % resolution) as f64 * step,
                    (i / resolution) as f64 * step,
                )
            })
            .collect();
        Ok(Self { resolution, points })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }
}

/// Grid indices flagged by the upper-confidence test `mean + beta * var >= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestRegion {
    pub members: Vec<usize>,
    pub threshold: f64,
    pub beta: f64,
}

#[derive(Clone, Debug)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    /// `L^-1 K(X, X*)`, one column per grid point.
    v: DMatrix<f64>,
    /// `L^-1 Y`.
    w: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct GpBelief {
    params: KernelParams,
    grid: Arc<QueryGrid>,
    train_x: Vec<Point>,
    train_y: Vec<f64>,
    factor: Option<Factor>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GpBelief {
    pub fn new(params: KernelParams, grid: Arc<QueryGrid>) -> Result<Self> {
        params.validate()?;
        let n = grid.len();
        Ok(Self {
            params,
            mean: vec![0.0; n],
            var: vec![params.signal_variance; n],
            grid,
            train_x: Vec::new(),
            train_y: Vec::new(),
            factor: None,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn grid(&self) -> &Arc<QueryGrid> {
        &self.grid
    }

    pub fn train_x(&self) -> &[Point] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn num_measurements(&self) -> usize {
        self.train_x.len()
    }

    /// Posterior mean over the grid.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Posterior marginal variances over the grid.
    pub fn variance(&self) -> &[f64] {
        &self.var
    }

    pub fn covariance_trace(&self) -> f64 {
        self.var.iter().sum()
    }

    /// Returns a new belief conditioned on the extra measurements.
    pub fn add_measurements(&self, batch: &[(Point, f64)]) -> Result<GpBelief> {
        let mut next = self.clone();
        next.ingest(batch)?;
        Ok(next)
    }

    /// In-place form of [`GpBelief::add_measurements`].
    pub fn ingest(&mut self, batch: &[(Point, f64)]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        for (p, _) in batch {
            p.check_workspace()?;
        }
        let mut xs = self.train_x.clone();
        let mut ys = self.train_y.clone();
        xs.extend(batch.iter().map(|b| b.0));
        ys.extend(batch.iter().map(|b| b.1));
        self.refit(xs, ys)
    }

    fn refit(&mut self, xs: Vec<Point>, ys: Vec<f64>) -> Result<()> {
        let chol = self.params.factor(self.params.gram(&xs))?;
        let mut v = self.params.cross(&xs, self.grid.points());
        chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let mut w = DVector::from_column_slice(&ys);
        chol.l_dirty().solve_lower_triangular_mut(&mut w);
        let sf2 = self.params.signal_variance;
        for (j, col) in v.column_iter().enumerate() {
            self.mean[j] = col.dot(&w);
            self.var[j] = (sf2 - col.norm_squared()).max(0.0);
        }
        self.train_x = xs;
        self.train_y = ys;
        self.factor = Some(Factor { chol, v, w });
        Ok(())
    }

    /// Full posterior mean vector and covariance matrix over the grid.
    pub fn posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mean = DVector::from_column_slice(&self.mean);
        let pts = self.grid.points();
        let mut cov = DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
            self.params.eval(&pts[i], &pts[j])
        });
        if let Some(f) = &self.factor {
            cov -= f.v.transpose() * &f.v;
        }
        (mean, cov)
    }

    /// Posterior mean and variance at arbitrary positions.
    pub fn predict(&self, points: &[Point]) -> Vec<(f64, f64)> {
        let sf2 = self.params.signal_variance;
        let Some(f) = &self.factor else {
            return vec![(0.0, sf2); points.len()];
        };
        let mut v = self.params.cross(&self.train_x, points);
        f.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        v.column_iter()
            .map(|col| (col.dot(&f.w), (sf2 - col.norm_squared()).max(0.0)))
            .collect()
    }

    /// Trace the posterior would have after measuring at `sites`.
    ///
    /// Posterior variance does not depend on the observed values, so this is
    /// exact. Uses a rank-|sites| downdate of the current posterior instead of
    /// refactoring the whole training set.
    pub fn predicted_trace(&self, sites: &[Point]) -> Result<f64> {
        Ok(self.predicted_variance(sites)?.iter().sum())
    }

    pub fn predicted_variance(&self, sites: &[Point]) -> Result<Vec<f64>> {
        if sites.is_empty() {
            return Ok(self.var.clone());
        }
        let grid = self.grid.points();
        // posterior cross-covariance between sites and grid, and among sites
        let mut c = self.params.cross(sites, grid);
        let mut pss = self.params.gram(sites);
        if let Some(f) = &self.factor {
            let mut ws = self.params.cross(&self.train_x, sites);
            f.chol.l_dirty().solve_lower_triangular_mut(&mut ws);
            c -= ws.transpose() * &f.v;
            pss -= ws.transpose() * &ws;
        }
        let chol = self.params.factor(pss)?;
        chol.l_dirty().solve_lower_triangular_mut(&mut c);
        Ok(c.column_iter()
            .zip(&self.var)
            .map(|(col, v)| (v - col.norm_squared()).max(0.0))
            .collect())
    }

    pub fn high_interest_set(&self, threshold: f64, beta: f64) -> Result<InterestRegion> {
        if !(beta > 0.0) {
            return Err(Error::Argument("beta must be positive".into()));
        }
        let members = self
            .mean
            .iter()
            .zip(&self.var)
            .enumerate()
            .filter(|(_, (m, v))| *m + beta * *v >= threshold)
            .map(|(i, _)| i)
            .collect();
        Ok(InterestRegion {
            members,
            threshold,
            beta,
        })
    }

    /// `mean + beta * std` over the grid.
    pub fn risk_ucb(&self, beta: f64) -> Result<Vec<f64>> {
        if !(beta >= 0.0) {
            return Err(Error::Argument("beta must be non-negative".into()));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + beta * v.sqrt())
            .collect())
    }

    /// Row-major CSV dump: `index,x,y,mean,variance`.
    pub fn write_snapshot_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["index", "x", "y", "mean", "variance"])?;
        for (i, p) in self.grid.points().iter().enumerate() {
            wtr.write_record(&[
                i.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                self.mean[i].to_string(),
                self.var[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn belief(res: usize) -> GpBelief {
        GpBelief::new(
            KernelParams::default(),
            Arc::new(QueryGrid::new(res).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let k = KernelParams {
            signal_variance: 2.5,
            ..Default::default()
        };
        let p = Point::new(0.3, 0.3);
        assert_eq!(k.eval(&p, &p), 2.5);
    }

    #[test]
    fn kernel_closed_form_value() {
        let k = KernelParams::default();
        let v = k.eval(&Point::new(0.0, 0.0), &Point::new(0.2, 0.0));
        let expected = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.48335).abs() < 1e-5);
    }

    #[test]
    fn kernel_tail_is_small() {
        let k = KernelParams::default();
        let v = k.eval(&Point::new(0.0, 0.0), &Point::new(2.0, 0.0));
        assert!(v < 1e-5);
        assert_eq!(v, k.eval(&Point::new(2.0, 0.0), &Point::new(0.0, 0.0)));
    }

    #[test]
    fn prior_trace_scales_with_grid() {
        assert!((belief(30).covariance_trace() - 900.0).abs() < 1e-6);
        assert!((belief(5).covariance_trace() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn empty_posterior_is_prior() {
        let b = belief(5);
        let (mean, cov) = b.posterior();
        assert!(mean.iter().all(|&m| m == 0.0));
        let pts = b.grid().points();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(cov[(i, j)], KernelParams::default().eval(&pts[i], &pts[j]));
            }
        }
    }

    #[test]
    fn noiseless_observation_interpolates() {
        let params = KernelParams {
            noise_variance: 0.0,
            ..Default::default()
        };
        let grid = Arc::new(QueryGrid::new(30).unwrap());
        let g = grid.points()[123];
        let b = GpBelief::new(params, grid).unwrap();
        let b = b.add_measurements(&[(g, 0.8)]).unwrap();
        assert!((b.mean()[123] - 0.8).abs() < 1e-6);
        assert!(b.variance()[123] <= 1e-6);
    }

    #[test]
    fn empty_batch_is_noop() {
        let b = belief(10)
            .add_measurements(&[(Point::new(0.2, 0.2), 1.0)])
            .unwrap();
        let c = b.add_measurements(&[]).unwrap();
        assert_eq!(b.covariance_trace(), c.covariance_trace());
        assert_eq!(b.mean(), c.mean());
    }

    #[test]
    fn duplicate_sites_stay_factorable() {
        let p = Point::new(0.4, 0.4);
        let b = belief(10)
            .add_measurements(&[(p, 0.5), (p, 0.52), (p, 0.49)])
            .unwrap();
        assert_eq!(b.num_measurements(), 3);
        assert!(b.covariance_trace() < 100.0);
    }

    #[test]
    fn noiseless_duplicates_use_jitter() {
        let params = KernelParams {
            noise_variance: 0.0,
            ..Default::default()
        };
        let b = GpBelief::new(params, Arc::new(QueryGrid::new(6).unwrap())).unwrap();
        let p = Point::new(0.4, 0.4);
        let b = b.add_measurements(&[(p, 0.5), (p, 0.5)]).unwrap();
        assert!(b.variance().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn outside_measurement_rejected() {
        assert!(belief(5)
            .add_measurements(&[(Point::new(-0.1, 0.5), 1.0)])
            .is_err());
    }

    #[test]
    fn vacuous_threshold_selects_everything() {
        let b = belief(30)
            .add_measurements(&[(Point::new(0.5, 0.5), 0.9)])
            .unwrap();
        assert_eq!(b.high_interest_set(-1e9, 1.0).unwrap().members.len(), 900);
        assert_eq!(
            belief(30)
                .high_interest_set(0.5, 1.0)
                .unwrap()
                .members
                .len(),
            900
        );
        assert!(b.high_interest_set(0.5, 0.0).is_err());
    }

    #[test]
    fn prior_risk_ucb_is_one() {
        let b = belief(30);
        assert!(b.risk_ucb(1.0).unwrap().iter().all(|&v| v == 1.0));
        let b = b.add_measurements(&[(Point::new(0.1, 0.9), 0.3)]).unwrap();
        assert_eq!(b.risk_ucb(0.0).unwrap(), b.mean());
    }

    #[test]
    fn predict_matches_grid_values() {
        let b = belief(8)
            .add_measurements(&[(Point::new(0.1, 0.2), 0.4), (Point::new(0.7, 0.6), 0.9)])
            .unwrap();
        let pts = b.grid().points().to_vec();
        for (i, (m, v)) in b.predict(&pts).into_iter().enumerate() {
            assert!((m - b.mean()[i]).abs() < 1e-12);
            assert!((v - b.variance()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_csv_is_row_major() {
        let b = belief(3);
        let mut buf = Vec::new();
        b.write_snapshot_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[2], "1,0.5,0,0,1");
        assert_eq!(lines[4], "3,0,0.5,0,1");
    }
}
