use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

const NOISE_FLOOR: f64 = 1e-6;
const LATTICE: usize = 64;
const EI_XI: f64 = 0.01;

/// Search over two class weights (adhesive wear, surface spalling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesOptSpec {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub initial_samples: usize,
    /// Surrogate-guided evaluations after the initial samples.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BayesOptSpec {
    fn default() -> Self {
        BayesOptSpec {
            lower: [1.0, 1.0],
            upper: [10.0, 10.0],
            initial_samples: 5,
            iterations: 20,
            seed: 0,
        }
    }
}

impl BayesOptSpec {
    pub fn validate(&self) -> Result<()> {
        for d in 0..2 {
            if !(self.lower[d] < self.upper[d]) || !self.lower[d].is_finite() || !self.upper[d].is_finite() {
                return Err(Error::config(format!(
                    "search box [{}, {}] along axis {d} is degenerate",
                    self.lower[d], self.upper[d]
                )));
            }
        }
        if self.initial_samples == 0 {
            return Err(Error::config("at least one initial sample is required"));
        }
        if self.iterations < self.initial_samples {
            return Err(Error::config(format!(
                "{} iterations are fewer than the {} initial samples",
                self.iterations, self.initial_samples
            )));
        }
        Ok(())
    }

    fn from_unit(&self, u: [f64; 2]) -> [f64; 2] {
        std::array::from_fn(|d| self.lower[d] + u[d] * (self.upper[d] - self.lower[d]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesStep {
    pub point: [f64; 2],
    pub value: f64,
    pub incumbent_point: [f64; 2],
    pub incumbent_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesOutcome {
    pub best_point: [f64; 2],
    pub best_value: f64,
    pub trace: Vec<BayesStep>,
}

/// Zero-mean GP with a unit-variance RBF kernel on standardised targets.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    xs: Vec<[f64; 2]>,
    length_scale: f64,
    noise: f64,
    y_mean: f64,
    y_std: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

fn rbf(a: [f64; 2], b: [f64; 2], ell: f64) -> f64 {
    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    (-0.5 * d2 / (ell * ell)).exp()
}

fn gram(xs: &[[f64; 2]], ell: f64, noise: f64) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| rbf(xs[i], xs[j], ell) + if i == j { noise } else { 0.0 })
}

/// Cholesky factor of the Gram matrix, adding diagonal jitter in decades
/// until it succeeds.
fn factor(xs: &[[f64; 2]], ell: f64) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let mut noise = NOISE_FLOOR;
    for _ in 0..7 {
        if let Some(c) = gram(xs, ell, noise).cholesky() {
            return Ok((c, noise));
        }
        noise *= 10.0;
    }
    Err(Error::LinAlg(format!(
        "kernel matrix with length scale {ell} stayed singular up to jitter {noise:e}"
    )))
}

impl GaussianProcess {
    /// Length scales tried when maximising the marginal likelihood.
    pub fn length_scale_grid() -> Vec<f64> {
        (0..30).map(|i| 0.03 * 100f64.powf(i as f64 / 29.0)).collect()
    }

    /// Fits to observations at points of the unit square.
    pub fn fit(xs: &[[f64; 2]], ys: &[f64]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::config("GP needs as many targets as points, at least one"));
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(ys.len(), ys.iter().map(|v| (v - y_mean) / y_std));

        let mut best: Option<(f64, GaussianProcess)> = None;
        let mut last_err = None;
        for ell in Self::length_scale_grid() {
            let (chol, noise) = match factor(xs, ell) {
                Ok(f) => f,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };
            let alpha = chol.solve(&y);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let lml = -0.5 * y.dot(&alpha) - log_det;
            if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((
                    lml,
                    GaussianProcess {
                        xs: xs.to_vec(),
                        length_scale: ell,
                        noise,
                        y_mean,
                        y_std,
                        chol,
                        alpha,
                    },
                ));
            }
        }
        best.map(|(_, gp)| gp)
            .ok_or_else(|| last_err.unwrap_or_else(|| Error::LinAlg("no length scale fitted".into())))
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Posterior mean and standard deviation in the original target units.
    pub fn predict(&self, x: [f64; 2]) -> (f64, f64) {
        let k = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|&xi| rbf(x, xi, self.length_scale)));
        let mean = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("factor is non-singular");
        let var = (1.0 + self.noise - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_std * mean, self.y_std * var.sqrt())
    }
}

fn expected_improvement(mean: f64, sd: f64, best: f64, scale: f64) -> f64 {
    let gain = mean - best - EI_XI * scale;
    if sd <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::standard();
    gain * n.cdf(z) + sd * n.pdf(z)
}

/// Maximises `objective` over the box of `spec`.
///
/// After `initial_samples` uniform draws, each iteration fits a
/// [`GaussianProcess`] to all evaluations and evaluates the point of a
/// 64 x 64 lattice over the box with the highest expected improvement.
pub fn bayes_opt<F>(spec: &BayesOptSpec, mut objective: F) -> Result<BayesOutcome>
where
    F: FnMut([f64; 2]) -> Result<f64>,
{
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lattice: Vec<[f64; 2]> = (0..LATTICE * LATTICE)
        .map(|i| {
            let step = 1.0 / (LATTICE - 1) as f64;
            [(i % LATTICE) as f64 * step, (i / LATTICE) as f64 * step]
        })
        .collect();

    let mut xs: Vec<[f64; 2]> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut trace: Vec<BayesStep> = Vec::new();

    let mut record = |u: [f64; 2], xs: &mut Vec<[f64; 2]>, ys: &mut Vec<f64>| -> Result<()> {
        let point = spec.from_unit(u);
        let value = objective(point)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective returned {value} at {point:?}")));
        }
        xs.push(u);
        ys.push(value);
        let (incumbent_point, incumbent_value) = match trace.last() {
            Some(s) if s.incumbent_value >= value => (s.incumbent_point, s.incumbent_value),
            _ => (point, value),
        };
        trace.push(BayesStep {
            point,
            value,
            incumbent_point,
            incumbent_value,
        });
        Ok(())
    };

    for _ in 0..spec.initial_samples {
        let u = [rng.random::<f64>(), rng.random::<f64>()];
        record(u, &mut xs, &mut ys)?;
    }
    for _ in 0..spec.iterations {
        let gp = GaussianProcess::fit(&xs, &ys)?;
        let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut choice = None;
        let mut best_ei = f64::NEG_INFINITY;
        for &c in &lattice {
            if xs.iter().any(|x| (x[0] - c[0]).abs() < 1e-12 && (x[1] - c[1]).abs() < 1e-12) {
                continue;
            }
            let (m, s) = gp.predict(c);
            let ei = expected_improvement(m, s, best, gp.y_std);
            if ei > best_ei {
                best_ei = ei;
                choice = Some(c);
            }
        }
        let u = choice.ok_or_else(|| Error::config("candidate lattice exhausted"))?;
        record(u, &mut xs, &mut ys)?;
    }
    let last = trace.last().expect("at least one evaluation");
    Ok(BayesOutcome {
        best_point: last.incumbent_point,
        best_value: last.incumbent_value,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(w: [f64; 2]) -> Result<f64> {
        Ok(-(w[0] - 3.0).powi(2) - (w[1] - 2.0).powi(2))
    }

    #[test]
    fn finds_the_bowl_minimum() {
        let out = bayes_opt(&BayesOptSpec::default(), bowl).unwrap();
        assert_eq!(out.trace.len(), 25);
        let d = ((out.best_point[0] - 3.0).powi(2) + (out.best_point[1] - 2.0).powi(2)).sqrt();
        assert!(d < 0.5, "{:?}", out.best_point);
    }

    #[test]
    fn incumbent_never_gets_worse() {
        let out = bayes_opt(&BayesOptSpec { seed: 3, ..Default::default() }, bowl).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].incumbent_value >= w[0].incumbent_value);
        }
        let max = out.trace.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_value, max);
    }

    #[test]
    fn constant_objective() {
        let out = bayes_opt(&BayesOptSpec::default(), |_| Ok(0.25)).unwrap();
        assert_eq!(out.best_value, 0.25);
    }

    #[test]
    fn gp_interpolates_its_data() {
        let xs = [[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]];
        let ys = [1.0, -2.0, 0.5];
        let gp = GaussianProcess::fit(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            let (m, s) = gp.predict(*x);
            assert!((m - y).abs() < 1e-2, "{m} vs {y}");
            assert!(s < 0.1);
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let spec = BayesOptSpec {
            lower: [1.0, 5.0],
            upper: [10.0, 5.0],
            ..Default::default()
        };
        assert!(bayes_opt(&spec, bowl).is_err());
    }
}
