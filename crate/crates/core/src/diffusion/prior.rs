//! Analytic Gaussian-mixture data prior and its noised-marginal score.
//!
//! Under the variance-preserving forward process a component `N(mu, v I)`
//! becomes `N(sqrt(abar) mu, (abar v + 1 - abar) I)` at step `tau`, so the
//! marginal stays a mixture and its score is available in closed form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{ensure_dim, Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct MixtureComponent<F> {
    pub weight: F,
    pub mean: Vec<F>,
    pub variance: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar", try_from = "RawPrior<F>")]
pub struct GaussianMixturePrior<F> {
    components: Vec<MixtureComponent<F>>,
    dimension: usize,
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct RawPrior<F> {
    components: Vec<MixtureComponent<F>>,
    dimension: usize,
}

impl<F: Scalar> TryFrom<RawPrior<F>> for GaussianMixturePrior<F> {
    type Error = Error;

    fn try_from(raw: RawPrior<F>) -> Result<Self> {
        Self::new(raw.components, raw.dimension)
    }
}

/// Per-component quantities of the noised marginal at one state.
struct Marginal<F> {
    resp: Vec<F>,
    var: Vec<F>,
    /// `-(x - sqrt(abar) mu_k) / var_k` for each component.
    comp_score: Vec<Vec<F>>,
}

impl<F: Scalar> GaussianMixturePrior<F> {
    pub fn new(components: Vec<MixtureComponent<F>>, dimension: usize) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("mixture"));
        }
        for c in &components {
            ensure_dim(dimension, c.mean.len())?;
            if !(c.weight > F::zero()) || !c.weight.is_finite() {
                return Err(Error::InvalidRange {
                    name: "weight",
                    detail: format!("{} must be positive", c.weight),
                });
            }
            if !(c.variance >= F::zero()) || !c.variance.is_finite() {
                return Err(Error::InvalidRange {
                    name: "variance",
                    detail: format!("{} must be non-negative", c.variance),
                });
            }
        }
        let total: F = components.iter().map(|c| c.weight).sum();
        let tol = F::of(1e-12).max(F::epsilon() * F::of(16.0 * components.len() as f64));
        if (total - F::one()).abs() > tol {
            return Err(Error::InvalidRange {
                name: "weight",
                detail: format!("weights sum to {total}, expected 1"),
            });
        }
        Ok(Self {
            components,
            dimension,
        })
    }

    /// Equal-weight mixture with one component per example, all sharing `variance`.
    pub fn empirical(examples: Vec<Vec<F>>, variance: F) -> Result<Self> {
        let dim = examples
            .first()
            .ok_or(Error::Empty("example corpus"))?
            .len();
        let w = F::one() / F::of(examples.len() as f64);
        let components = examples
            .into_iter()
            .map(|mean| MixtureComponent {
                weight: w,
                mean,
                variance,
            })
            .collect();
        Self::new(components, dim)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn components(&self) -> &[MixtureComponent<F>] {
        &self.components
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    fn marginal(&self, x: &[F], tau: usize, sched: &NoiseSchedule<F>) -> Result<Marginal<F>> {
        ensure_dim(self.dimension, x.len())?;
        sched.check_step(tau)?;
        let ab = sched.alpha_bar(tau);
        let sab = ab.sqrt();
        let n = F::of(self.dimension as f64);
        let two_pi = F::of(std::f64::consts::TAU);
        let mut log_terms = Vec::with_capacity(self.components.len());
        let mut var = Vec::with_capacity(self.components.len());
        let mut comp_score = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s = ab * c.variance + (F::one() - ab);
            let g: Vec<F> = x
                .iter()
                .zip(&c.mean)
                .map(|(&xi, &mi)| -(xi - sab * mi) / s)
                .collect();
            // |x - m|^2 / s = s * |g|^2
            let quad = s * g.iter().map(|&v| v * v).sum::<F>();
            log_terms.push(c.weight.ln() - F::half() * quad - F::half() * n * (two_pi * s).ln());
            var.push(s);
            comp_score.push(g);
        }
        let lse = log_sum_exp(&log_terms);
        let resp = log_terms.iter().map(|&l| (l - lse).exp()).collect();
        Ok(Marginal {
            resp,
            var,
            comp_score,
        })
    }

    /// `log p_tau(x)` of the noised marginal.
    pub fn log_density(&self, x: &[F], tau: usize, sched: &NoiseSchedule<F>) -> Result<F> {
        ensure_dim(self.dimension, x.len())?;
        sched.check_step(tau)?;
        let ab = sched.alpha_bar(tau);
        let sab = ab.sqrt();
        let n = F::of(self.dimension as f64);
        let two_pi = F::of(std::f64::consts::TAU);
        let terms: Vec<F> = self
            .components
            .iter()
            .map(|c| {
                let s = ab * c.variance + (F::one() - ab);
                let quad: F = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(&xi, &mi)| (xi - sab * mi) * (xi - sab * mi))
                    .sum();
                c.weight.ln() - quad / (F::two() * s) - F::half() * n * (two_pi * s).ln()
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Gradient of `log p_tau` at `x`.
    pub fn score(&self, x: &[F], tau: usize, sched: &NoiseSchedule<F>) -> Result<Vec<F>> {
        let m = self.marginal(x, tau, sched)?;
        Ok(mix(&m.resp, &m.comp_score, self.dimension))
    }

    /// Score together with the Hessian of `log p_tau` applied to `v`.
    ///
    /// `H = -(sum_k r_k / s_k) I + sum_k r_k g_k g_k^T - s s^T`.
    pub fn score_and_hvp(
        &self,
        x: &[F],
        tau: usize,
        sched: &NoiseSchedule<F>,
        v: &[F],
    ) -> Result<(Vec<F>, Vec<F>)> {
        ensure_dim(self.dimension, v.len())?;
        let m = self.marginal(x, tau, sched)?;
        let score = mix(&m.resp, &m.comp_score, self.dimension);
        let diag: F = m.resp.iter().zip(&m.var).map(|(&r, &s)| r / s).sum();
        let sv: F = dot(&score, v);
        let mut out: Vec<F> = v
            .iter()
            .zip(&score)
            .map(|(&vi, &si)| -diag * vi - si * sv)
            .collect();
        for (r, g) in m.resp.iter().zip(&m.comp_score) {
            if *r == F::zero() {
                continue;
            }
            let coef = *r * dot(g, v);
            for (o, &gi) in out.iter_mut().zip(g) {
                *o += coef * gi;
            }
        }
        Ok((score, out))
    }
}

fn mix<F: Scalar>(resp: &[F], comp_score: &[Vec<F>], dim: usize) -> Vec<F> {
    let mut out = vec![F::zero(); dim];
    for (r, g) in resp.iter().zip(comp_score) {
        if *r == F::zero() {
            continue;
        }
        for (o, &gi) in out.iter_mut().zip(g) {
            *o += *r * gi;
        }
    }
    out
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
