//! Variance-preserving diffusion: schedule, analytic score, Tweedie denoising
//! and the measurement-guided reverse step.

mod prior;
mod schedule;

pub use prior::{GaussianMixturePrior, MixtureComponent};
pub use schedule::{make_schedule, BetaCurve, NoiseSchedule, SigmaKind};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;

/// Source of `grad log p_tau`. The Hessian-vector product is optional and
/// only needed for exact guidance.
pub trait ScoreModel<F: Scalar>: Sync {
    fn dimension(&self) -> usize;

    fn score(&self, x: &[F], tau: usize, sched: &NoiseSchedule<F>) -> Result<Vec<F>>;

    fn score_and_hvp(
        &self,
        _x: &[F],
        _tau: usize,
        _sched: &NoiseSchedule<F>,
        _v: &[F],
    ) -> Option<Result<(Vec<F>, Vec<F>)>> {
        None
    }
}

impl<F: Scalar> ScoreModel<F> for GaussianMixturePrior<F> {
    fn dimension(&self) -> usize {
        GaussianMixturePrior::dimension(self)
    }

    fn score(&self, x: &[F], tau: usize, sched: &NoiseSchedule<F>) -> Result<Vec<F>> {
        GaussianMixturePrior::score(self, x, tau, sched)
    }

    fn score_and_hvp(
        &self,
        x: &[F],
        tau: usize,
        sched: &NoiseSchedule<F>,
        v: &[F],
    ) -> Option<Result<(Vec<F>, Vec<F>)>> {
        Some(GaussianMixturePrior::score_and_hvp(self, x, tau, sched, v))
    }
}

/// Score of a GMM prior; free-function form of [`GaussianMixturePrior::score`].
pub fn gmm_score<F: Scalar>(
    x: &[F],
    tau: usize,
    prior: &GaussianMixturePrior<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Vec<F>> {
    prior.score(x, tau, sched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Treat the denoiser Jacobian as `I / sqrt(abar)`.
    #[default]
    ScaledIdentity,
    /// Chain rule through the closed-form score Hessian.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub zeta: f64,
    pub jacobian_mode: JacobianMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            zeta: 1.0,
            jacobian_mode: JacobianMode::ScaledIdentity,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta.is_finite() && self.zeta >= 0.0) {
            return Err(Error::config(
                "diffusion.zeta",
                format!("{} must be finite and >= 0", self.zeta),
            ));
        }
        Ok(())
    }
}

/// Observed coordinates `[x]_Q` in model space.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observed<F> {
    coords: Vec<usize>,
    values: Vec<F>,
}

impl<F: Scalar> Observed<F> {
    pub fn new() -> Self {
        Self {
            coords: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, coord: usize, value: F) {
        self.coords.push(coord);
        self.values.push(value);
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, F)>) -> Self {
        let mut o = Self::new();
        for (c, v) in pairs {
            o.push(c, v);
        }
        o
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, F)> + '_ {
        self.coords.iter().copied().zip(self.values.iter().copied())
    }

    fn check(&self, dim: usize) -> Result<()> {
        match self.coords.iter().find(|&&c| c >= dim) {
            Some(&c) => Err(Error::UnknownLocation {
                location: c,
                count: dim,
            }),
            None => Ok(()),
        }
    }
}

/// One-step estimate of the clean sample: `(x + (1 - abar) s) / sqrt(abar)`.
pub fn tweedie_denoise<F: Scalar>(
    x_tau: &[F],
    tau: usize,
    model: &impl ScoreModel<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Vec<F>> {
    let s = model.score(x_tau, tau, sched)?;
    Ok(tweedie_from_score(x_tau, &s, tau, sched))
}

pub(crate) fn tweedie_from_score<F: Scalar>(
    x: &[F],
    s: &[F],
    tau: usize,
    sched: &NoiseSchedule<F>,
) -> Vec<F> {
    let ab = sched.alpha_bar(tau);
    let inv = F::one() / ab.sqrt();
    x.iter()
        .zip(s)
        .map(|(&xi, &si)| (xi + (F::one() - ab) * si) * inv)
        .collect()
}

/// Posterior-mean ancestral update towards step `tau - 1`, before guidance.
pub fn ancestral_step<F: Scalar>(
    x_tau: &[F],
    x_hat: &[F],
    tau: usize,
    z: &[F],
    sched: &NoiseSchedule<F>,
) -> Result<Vec<F>> {
    sched.check_step(tau)?;
    ensure_dim(x_tau.len(), x_hat.len())?;
    ensure_dim(x_tau.len(), z.len())?;
    let ab = sched.alpha_bar(tau);
    let ab_prev = sched.alpha_bar(tau - 1);
    let denom = F::one() - ab;
    let c_x = sched.alpha(tau).sqrt() * (F::one() - ab_prev) / denom;
    let c_hat = ab_prev.sqrt() * sched.beta(tau) / denom;
    let sigma = sched.sigma_tilde(tau);
    Ok(x_tau
        .iter()
        .zip(x_hat)
        .zip(z)
        .map(|((&x, &h), &n)| c_x * x + c_hat * h + sigma * n)
        .collect())
}

/// Gradient w.r.t. `x_tau` of `|[y]_Q - [x_hat]_Q|^2`.
pub fn guidance_gradient<F: Scalar>(
    x_tau: &[F],
    x_hat: &[F],
    observed: &Observed<F>,
    tau: usize,
    mode: JacobianMode,
    model: &impl ScoreModel<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Vec<F>> {
    let dim = x_tau.len();
    ensure_dim(dim, x_hat.len())?;
    observed.check(dim)?;
    sched.check_step(tau)?;
    let ab = sched.alpha_bar(tau);
    let mut resid = vec![F::zero(); dim];
    for (q, y) in observed.iter() {
        resid[q] = x_hat[q] - y;
    }
    match mode {
        JacobianMode::ScaledIdentity => {
            let k = F::two() / ab.sqrt();
            Ok(resid.into_iter().map(|r| k * r).collect())
        }
        JacobianMode::Exact => {
            if observed.is_empty() {
                return Ok(resid);
            }
            let (_, hv) = model
                .score_and_hvp(x_tau, tau, sched, &resid)
                .ok_or_else(|| {
                    Error::config(
                        "diffusion.jacobian_mode",
                        "score model has no Hessian; use scaled-identity",
                    )
                })??;
            let k = F::two() / ab.sqrt();
            let one_m = F::one() - ab;
            Ok(resid
                .iter()
                .zip(&hv)
                .map(|(&r, &h)| k * (r + one_m * h))
                .collect())
        }
    }
}

/// `x' - zeta * grad`, the measurement-guided reverse step.
#[allow(clippy::too_many_arguments)]
pub fn guidance_step<F: Scalar>(
    x_prime: &[F],
    x_tau: &[F],
    x_hat: &[F],
    observed: &Observed<F>,
    tau: usize,
    cfg: &GuidanceConfig,
    model: &impl ScoreModel<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Vec<F>> {
    ensure_dim(x_tau.len(), x_prime.len())?;
    observed.check(x_tau.len())?;
    if observed.is_empty() || cfg.zeta == 0.0 {
        return Ok(x_prime.to_vec());
    }
    let g = guidance_gradient(x_tau, x_hat, observed, tau, cfg.jacobian_mode, model, sched)?;
    let zeta = F::of(cfg.zeta);
    Ok(x_prime
        .iter()
        .zip(&g)
        .map(|(&a, &b)| a - zeta * b)
        .collect())
}
