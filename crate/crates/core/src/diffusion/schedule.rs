//! Discretized variance-preserving noise schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaCurve {
    #[default]
    Linear,
    Cosine,
}

/// How the per-step posterior noise scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))`, zero at the last step.
    #[default]
    Posterior,
    /// Deterministic sampler.
    Zero,
}

/// Constants of the reverse process for steps `tau = 1..=T`.
///
/// Accessors take the 1-based step index used throughout the sampler;
/// `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<F> {
    beta: Vec<F>,
    alpha: Vec<F>,
    alpha_bar: Vec<F>,
    sigma_tilde: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Builds a schedule from explicit per-step betas (`betas[0]` is step 1).
    pub fn from_betas(betas: Vec<F>, sigma: SigmaKind) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange {
                name: "steps",
                detail: "at least one step is required".into(),
            });
        }
        if let Some(b) = betas.iter().find(|b| !(**b > F::zero() && **b < F::one())) {
            return Err(Error::InvalidRange {
                name: "beta",
                detail: format!("{b} is outside (0, 1)"),
            });
        }
        let alpha: Vec<F> = betas.iter().map(|&b| F::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = F::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma_tilde = (0..betas.len())
            .map(|i| match sigma {
                SigmaKind::Zero => F::zero(),
                SigmaKind::Posterior => {
                    let prev = if i == 0 { F::one() } else { alpha_bar[i - 1] };
                    (betas[i] * (F::one() - prev) / (F::one() - alpha_bar[i])).sqrt()
                }
            })
            .collect();
        Ok(Self {
            beta: betas,
            alpha,
            alpha_bar,
            sigma_tilde,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, tau: usize) -> F {
        self.beta[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> F {
        self.alpha[tau - 1]
    }

    pub fn alpha_bar(&self, tau: usize) -> F {
        if tau == 0 {
            F::one()
        } else {
            self.alpha_bar[tau - 1]
        }
    }

    pub fn sigma_tilde(&self, tau: usize) -> F {
        self.sigma_tilde[tau - 1]
    }

    pub fn betas(&self) -> &[F] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[F] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.steps() {
            Err(Error::InvalidRange {
                name: "tau",
                detail: format!("{tau} not in 1..={}", self.steps()),
            })
        } else {
            Ok(())
        }
    }
}

/// Builds a `steps`-long schedule whose betas follow `curve` between the bounds.
///
/// The cosine curve uses the squared-cosine cumulative profile with offset
/// 0.008, with betas clipped into `[beta_min, beta_max]`.
pub fn make_schedule<F: Scalar>(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    curve: BetaCurve,
    sigma: SigmaKind,
) -> Result<NoiseSchedule<F>> {
    if steps == 0 {
        return Err(Error::InvalidRange {
            name: "steps",
            detail: "must be at least 1".into(),
        });
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidRange {
            name: "beta",
            detail: format!("need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"),
        });
    }
    let betas = match curve {
        BetaCurve::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect::<Vec<_>>(),
        BetaCurve::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas.into_iter().map(F::of).collect(), sigma)
}
