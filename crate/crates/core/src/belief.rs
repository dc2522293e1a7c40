//! Particle belief over the hidden scene and the per-location scores
//! derived from it.
//!
//! The belief is an equal-variance Gaussian mixture centred on the particles'
//! Tweedie means. Scores are pairwise sums over ordered particle pairs
//! `(i, j)`, including the diagonal.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ancestral_step, guidance_step, tweedie_from_score, GuidanceConfig, NoiseSchedule, Observed,
    ScoreModel,
};
use crate::error::{ensure_dim, Error, Result};
use crate::layout::Layout;
use crate::scalar::{log_sum_exp, sq_dist, Scalar};
use crate::seed::{stream_rng, Stream, StreamRng};

/// Anything that turns a patch of model-space cell values into a target probability.
pub trait RewardFn<F: Scalar>: Sync {
    fn predict(&self, patch: &[F]) -> Result<F>;
}

impl<F: Scalar, T: Fn(&[F]) -> F + Sync> RewardFn<F> for T {
    fn predict(&self, patch: &[F]) -> Result<F> {
        Ok(self(patch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefConfig {
    pub sigma_x2: f64,
    /// Mixture weights; uniform when absent. Only the marginal entropy uses them.
    pub weights: Option<Vec<f64>>,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        Self {
            sigma_x2: 1.0,
            weights: None,
        }
    }
}

impl BeliefConfig {
    pub fn with_sigma(sigma_x2: f64) -> Self {
        Self {
            sigma_x2,
            weights: None,
        }
    }

    pub fn validate(&self, n_b: Option<usize>) -> Result<()> {
        if !(self.sigma_x2 > 0.0 && self.sigma_x2.is_finite()) {
            return Err(Error::config("belief.sigma_x2", "must be positive"));
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    "belief.weights",
                    "must be non-negative and sum to 1",
                ));
            }
            if let Some(n) = n_b {
                if w.len() != n {
                    return Err(Error::config(
                        "belief.weights",
                        format!("expected {n} weights, got {}", w.len()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `N_B` reverse-diffusion particles and their current Tweedie means.
#[derive(Debug, Clone)]
pub struct ParticleBatch<F> {
    particles: Vec<Vec<F>>,
    denoised: Vec<Vec<F>>,
    tau: usize,
    rngs: Vec<StreamRng>,
}

impl<F: Scalar> ParticleBatch<F> {
    /// A frozen batch from explicit Tweedie means, for scoring only.
    pub fn from_denoised(denoised: Vec<Vec<F>>) -> Result<Self> {
        Self::from_parts(denoised.clone(), denoised, 0)
    }

    pub fn from_parts(particles: Vec<Vec<F>>, denoised: Vec<Vec<F>>, tau: usize) -> Result<Self> {
        if particles.len() < 2 {
            return Err(Error::InvalidRange {
                name: "n_b",
                detail: format!("need at least 2 particles, got {}", particles.len()),
            });
        }
        ensure_dim(particles.len(), denoised.len())?;
        let dim = particles[0].len();
        for v in particles.iter().chain(&denoised) {
            ensure_dim(dim, v.len())?;
        }
        let rngs = (0..particles.len())
            .map(|i| stream_rng(0, Stream::Particle(i as u32)))
            .collect();
        Ok(Self {
            particles,
            denoised,
            tau,
            rngs,
        })
    }

    /// Draws `x_T ~ N(0, I)` for each particle from its own seed-derived stream.
    pub fn init(
        n_b: usize,
        model: &impl ScoreModel<F>,
        sched: &NoiseSchedule<F>,
        seed: u64,
    ) -> Result<Self> {
        if n_b < 2 {
            return Err(Error::InvalidRange {
                name: "n_b",
                detail: format!("need at least 2 particles, got {n_b}"),
            });
        }
        let dim = model.dimension();
        let tau = sched.steps();
        let mut rngs: Vec<StreamRng> = (0..n_b)
            .map(|i| stream_rng(seed, Stream::Particle(i as u32)))
            .collect();
        let particles: Vec<Vec<F>> = rngs.iter_mut().map(|r| normal_vec(r, dim)).collect();
        let denoised = particles
            .par_iter()
            .map(|x| {
                model
                    .score(x, tau, sched)
                    .map(|s| tweedie_from_score(x, &s, tau, sched))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            particles,
            denoised,
            tau,
            rngs,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.particles[0].len()
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn particles(&self) -> &[Vec<F>] {
        &self.particles
    }

    pub fn denoised(&self) -> &[Vec<F>] {
        &self.denoised
    }

    /// One guided reverse step `tau -> tau - 1`. Refreshes the Tweedie means
    /// at the new step (at step 0 they equal the particles).
    pub fn advance(
        &mut self,
        model: &impl ScoreModel<F>,
        sched: &NoiseSchedule<F>,
        guidance: &GuidanceConfig,
        observed: &Observed<F>,
    ) -> Result<()> {
        let tau = self.tau;
        sched.check_step(tau)?;
        let dim = self.dimension();
        self.particles
            .par_iter_mut()
            .zip(self.denoised.par_iter_mut())
            .zip(self.rngs.par_iter_mut())
            .try_for_each(|((x, hat), rng)| -> Result<()> {
                let z: Vec<F> = normal_vec(rng, dim);
                let x_prime = ancestral_step(x, hat, tau, &z, sched)?;
                let next = guidance_step(&x_prime, x, hat, observed, tau, guidance, model, sched)?;
                *hat = if tau > 1 {
                    let s = model.score(&next, tau - 1, sched)?;
                    tweedie_from_score(&next, &s, tau - 1, sched)
                } else {
                    next.clone()
                };
                *x = next;
                Ok(())
            })?;
        self.tau = tau - 1;
        Ok(())
    }

    fn values(&self, coords: &[usize]) -> Vec<Vec<F>> {
        self.denoised
            .iter()
            .map(|d| coords.iter().map(|&c| d[c]).collect())
            .collect()
    }
}

fn normal_vec<F: Scalar>(rng: &mut StreamRng, dim: usize) -> Vec<F> {
    (0..dim)
        .map(|_| F::of(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn pairwise_sq<F: Scalar>(vals: &[Vec<F>]) -> impl Iterator<Item = F> + '_ {
    vals.iter()
        .flat_map(move |a| vals.iter().map(move |b| sq_dist(a, b)))
}

fn weights<F: Scalar>(n: usize, cfg: &BeliefConfig) -> Vec<F> {
    match &cfg.weights {
        Some(w) => w.iter().map(|&x| F::of(x)).collect(),
        None => vec![F::one() / F::of(n as f64); n],
    }
}

/// `sum_i a_i log sum_j a_j exp(|xh_i - xh_j|^2 / (2 s^2))`, with the positive
/// exponent as used for ranking.
pub fn marginal_entropy<F: Scalar>(batch: &ParticleBatch<F>, cfg: &BeliefConfig) -> Result<F> {
    cfg.validate(Some(batch.len()))?;
    let w: Vec<F> = weights(batch.len(), cfg);
    let two_s = F::two() * F::of(cfg.sigma_x2);
    let d = &batch.denoised;
    let mut total = F::zero();
    for (i, a) in d.iter().enumerate() {
        let terms: Vec<F> = d
            .iter()
            .zip(&w)
            .filter(|(_, &wj)| wj > F::zero())
            .map(|(b, &wj)| wj.ln() + sq_dist(a, b) / two_s)
            .collect();
        if w[i] > F::zero() {
            total += w[i] * log_sum_exp(&terms);
        }
    }
    Ok(total)
}

/// Pairwise disagreement of the predicted content at `location`.
pub fn exploration_score<F: Scalar>(
    batch: &ParticleBatch<F>,
    layout: &Layout,
    location: usize,
    cfg: &BeliefConfig,
) -> Result<F> {
    let vals = batch.values(layout.coords(location)?);
    let two_s = F::two() * F::of(cfg.sigma_x2);
    Ok(pairwise_sq(&vals).map(|d| d / two_s).sum())
}

/// Pairwise consensus `sum_ij exp(-d_ij / (2 s^2))` at `location`.
pub fn likelihood_score<F: Scalar>(
    batch: &ParticleBatch<F>,
    layout: &Layout,
    location: usize,
    cfg: &BeliefConfig,
) -> Result<F> {
    let vals = batch.values(layout.coords(location)?);
    let two_s = F::two() * F::of(cfg.sigma_x2);
    Ok(pairwise_sq(&vals).map(|d| (-d / two_s).exp()).sum())
}

/// Sum over particles of the reward predicted for each particle's patch.
pub fn reward_sum<F: Scalar>(
    batch: &ParticleBatch<F>,
    layout: &Layout,
    location: usize,
    reward: &impl RewardFn<F>,
) -> Result<F> {
    batch
        .values(layout.coords(location)?)
        .iter()
        .map(|p| reward.predict(p))
        .sum()
}

/// Likelihood score times the particle-summed reward.
pub fn exploitation_score<F: Scalar>(
    batch: &ParticleBatch<F>,
    layout: &Layout,
    location: usize,
    cfg: &BeliefConfig,
    reward: &impl RewardFn<F>,
) -> Result<F> {
    Ok(likelihood_score(batch, layout, location, cfg)?
        * reward_sum(batch, layout, location, reward)?)
}

/// Per-candidate score components. `combined` is filled in by the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField<F> {
    pub locations: Vec<usize>,
    pub exploration: Vec<F>,
    pub likelihood: Vec<F>,
    pub reward: Vec<F>,
    pub exploitation: Vec<F>,
    pub combined: Vec<F>,
}

impl<F: Scalar> ScoreField<F> {
    pub fn compute(
        batch: &ParticleBatch<F>,
        layout: &Layout,
        candidates: &[usize],
        cfg: &BeliefConfig,
        reward: &impl RewardFn<F>,
    ) -> Result<Self> {
        let rows = candidates
            .par_iter()
            .map(|&q| {
                let e = exploration_score(batch, layout, q, cfg)?;
                let l = likelihood_score(batch, layout, q, cfg)?;
                let r = reward_sum(batch, layout, q, reward)?;
                Ok((e, l, r))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut field = Self {
            locations: candidates.to_vec(),
            exploration: Vec::with_capacity(rows.len()),
            likelihood: Vec::with_capacity(rows.len()),
            reward: Vec::with_capacity(rows.len()),
            exploitation: Vec::with_capacity(rows.len()),
            combined: vec![F::zero(); rows.len()],
        };
        for (e, l, r) in rows {
            field.exploration.push(e);
            field.likelihood.push(l);
            field.reward.push(r);
            field.exploitation.push(l * r);
        }
        Ok(field)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn position(&self, location: usize) -> Option<usize> {
        self.locations.iter().position(|&l| l == location)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "location", "expl", "likeli", "reward", "exploit", "combined",
        ])?;
        for i in 0..self.len() {
            w.write_record([
                self.locations[i].to_string(),
                self.exploration[i].to_string(),
                self.likelihood[i].to_string(),
                self.reward[i].to_string(),
                self.exploitation[i].to_string(),
                self.combined[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<score field>".into(),
            source: e,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Brute-force exploration oracle for small instances.
///
/// For each candidate `q` the pairwise objective
/// `sum_ij log exp(|xh_i - xh_j|^2_S / (2 s^2))` is evaluated over the full
/// coordinate set `S = (non-candidate locations) + q`, and the maximizing
/// candidates are returned (all of them on ties, within a relative 1e-9).
pub fn entropy_rank_oracle<F: Scalar>(
    batch: &ParticleBatch<F>,
    layout: &Layout,
    candidates: &[usize],
    cfg: &BeliefConfig,
) -> Result<Vec<usize>> {
    if batch.len() > 4 || candidates.len() > 16 || layout.block() != 1 {
        return Err(Error::SizeLimit(format!(
            "{} particles, {} candidates, block {}",
            batch.len(),
            candidates.len(),
            layout.block()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::ExhaustedCandidates);
    }
    let background: Vec<usize> = (0..layout.locations())
        .filter(|l| !candidates.contains(l))
        .flat_map(|l| layout.coords(l).unwrap().to_vec())
        .collect();
    let two_s = 2.0 * cfg.sigma_x2;
    let mut objective = Vec::with_capacity(candidates.len());
    for &q in candidates {
        let mut set = background.clone();
        set.extend_from_slice(layout.coords(q)?);
        let mut total = 0.0f64;
        for a in &batch.denoised {
            for b in &batch.denoised {
                let d: f64 = set.iter().map(|&c| (a[c] - b[c]).as_f64().powi(2)).sum();
                let e = (d / two_s).exp();
                total += if e.is_finite() { e.ln() } else { d / two_s };
            }
        }
        objective.push(total);
    }
    let best = objective.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * best.abs().max(1.0);
    Ok(candidates
        .iter()
        .zip(&objective)
        .filter(|(_, &o)| best - o <= tol)
        .map(|(&q, _)| q)
        .collect())
}
