//! Self-checks against independent closed forms, shared by the `validate`
//! command and the acceptance tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::belief::{entropy_rank_oracle, BeliefConfig, ParticleBatch, ScoreField};
use crate::diffusion::{
    make_schedule, tweedie_denoise, BetaCurve, GaussianMixturePrior, MixtureComponent,
    NoiseSchedule, SigmaKind,
};
use crate::error::Result;
use crate::layout::Layout;
use crate::policy::kappa;
use crate::reward::{grad_check, LabeledPatch, Preset, RewardConfig, RewardNet};
use crate::seed::{stream_rng, Stream, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn one_step(alpha_bar: f64) -> Result<NoiseSchedule<f64>> {
    NoiseSchedule::from_betas(vec![1.0 - alpha_bar], SigmaKind::Zero)
}

/// Largest error of the Tweedie estimate against the Gaussian posterior
/// mean `mu + sqrt(ab) v (x - sqrt(ab) mu) / (ab v + 1 - ab)`.
pub fn tweedie_max_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Scene);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let dim = rng.gen_range(1..=6);
        let ab: f64 = rng.gen_range(0.01..0.99);
        let v: f64 = rng.gen_range(0.05..2.0);
        let mu: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let x: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
        let prior = GaussianMixturePrior::new(
            vec![MixtureComponent {
                weight: 1.0,
                mean: mu.clone(),
                variance: v,
            }],
            dim,
        )?;
        let hat = tweedie_denoise(&x, 1, &prior, &one_step(ab)?)?;
        let s = ab.sqrt();
        for i in 0..dim {
            let want = mu[i] + s * v * (x[i] - s * mu[i]) / (ab * v + 1.0 - ab);
            worst = worst.max((hat[i] - want).abs());
        }
    }
    Ok(worst)
}

/// Random mixture with up to `max_k` components in up to `max_dim` dims.
pub fn random_prior(
    rng: &mut StreamRng,
    max_k: usize,
    max_dim: usize,
) -> Result<GaussianMixturePrior<f64>> {
    let k = rng.gen_range(1..=max_k);
    let dim = rng.gen_range(1..=max_dim);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let comps = raw
        .iter()
        .map(|w| MixtureComponent {
            weight: w / total,
            mean: (0..dim).map(|_| normal(rng)).collect(),
            variance: rng.gen_range(0.05..1.5),
        })
        .collect();
    GaussianMixturePrior::new(comps, dim)
}

/// Largest norm-relative error between the analytic score and central
/// differences of the log-density.
pub fn score_fd_max_error(points: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Scene);
    let sched = make_schedule::<f64>(100, 1e-4, 0.05, BetaCurve::Linear, SigmaKind::Posterior)?;
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let prior = random_prior(&mut rng, 5, 8)?;
        let tau = rng.gen_range(1..=100);
        let x: Vec<f64> = (0..prior.dimension())
            .map(|_| 1.5 * normal(&mut rng))
            .collect();
        let s = prior.score(&x, tau, &sched)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (prior.log_density(&xp, tau, &sched)?
                - prior.log_density(&xm, tau, &sched)?)
                / (2.0 * h);
            num += (fd - s[i]).powi(2);
            den += s[i] * s[i];
        }
        worst = worst.max(num.sqrt() / den.sqrt().max(1e-6));
    }
    Ok(worst)
}

/// Fraction of small random instances where the exploration argmax lies in
/// the brute-force entropy-rank argmax set.
pub fn exploration_oracle_agreement(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Scene);
    let mut hits = 0;
    for _ in 0..instances {
        let n_b = rng.gen_range(2..=4);
        let cells = rng.gen_range(1..=16);
        let layout = Layout::new(1, cells, 1)?;
        let denoised: Vec<Vec<f64>> = (0..n_b)
            .map(|_| (0..cells).map(|_| normal(&mut rng)).collect())
            .collect();
        let batch = ParticleBatch::from_denoised(denoised)?;
        let cfg = BeliefConfig::with_sigma(rng.gen_range(0.25..2.0));
        let candidates: Vec<usize> = (0..cells).filter(|_| rng.gen_bool(0.7)).collect();
        let candidates = if candidates.is_empty() {
            vec![0]
        } else {
            candidates
        };
        let field = ScoreField::compute(&batch, &layout, &candidates, &cfg, &|_: &[f64]| 0.0)?;
        let best = field.exploration.iter().enumerate().fold(0, |b, (i, &v)| {
            if v > field.exploration[b] {
                i
            } else {
                b
            }
        });
        if entropy_rank_oracle(&batch, &layout, &candidates, &cfg)?.contains(&candidates[best]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / instances as f64)
}

/// Worst gradient-check error over the compact and wide reward nets.
pub fn reward_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Scene);
    let mut worst = 0.0f64;
    for (preset, area) in [
        (Preset::Compact, 1),
        (Preset::Compact, 4),
        (Preset::Wide, 4),
    ] {
        let cfg = RewardConfig {
            preset,
            ..Default::default()
        };
        let net = RewardNet::<f64>::new(area, cfg, seed)?;
        let data = (0..6)
            .map(|_| {
                let patch: Vec<f64> = (0..area).map(|_| rng.gen_range(-1.0..1.0)).collect();
                LabeledPatch::new(patch, rng.gen_range(0.0..1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(grad_check(&net, &data)?);
    }
    Ok(worst)
}

pub fn kappa_schedule_holds() -> bool {
    let b = 50;
    let ends = kappa(b, 0, 1.0) == 1.0 && kappa(b, b, 1.0) == 0.0;
    let monotone = (1..=b).all(|t| kappa(b, t, 1.0) < kappa(b, t - 1, 1.0));
    ends && monotone && kappa(200, 150, 0.5) == 0.0
}

/// All suites with the default trial counts.
pub fn run_all(seed: u64) -> Result<Vec<Outcome>> {
    let tw = tweedie_max_error(50, seed)?;
    let sc = score_fd_max_error(100, seed)?;
    let th = exploration_oracle_agreement(200, seed)?;
    let gr = reward_gradient_error(seed)?;
    let ka = kappa_schedule_holds();
    Ok(vec![
        Outcome {
            name: "tweedie",
            passed: tw < 1e-9,
            detail: format!("max abs error {tw:.3e} over 50 Gaussian cases"),
        },
        Outcome {
            name: "score",
            passed: sc < 1e-6,
            detail: format!("max relative error {sc:.3e} vs finite differences"),
        },
        Outcome {
            name: "exploration-vs-entropy",
            passed: th == 1.0,
            detail: format!("argmax agreement {:.1}% over 200 instances", 100.0 * th),
        },
        Outcome {
            name: "reward-gradients",
            passed: gr < 1e-4,
            detail: format!("max relative error {gr:.3e}"),
        },
        Outcome {
            name: "kappa",
            passed: ka,
            detail: "endpoints, monotone decrease, clamp".into(),
        },
    ])
}
