//! Acceptance gate: ten criteria, one PASS/FAIL line each. Exits non-zero if
//! any criterion fails.

use std::io::Write;
use std::time::Instant;

use atd_core::belief::{BeliefConfig, ParticleBatch, ScoreField};
use atd_core::bench::{
    mean_std, run_suite, success_rate, EpisodeResult, Experiment, ExperimentConfig, SuiteReport,
};
use atd_core::diffusion::{
    make_schedule, tweedie_denoise, BetaCurve, GaussianMixturePrior, MixtureComponent,
    NoiseSchedule, SigmaKind,
};
use atd_core::env::ObservationNoise;
use atd_core::layout::Layout;
use atd_core::policy::{kappa, PolicyConfig, PolicyKind};
use atd_core::reward::{grad_check, LabeledPatch, Preset, RewardConfig, RewardNet};
use atd_core::seed::{stream_rng, Stream, StreamRng};
use rand::Rng;
use rand_distr::StandardNormal;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn n(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn tweedie_oracle() -> Verdict {
    let mut rng = stream_rng(101, Stream::Scene);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dim = rng.gen_range(1..=5);
        let ab: f64 = rng.gen_range(0.001..0.999);
        let v: f64 = rng.gen_range(0.1..3.0);
        let x: Vec<f64> = (0..dim).map(|_| 3.0 * n(&mut rng)).collect();
        let prior = GaussianMixturePrior::new(
            vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0; dim],
                variance: v,
            }],
            dim,
        )
        .unwrap();
        let sched = NoiseSchedule::from_betas(vec![1.0 - ab], SigmaKind::Zero).unwrap();
        let hat = tweedie_denoise(&x, 1, &prior, &sched).unwrap();
        for (h, xi) in hat.iter().zip(&x) {
            let want = ab.sqrt() * xi / (ab + (1.0 - ab) / v);
            worst = worst.max((h - want).abs());
        }
    }
    verdict(
        worst < 1e-9,
        format!("max abs error {worst:.2e} over 50 (abar, x) pairs (< 1e-9)"),
    )
}

/// `log sum_k w_k N(x; sqrt(ab) mu_k, (ab v_k + 1 - ab) I)`, written out
/// independently of the library.
fn log_density_oracle(prior: &GaussianMixturePrior<f64>, x: &[f64], ab: f64) -> f64 {
    let d = x.len() as f64;
    let terms: Vec<f64> = prior
        .components()
        .iter()
        .map(|c| {
            let s = ab * c.variance + 1.0 - ab;
            let q: f64 = x
                .iter()
                .zip(&c.mean)
                .map(|(xi, m)| (xi - ab.sqrt() * m).powi(2))
                .sum();
            c.weight.ln() - q / (2.0 * s) - 0.5 * d * (2.0 * std::f64::consts::PI * s).ln()
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn score_fidelity() -> Verdict {
    let mut rng = stream_rng(202, Stream::Scene);
    let sched =
        make_schedule::<f64>(50, 1e-3, 0.2, BetaCurve::Linear, SigmaKind::Posterior).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(1..=5);
        let dim = rng.gen_range(1..=8);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let comps = raw
            .iter()
            .map(|w| MixtureComponent {
                weight: w / total,
                mean: (0..dim).map(|_| n(&mut rng)).collect(),
                variance: rng.gen_range(0.05..2.0),
            })
            .collect();
        let prior = GaussianMixturePrior::new(comps, dim).unwrap();
        let tau = rng.gen_range(1..=50);
        let ab = sched.alpha_bar(tau);
        let x: Vec<f64> = (0..dim).map(|_| 1.5 * n(&mut rng)).collect();
        let s = atd_core::diffusion::gmm_score(&x, tau, &prior, &sched).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..dim {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (log_density_oracle(&prior, &xp, ab) - log_density_oracle(&prior, &xm, ab))
                / (2.0 * h);
            num += (fd - s[i]).powi(2);
            den += s[i].powi(2);
        }
        worst = worst.max(num.sqrt() / den.sqrt().max(1e-12));
    }
    verdict(
        worst < 1e-6,
        format!("max relative error {worst:.2e} on 100 points (< 1e-6)"),
    )
}

/// Brute-force tied argmax of `sum_ij log exp(|xh_i - xh_j|^2_S / 2s^2)` with
/// `S` = unmeasured-elsewhere cells plus the candidate.
fn entropy_argmax_set(
    denoised: &[Vec<f64>],
    candidates: &[usize],
    cells: usize,
    s2: f64,
) -> Vec<usize> {
    let objective: Vec<f64> = candidates
        .iter()
        .map(|&q| {
            let set: Vec<usize> = (0..cells)
                .filter(|c| !candidates.contains(c) || *c == q)
                .collect();
            let mut total = 0.0;
            for a in denoised {
                for b in denoised {
                    let d: f64 = set.iter().map(|&c| (a[c] - b[c]).powi(2)).sum();
                    total += (d / (2.0 * s2)).exp().ln();
                }
            }
            total
        })
        .collect();
    let best = objective.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .zip(&objective)
        .filter(|(_, &o)| best - o <= 1e-9 * best.abs().max(1.0))
        .map(|(&q, _)| q)
        .collect()
}

fn exploration_entropy_agreement() -> Verdict {
    let mut rng = stream_rng(303, Stream::Scene);
    let mut hits = 0;
    for _ in 0..200 {
        let n_b = rng.gen_range(2..=4);
        let cells = rng.gen_range(1..=16);
        let layout = Layout::new(1, cells, 1).unwrap();
        let denoised: Vec<Vec<f64>> = (0..n_b)
            .map(|_| (0..cells).map(|_| n(&mut rng)).collect())
            .collect();
        let s2 = rng.gen_range(0.25..2.0);
        let candidates: Vec<usize> = (0..cells).filter(|_| rng.gen_bool(0.75)).collect();
        let candidates = if candidates.is_empty() {
            vec![cells - 1]
        } else {
            candidates
        };
        let batch = ParticleBatch::from_denoised(denoised.clone()).unwrap();
        let field = ScoreField::compute(
            &batch,
            &layout,
            &candidates,
            &BeliefConfig::with_sigma(s2),
            &|_: &[f64]| 0.0,
        )
        .unwrap();
        let mut best = 0;
        for (i, &v) in field.exploration.iter().enumerate() {
            if v > field.exploration[best] {
                best = i;
            }
        }
        if entropy_argmax_set(&denoised, &candidates, cells, s2).contains(&candidates[best]) {
            hits += 1;
        }
    }
    verdict(
        hits == 200,
        format!("exploration argmax in entropy argmax set on {hits}/200 instances"),
    )
}

fn reward_gradients() -> Verdict {
    let mut rng = stream_rng(404, Stream::Scene);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (preset, area) in [
        (Preset::Compact, 1),
        (Preset::Compact, 4),
        (Preset::Wide, 1),
        (Preset::Wide, 4),
    ] {
        let cfg = RewardConfig {
            preset,
            ..Default::default()
        };
        let net = RewardNet::<f64>::new(area, cfg, 7).unwrap();
        let data: Vec<LabeledPatch<f64>> = (0..8)
            .map(|_| {
                let p = (0..area).map(|_| rng.gen_range(-1.0..1.0)).collect();
                LabeledPatch::new(p, rng.gen_range(0.0..1.0)).unwrap()
            })
            .collect();
        let e = grad_check(&net, &data).unwrap();
        parts.push(format!("{preset:?}/{area}={e:.1e}"));
        worst = worst.max(e);
    }
    verdict(
        worst < 1e-4,
        format!("grad_check {} (< 1e-4)", parts.join(" ")),
    )
}

fn kappa_schedule() -> Verdict {
    let b = 200;
    let ends = kappa(b, 0, 1.0) == 1.0 && kappa(b, b, 1.0) == 0.0;
    let strict = (1..=b).all(|t| kappa(b, t, 1.0) < kappa(b, t - 1, 1.0));
    let clamp = kappa(200, 150, 0.5) == 0.0;
    verdict(
        ends && strict && clamp,
        format!("endpoints {ends}, strict decrease {strict}, clamp {clamp}"),
    )
}

fn episode(collected: f64, budget: usize, u: usize) -> EpisodeResult<f64> {
    EpisodeResult {
        policy: PolicyKind::Random,
        budget,
        seed: 0,
        records: vec![],
        collected,
        target_locations: u,
        sr_term: collected / budget.min(u) as f64,
        wall_time: 0.0,
    }
}

fn sr_formula() -> Verdict {
    let a = success_rate(&[episode(0.5 + 1.0, 2, 3)], 2).unwrap();
    let b = success_rate(&[episode(1.0 + 1.0 + 0.0, 3, 2)], 3).unwrap();
    let c = success_rate(&[episode(0.4, 1, 4), episode(0.8, 1, 4)], 1).unwrap();
    // 0.4 and 0.8 are not representable; their exactly rounded mean is one ulp above 0.6.
    let c_ok = (c - 0.6).abs() <= f64::EPSILON;
    verdict(a == 0.75 && b == 1.0 && c_ok, format!("{a}, {b}, {c}"))
}

fn benchmark() -> ExperimentConfig {
    ExperimentConfig::benchmark()
}

fn stats(rep: &SuiteReport<f64>, kind: PolicyKind) -> (f64, f64) {
    let r = rep.row(kind, 32).expect("suite row");
    (r.mean_sr, r.std_sr / (r.n_seeds as f64).sqrt())
}

fn pooled(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn ordering(rep: &SuiteReport<f64>) -> Verdict {
    let (d, d_se) = stats(rep, PolicyKind::Diffatd);
    let (r, r_se) = stats(rep, PolicyKind::Random);
    let mut ok = rep.failures.is_empty();
    let mut parts = vec![format!("diffatd {d:.3}")];
    for rival in [PolicyKind::MaxEnt, PolicyKind::GreedyAdaptive] {
        let (m, se) = stats(rep, rival);
        ok &= d - m > pooled(d_se, se);
        parts.push(format!(
            "{} {m:.3} (gap {:.3} vs se {:.3})",
            rival.name(),
            d - m,
            pooled(d_se, se)
        ));
    }
    for informed in [
        PolicyKind::Diffatd,
        PolicyKind::MaxEnt,
        PolicyKind::GreedyAdaptive,
    ] {
        let (m, se) = stats(rep, informed);
        ok &= m - r > pooled(se, r_se);
    }
    parts.push(format!("random {r:.3}"));
    for extra in [PolicyKind::Ucb, PolicyKind::EpsGreedy] {
        parts.push(format!(
            "{} {:.3} (not gated)",
            extra.name(),
            stats(rep, extra).0
        ));
    }
    verdict(ok, parts.join(", "))
}

fn diffatd_sr(cfg: ExperimentConfig) -> (f64, f64, f64) {
    let rep = run_suite::<f64>(&cfg, rayon::current_num_threads()).unwrap();
    assert!(rep.failures.is_empty());
    let srs: Vec<f64> = rep.episodes.iter().map(|e| e.sr_term).collect();
    let (m, sd) = mean_std(&srs);
    (m, sd / (srs.len() as f64).sqrt(), 0.0)
}

fn ablation(base: (f64, f64)) -> Verdict {
    let mut out = Vec::new();
    let mut ok = true;
    for alpha in [0.2, 5.0] {
        let mut cfg = benchmark();
        cfg.policy = PolicyConfig {
            alpha,
            ..PolicyConfig::of(PolicyKind::Diffatd)
        };
        let (m, se, _) = diffatd_sr(cfg);
        ok &= base.0 >= m - pooled(base.1, se);
        out.push(format!("alpha={alpha}: {m:.3}"));
    }
    verdict(ok, format!("alpha=1: {:.3}, {}", base.0, out.join(", ")))
}

fn noise_robustness(clean: f64) -> Verdict {
    let mut cfg = benchmark();
    cfg.scene.noise = Some(ObservationNoise {
        mu: 0.0,
        sigma: 0.1,
    });
    let (noisy, _, _) = diffatd_sr(cfg);
    let drop = (clean - noisy) / clean;
    verdict(
        drop < 0.10,
        format!(
            "clean {clean:.3}, sigma=0.1 {noisy:.3}, relative drop {:.1}% (< 10%)",
            100.0 * drop
        ),
    )
}

fn determinism() -> Verdict {
    let cfg = ExperimentConfig {
        seeds: vec![11],
        ..ExperimentConfig::benchmark()
    };
    let exp = Experiment::<f64>::prepare(&cfg).unwrap();
    let mut traces = Vec::new();
    for threads in [1, 4, 1] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let r = pool
            .install(|| exp.run(&cfg.policy, cfg.budget, 11))
            .unwrap();
        traces.push(r.trace_bytes().unwrap());
    }
    let same = traces.windows(2).all(|w| w[0] == w[1]);
    verdict(
        same,
        format!(
            "3 re-runs (1, 4, 1 threads), {} trace bytes each, identical {same}",
            traces[0].len()
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, limit: f64, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        let secs = t.elapsed().as_secs_f64();
        let ok = v.passed && secs < limit;
        if !ok {
            failed += 1;
        }
        let tag = if ok { "PASS" } else { "FAIL" };
        let line = format!("{tag} criterion {id:>2}: {} [{secs:.2}s]\n", v.detail);
        std::io::stdout().write_all(line.as_bytes()).unwrap();
    };

    report(1, 1.0, &mut tweedie_oracle);
    report(2, 5.0, &mut score_fidelity);
    report(3, 10.0, &mut exploration_entropy_agreement);
    report(4, 5.0, &mut reward_gradients);
    report(5, 1.0, &mut kappa_schedule);
    report(6, 1.0, &mut sr_formula);

    let mut clean = (0.0, 0.0);
    report(7, 300.0, &mut || {
        let mut cfg = benchmark();
        cfg.suite.policies = PolicyKind::ALL.to_vec();
        let rep = run_suite::<f64>(&cfg, rayon::current_num_threads()).unwrap();
        clean = stats(&rep, PolicyKind::Diffatd);
        ordering(&rep)
    });
    report(8, 600.0, &mut || ablation(clean));
    report(9, 300.0, &mut || noise_robustness(clean.0));
    report(10, 60.0, &mut determinism);

    if failed > 0 {
        std::io::stdout()
            .write_all(format!("{failed} acceptance criteria failed\n").as_bytes())
            .unwrap();
        std::process::exit(1);
    }
}
