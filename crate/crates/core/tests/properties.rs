use atd_core::belief::{
    exploration_score, likelihood_score, marginal_entropy, BeliefConfig, ParticleBatch, ScoreField,
};
use atd_core::diffusion::{make_schedule, BetaCurve, SigmaKind};
use atd_core::layout::Layout;
use atd_core::policy::{
    argmax, build_measurement_schedule, combined_score, kappa, minmax, CombineMode, Normalize,
    ScheduleKind, TieBreak,
};
use atd_core::seed::{stream_rng, Stream};
use proptest::prelude::*;

fn particles(max_n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), 2..=max_n)
}

fn all_scores(batch: &ParticleBatch<f64>, layout: &Layout, cfg: &BeliefConfig) -> Vec<(f64, f64)> {
    (0..layout.locations())
        .map(|l| {
            (
                exploration_score(batch, layout, l, cfg).unwrap(),
                likelihood_score(batch, layout, l, cfg).unwrap(),
            )
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn scores_ignore_particle_order(ps in particles(6, 4), rot in 0usize..6, s2 in 0.2f64..3.0) {
        let layout = Layout::new(2, 2, 1).unwrap();
        let cfg = BeliefConfig::with_sigma(s2);
        let mut shuffled = ps.clone();
        shuffled.reverse();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        let a = ParticleBatch::from_denoised(ps).unwrap();
        let b = ParticleBatch::from_denoised(shuffled).unwrap();
        for ((ea, la), (eb, lb)) in all_scores(&a, &layout, &cfg).into_iter().zip(all_scores(&b, &layout, &cfg)) {
            prop_assert!(close(ea, eb) && close(la, lb));
        }
        prop_assert!(close(marginal_entropy(&a, &cfg).unwrap(), marginal_entropy(&b, &cfg).unwrap()));
    }

    #[test]
    fn scores_ignore_common_shift(ps in particles(5, 4), shift in -5.0f64..5.0, loc in 0usize..4) {
        let layout = Layout::new(2, 2, 1).unwrap();
        let cfg = BeliefConfig::default();
        let moved: Vec<Vec<f64>> = ps.iter().map(|p| {
            let mut q = p.clone();
            q[loc] += shift;
            q
        }).collect();
        let a = ParticleBatch::from_denoised(ps).unwrap();
        let b = ParticleBatch::from_denoised(moved).unwrap();
        prop_assert!((exploration_score(&a, &layout, loc, &cfg).unwrap() - exploration_score(&b, &layout, loc, &cfg).unwrap()).abs() < 1e-9);
        prop_assert!((likelihood_score(&a, &layout, loc, &cfg).unwrap() - likelihood_score(&b, &layout, loc, &cfg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn spreading_raises_exploration_and_lowers_likelihood(ps in particles(5, 1), c in 1.05f64..4.0) {
        let spread = ps.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) - ps.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let mean = ps.iter().map(|p| p[0]).sum::<f64>() / ps.len() as f64;
        let wide: Vec<Vec<f64>> = ps.iter().map(|p| vec![mean + c * (p[0] - mean)]).collect();
        let layout = Layout::new(1, 1, 1).unwrap();
        let cfg = BeliefConfig::default();
        let a = ParticleBatch::from_denoised(ps).unwrap();
        let b = ParticleBatch::from_denoised(wide).unwrap();
        prop_assert!(exploration_score(&b, &layout, 0, &cfg).unwrap() > exploration_score(&a, &layout, 0, &cfg).unwrap());
        prop_assert!(likelihood_score(&b, &layout, 0, &cfg).unwrap() < likelihood_score(&a, &layout, 0, &cfg).unwrap());
    }

    #[test]
    fn consensus_exploit_follows_reward(v in prop::collection::vec(-1.0f64..1.0, 2..12), n_b in 2usize..6, w in -3.0f64..3.0) {
        let dim = v.len();
        let layout = Layout::new(1, dim, 1).unwrap();
        let batch = ParticleBatch::from_denoised(vec![v.clone(); n_b]).unwrap();
        let reward = move |p: &[f64]| 1.0 / (1.0 + (-w * p[0]).exp());
        let cands: Vec<usize> = (0..dim).collect();
        let field = ScoreField::compute(&batch, &layout, &cands, &BeliefConfig::default(), &reward).unwrap();
        let mut rng = stream_rng(0, Stream::Policy);
        let by_exploit = argmax(&field.exploitation, TieBreak::LowestIndex, &mut rng).unwrap();
        let by_reward = argmax(&field.reward, TieBreak::LowestIndex, &mut rng).unwrap();
        prop_assert!(close(field.reward[by_exploit], field.reward[by_reward]));
    }

    #[test]
    fn kappa_grows_with_alpha(b in 1usize..300, t_frac in 0.0f64..1.0, a in 0.05f64..5.0, extra in 0.0f64..5.0) {
        let t = ((b as f64) * t_frac) as usize;
        prop_assert!(kappa(b, t, a + extra) >= kappa(b, t, a));
        prop_assert!((0.0..=1.0).contains(&kappa(b, t, a)));
    }

    #[test]
    fn minmax_ignores_positive_affine_maps(v in prop::collection::vec(-10.0f64..10.0, 2..20), c in 0.01f64..100.0, d in -5.0f64..5.0) {
        let scaled: Vec<f64> = v.iter().map(|x| c * x + d).collect();
        for (a, b) in minmax(&v).iter().zip(minmax(&scaled)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn exploration_scale_keeps_selection(
        expl in prop::collection::vec(0.0f64..10.0, 2..20),
        c in 0.01f64..100.0,
        k in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let len = expl.len();
        let mut rng = stream_rng(seed, Stream::Scene);
        use rand::Rng;
        let exploit: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
        let field = |e: Vec<f64>| ScoreField {
            locations: (0..len).collect(),
            exploration: e,
            likelihood: vec![0.0; len],
            reward: vec![0.0; len],
            exploitation: exploit.clone(),
            combined: vec![],
        };
        let a = combined_score(&field(expl.clone()), k, CombineMode::Exploit, Normalize::Minmax).unwrap();
        let b = combined_score(&field(expl.iter().map(|x| c * x).collect()), k, CombineMode::Exploit, Normalize::Minmax).unwrap();
        let ia = argmax(&a, TieBreak::LowestIndex, &mut rng).unwrap();
        let ib = argmax(&b, TieBreak::LowestIndex, &mut rng).unwrap();
        prop_assert!(ia == ib || (a[ia] - a[ib]).abs() < 1e-12);
    }

    #[test]
    fn schedule_marks_budget_steps(steps in 1usize..4096, frac in 0.0f64..1.0, even in any::<bool>()) {
        let budget = 1 + ((steps - 1) as f64 * frac) as usize;
        let kind = if even { ScheduleKind::EvenCount } else { ScheduleKind::Stride };
        let m = build_measurement_schedule(steps, budget, kind).unwrap();
        prop_assert_eq!(m.len(), budget);
        prop_assert!(m.taus().iter().all(|&t| (1..=steps).contains(&t)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stored_alpha_bar_matches_naive_product(steps in 1usize..=4096, cosine in any::<bool>()) {
        let curve = if cosine { BetaCurve::Cosine } else { BetaCurve::Linear };
        let s = make_schedule::<f64>(steps, 1e-4, 0.02, curve, SigmaKind::Posterior).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=steps {
            prod *= 1.0 - s.beta(t);
            prop_assert!((prod - s.alpha_bar(t)).abs() <= 1e-12);
        }
    }
}
