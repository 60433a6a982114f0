use evc_core::mdp::{performance, Policy, TabularMdp};
use evc_core::posterior::{DirichletPosterior, RewardModel, TransitionCounts};
use evc_core::risk::{
    binomial_bracket, confident_quantile, cvar_refine, cvar_refine_with, risk_evaluation,
    RiskMeasure, RiskSpec,
};
use num_bigint::BigUint;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Exhaustive bracket search in exact rational arithmetic, `q = qn / qd`,
/// `alpha = an / ad`.
fn exact_bracket(l: usize, qn: u64, qd: u64, an: u64, ad: u64) -> Option<(usize, usize)> {
    let mut binom = BigUint::from(1u32);
    let mut terms = Vec::with_capacity(l + 1);
    for i in 0..=l {
        if i > 0 {
            binom = binom * BigUint::from((l - i + 1) as u64) / BigUint::from(i as u64);
        }
        terms.push(
            &binom * BigUint::from(qn).pow(i as u32) * BigUint::from(qd - qn).pow((l - i) as u32),
        );
    }
    let mut prefix = vec![BigUint::from(0u32)];
    for t in &terms {
        let next = prefix.last().unwrap() + t;
        prefix.push(next);
    }
    let threshold = BigUint::from(ad - an) * BigUint::from(qd).pow(l as u32);
    let anchor = 2 * ((qn * l as u64).div_ceil(qd)) as i64;
    let mut best: Option<(usize, usize)> = None;
    for g in 1..=l {
        for h in g + 1..=l {
            let mass = &prefix[h] - &prefix[g];
            if mass * BigUint::from(ad) <= threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((bg, bh)) => {
                    let (w, bw) = (h - g, bh - bg);
                    let off = ((g + h) as i64 - anchor).abs();
                    let boff = ((bg + bh) as i64 - anchor).abs();
                    w < bw || (w == bw && off < boff)
                }
            };
            if better {
                best = Some((g, h));
            }
        }
    }
    best
}

const LEVELS: [(u64, u64, f64); 3] = [(1, 10, 0.1), (1, 4, 0.25), (1, 2, 0.5)];
const ALPHAS: [(u64, u64, f64); 2] = [(1, 100, 0.01), (5, 100, 0.05)];

#[test]
fn bracket_matches_exact_oracle_at_two_hundred() {
    for &(qn, qd, q) in &LEVELS {
        for &(an, ad, alpha) in &ALPHAS {
            assert_eq!(
                binomial_bracket(200, q, alpha),
                exact_bracket(200, qn, qd, an, ad),
                "q={q} alpha={alpha}"
            );
        }
    }
}

#[test]
fn bracket_matches_exact_oracle_for_small_sizes() {
    for l in 1..=120 {
        for &(qn, qd, q) in &LEVELS {
            for &(an, ad, alpha) in &ALPHAS {
                assert_eq!(
                    binomial_bracket(l, q, alpha),
                    exact_bracket(l, qn, qd, an, ad),
                    "L={l} q={q} alpha={alpha}"
                );
            }
        }
    }
}

#[test]
fn single_sample_has_no_bracket() {
    assert_eq!(binomial_bracket(1, 0.25, 0.01), None);
}

fn uniform(seed: u64) -> f64 {
    ChaCha20Rng::seed_from_u64(seed).random()
}

fn spec(q: f64) -> RiskSpec {
    RiskSpec {
        q,
        ..RiskSpec::default()
    }
}

#[test]
fn uniform_brackets_usually_cover_the_true_quantile() {
    let runs = 300;
    let hits = (0..runs)
        .filter(|&run| {
            let est = confident_quantile(&spec(0.25), run, |s| Ok(uniform(s))).unwrap();
            let (lo, hi) = est.bracket();
            lo <= 0.25 && 0.25 < hi
        })
        .count();
    assert!(hits as f64 / runs as f64 >= 0.97, "{hits}/{runs}");
}

#[test]
fn refined_cvar_of_uniform() {
    let n = 10_000;
    let value = cvar_refine_with(0.25, n, n * 100, 77, |s| Ok(uniform(s))).unwrap();
    let se = 0.25 / 12f64.sqrt() / (n as f64).sqrt();
    assert!((value - 0.125).abs() < 3.0 * se, "{value}");
}

#[test]
fn estimates_do_not_depend_on_worker_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| confident_quantile(&spec(0.25), 5, |s| Ok(uniform(s))).unwrap())
    };
    assert_eq!(run(1), run(4));
}

/// Cycle MDP whose posterior counts are all 0 or 10^6.
fn near_certain_posterior() -> (DirichletPosterior, TabularMdp) {
    let (ns, na) = (3, 2);
    let mut t = vec![0.0; ns * na * ns];
    let mut counts = TransitionCounts::zeros(ns, na);
    for s in 0..ns {
        for (a, next) in [(0, (s + 1) % ns), (1, s)] {
            t[(s * na + a) * ns + next] = 1.0;
            counts.row_mut(s, a)[next] = 1_000_000;
        }
    }
    let rewards = vec![0.0, 1.0, 0.5, 0.0, 2.0, 0.0];
    let mdp = TabularMdp::new(
        ns,
        na,
        t,
        rewards.clone(),
        vec![1.0, 0.0, 0.0],
        vec![false; ns],
    )
    .unwrap();
    let post = DirichletPosterior::new(
        counts,
        RewardModel::StateAction(rewards),
        vec![1.0, 0.0, 0.0],
        vec![false; ns],
    )
    .unwrap();
    (post, mdp)
}

#[test]
fn near_certain_posterior_recovers_true_performance() {
    let (post, mdp) = near_certain_posterior();
    for actions in [vec![0, 0, 0], vec![1, 1, 1], vec![0, 1, 0]] {
        let pi = Policy::deterministic(2, actions, "").unwrap();
        let truth = performance(&mdp, &pi, 0.9).unwrap();
        let est = risk_evaluation(&pi, &post, 0.9, &RiskSpec::default(), 1).unwrap();
        assert!(
            (est.utility - truth).abs() < 1e-3,
            "{} vs {truth}",
            est.utility
        );
        let refined = cvar_refine(&pi, &post, 0.9, est.var(), 50, 2).unwrap();
        assert!((refined - truth).abs() < 1e-3, "{refined} vs {truth}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lower_index_grows_with_the_risk_level(l in 2usize..400, alpha in 0.005f64..0.2, q1 in 0.02f64..0.98, q2 in 0.02f64..0.98) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        if let (Some((g1, _)), Some((g2, _))) = (binomial_bracket(l, lo, alpha), binomial_bracket(l, hi, alpha)) {
            prop_assert!(g1 <= g2, "L={} q {}->{}: g {}->{}", l, lo, hi, g1, g2);
        }
    }

    #[test]
    fn cvar_never_exceeds_var(seed: u64, q in 0.05f64..0.95, skew in 0.2f64..5.0) {
        let spec = RiskSpec { q, max_samples: 2_000, ..RiskSpec::default() };
        let est = confident_quantile(&spec, seed, |s| Ok(uniform(s).powf(skew))).unwrap();
        prop_assert!(est.cvar() <= est.var());
        let cvar = confident_quantile(&spec.with_measure(RiskMeasure::CVaR), seed, |s| Ok(uniform(s).powf(skew))).unwrap();
        prop_assert_eq!(cvar.utility, est.cvar());
    }

    #[test]
    fn refined_cvar_stays_below_the_threshold(seed: u64, threshold in 0.05f64..1.0) {
        let value = cvar_refine_with(threshold, 20, 100_000, seed, |s| Ok(uniform(s))).unwrap();
        prop_assert!(value <= threshold);
    }
}
