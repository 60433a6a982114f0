use evc_core::batch::{collect_batch, TransitionBatch};
use evc_core::envs::chain;
use evc_core::mdp::{performance, Policy, TabularMdp};
use evc_core::posterior::{counts_from_batch, DirichletPosterior, RewardModel, TransitionCounts};
use evc_core::risk::RiskSpec;
use evc_core::seeding::derive_seed;
use evc_core::selection::{evc, generate_policies, mc2ps, CandidateSet, EvcSettings, TRIVIAL_TAG};

const GAMMAS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 0.9];

fn posterior_for(mdp: &TabularMdp, batch: &TransitionBatch) -> DirichletPosterior {
    let counts = counts_from_batch(batch, mdp.n_states(), mdp.n_actions()).unwrap();
    DirichletPosterior::for_environment(counts, mdp).unwrap()
}

fn chain_posterior(m: usize, seed: u64) -> DirichletPosterior {
    let mdp = chain();
    posterior_for(&mdp, &collect_batch(&mdp, "chain", m, 8, seed).unwrap())
}

/// Deterministic three-state cycle with every count 0 or 10^6.
fn near_certain() -> (DirichletPosterior, TabularMdp) {
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
fn identical_models_collapse_the_candidate_set() {
    let (post, _) = near_certain();
    let set = generate_policies(&post, &GAMMAS, 3, 0.9, &[], 4).unwrap();
    assert!(set.len() <= GAMMAS.len(), "{}", set.len());
}

#[test]
fn chain_candidates_are_bounded_and_reproducible() {
    let post = chain_posterior(3, 8);
    let a = generate_policies(&post, &GAMMAS, 3, 0.9, &[], 99).unwrap();
    let b = generate_policies(&post, &GAMMAS, 3, 0.9, &[], 99).unwrap();
    assert!(a.len() <= 20);
    assert_eq!(a, b);
    let json_a: Vec<String> = a.iter().map(Policy::to_json).collect();
    let json_b: Vec<String> = b.iter().map(Policy::to_json).collect();
    assert_eq!(json_a, json_b);
    assert_eq!(a.policies()[0].provenance(), TRIVIAL_TAG);
}

#[test]
fn degenerate_posterior_picks_the_truly_better_policy() {
    let (post, mdp) = near_certain();
    let good = Policy::deterministic(2, vec![1, 0, 0], "good").unwrap();
    let bad = Policy::deterministic(2, vec![0, 0, 1], "bad").unwrap();
    assert!(performance(&mdp, &good, 0.9).unwrap() > performance(&mdp, &bad, 0.9).unwrap());
    let mut set = CandidateSet::new();
    set.push(bad);
    set.push(good);
    let report = mc2ps(&set, &post, 0.9, &RiskSpec::default(), 0).unwrap();
    assert_eq!(report.winner.provenance(), "good");
}

#[test]
fn duplicates_never_change_the_winner() {
    let post = chain_posterior(3, 2);
    let set = generate_policies(&post, &GAMMAS, 3, 0.9, &[], 5).unwrap();
    let mut doubled: Vec<Policy> = Vec::new();
    for p in set.iter().rev() {
        doubled.push(p.clone());
    }
    doubled.extend(set.iter().cloned());
    let spec = RiskSpec::default();
    let plain = mc2ps(&set, &post, 0.9, &spec, 6).unwrap();
    let dup = mc2ps(
        &CandidateSet::with_duplicates(doubled.clone()),
        &post,
        0.9,
        &spec,
        6,
    )
    .unwrap();
    assert!(plain.winner.same_rule(&dup.winner));
    let mut reversed = CandidateSet::new();
    for p in doubled {
        reversed.push(p);
    }
    assert_eq!(reversed.len(), set.len());
}

#[test]
fn adding_a_candidate_keeps_existing_estimates() {
    let post = chain_posterior(2, 3);
    let spec = RiskSpec::default();
    let mut set = CandidateSet::new();
    set.push(Policy::deterministic(2, vec![0; 5], "a").unwrap());
    set.push(Policy::deterministic(2, vec![1, 0, 0, 0, 0], "b").unwrap());
    let before = mc2ps(&set, &post, 0.9, &spec, 7).unwrap();
    let mut grown = CandidateSet::new();
    grown.push(Policy::deterministic(2, vec![1; 5], "c").unwrap());
    for p in set.iter() {
        grown.push(p.clone());
    }
    let after = mc2ps(&grown, &post, 0.9, &spec, 7).unwrap();
    assert_eq!(before.estimates[0].1, after.estimates[1].1);
    assert_eq!(before.estimates[1].1, after.estimates[2].1);
    assert_eq!(
        after.total_models_sampled,
        after
            .estimates
            .iter()
            .map(|(_, e)| e.total_samples)
            .sum::<usize>()
    );
}

#[test]
fn reward_shift_moves_estimates_and_keeps_the_winner() {
    let mdp = chain();
    let batch = collect_batch(&mdp, "chain", 3, 8, 12).unwrap();
    let c = 3.5;
    let base = posterior_for(&mdp, &batch);
    let shifted = posterior_for(&mdp.shift_rewards(c), &batch);
    let set = generate_policies(&base, &GAMMAS, 3, 0.9, &[], 1).unwrap();
    let spec = RiskSpec::default();
    let a = mc2ps(&set, &base, 0.9, &spec, 2).unwrap();
    let b = mc2ps(&set, &shifted, 0.9, &spec, 2).unwrap();
    assert_eq!(a.winner_index, b.winner_index);
    for ((_, ea), (_, eb)) in a.estimates.iter().zip(&b.estimates) {
        assert!(
            (eb.utility - ea.utility - c / 0.1).abs() < 1e-8,
            "{} vs {}",
            ea.utility,
            eb.utility
        );
    }
}

/// Fixed-budget q-quantile of `draws` utilities and the sample range.
fn fixed_quantile(
    post: &DirichletPosterior,
    pi: &Policy,
    q: f64,
    draws: u64,
    seed: u64,
) -> (f64, f64) {
    let mut u: Vec<f64> = (0..draws)
        .map(|j| {
            post.sample_performance(pi, 0.9, derive_seed(seed, j))
                .unwrap()
        })
        .collect();
    u.sort_by(f64::total_cmp);
    let idx = ((q * draws as f64).ceil() as usize).max(1) - 1;
    (u[idx], u[u.len() - 1] - u[0])
}

#[test]
fn selection_agrees_with_fixed_budget_oracle() {
    let spec = RiskSpec::default();
    let trials = 50;
    let mut agree = 0;
    for trial in 0..trials {
        let post = chain_posterior(3, 1_000 + trial);
        let set = generate_policies(&post, &GAMMAS, 3, 0.9, &[], trial).unwrap();
        let report = mc2ps(&set, &post, 0.9, &spec, trial).unwrap();
        let oracle: Vec<(f64, f64)> = set
            .iter()
            .map(|p| fixed_quantile(&post, p, spec.q, 10_000, 0xdead_0000 + trial))
            .collect();
        let mut order: Vec<usize> = (0..oracle.len()).collect();
        order.sort_by(|&a, &b| oracle[b].0.total_cmp(&oracle[a].0));
        let best = order[0];
        let close = order.len() > 1 && {
            let eps = spec.eps_rel * oracle[order[0]].1.max(oracle[order[1]].1);
            oracle[order[0]].0 - oracle[order[1]].0 < 2.0 * eps
        };
        if report.winner_index == best || close {
            agree += 1;
        }
    }
    assert!(agree as f64 >= 0.95 * trials as f64, "{agree}/{trials}");
}

#[test]
fn empty_batch_still_selects() {
    let mdp = chain();
    let report = evc(
        &TransitionBatch::empty(5, 2, "chain"),
        &mdp,
        &EvcSettings::default(),
        &[],
        3,
    )
    .unwrap();
    assert_eq!(report.winner.n_states(), 5);
}

#[test]
fn selection_beats_trivial_in_most_large_batches() {
    let mdp = chain();
    let settings = EvcSettings::default();
    let mut wins = 0;
    for seed in 0..100 {
        let batch = collect_batch(&mdp, "chain", 7, 8, seed).unwrap();
        let report = evc(&batch, &mdp, &settings, &[], seed).unwrap();
        let trivial = &report.estimates[0].0;
        assert_eq!(trivial.provenance(), TRIVIAL_TAG);
        if performance(&mdp, &report.winner, 0.9).unwrap()
            >= performance(&mdp, trivial, 0.9).unwrap()
        {
            wins += 1;
        }
    }
    assert!(wins > 50, "{wins}/100");
}
