use std::collections::HashMap;

use evc_core::batch::{collect_batch, Step, Trajectory, TransitionBatch};
use evc_core::envs::chain;
use evc_core::mdp::{performance, Policy, TabularMdp};
use evc_core::posterior::{counts_from_batch, DirichletPosterior, RewardModel, TransitionCounts};
use proptest::prelude::*;

/// One action, three states; only row (0, 0) carries `row`.
fn single_row_posterior(row: &[u64]) -> DirichletPosterior {
    let ns = row.len();
    let mut counts = TransitionCounts::zeros(ns, 1);
    counts.row_mut(0, 0).copy_from_slice(row);
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    DirichletPosterior::new(
        counts,
        RewardModel::StateAction(vec![0.0; ns]),
        initial,
        vec![false; ns],
    )
    .unwrap()
}

fn component_means(post: &DirichletPosterior, draws: u64) -> (Vec<f64>, Vec<f64>) {
    let ns = post.n_states();
    let (mut sum, mut sum_sq) = (vec![0.0; ns], vec![0.0; ns]);
    for seed in 0..draws {
        let m = post.sample_model(seed);
        for (j, &p) in m.transition(0, 0).iter().enumerate() {
            sum[j] += p;
            sum_sq[j] += p * p;
        }
    }
    let k = draws as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / k).collect();
    let ses = sum_sq
        .iter()
        .zip(&means)
        .map(|(sq, m)| ((sq / k - m * m) / k).sqrt())
        .collect();
    (means, ses)
}

#[test]
fn zero_counts_sample_uniformly_on_the_simplex() {
    for ns in [3, 4] {
        let (means, _) = component_means(&single_row_posterior(&vec![0; ns]), 100_000);
        for m in means {
            assert!((m - 1.0 / ns as f64).abs() < 0.01, "{m}");
        }
    }
}

#[test]
fn concentrated_counts_match_the_dirichlet_mean() {
    let (means, _) = component_means(&single_row_posterior(&[100, 0, 0]), 100_000);
    assert!((means[0] - 101.0 / 103.0).abs() < 0.01, "{}", means[0]);
}

#[test]
fn sample_means_converge_to_the_posterior_mean() {
    let post = single_row_posterior(&[2, 1, 0]);
    let exact = post.posterior_mean();
    let (means, ses) = component_means(&post, 100_000);
    for j in 0..3 {
        let target = exact.transition(0, 0)[j];
        assert!(
            (means[j] - target).abs() < 3.0 * ses[j],
            "component {j}: {} vs {target}",
            means[j]
        );
    }
}

fn deterministic_mdp() -> TabularMdp {
    // three states on a cycle; action 0 advances, action 1 stays
    let (ns, na) = (3, 2);
    let mut t = vec![0.0; ns * na * ns];
    for s in 0..ns {
        t[(s * na) * ns + (s + 1) % ns] = 1.0;
        t[(s * na + 1) * ns + s] = 1.0;
    }
    TabularMdp::new(
        ns,
        na,
        t,
        vec![0.0, 1.0, 0.5, 0.0, 2.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![false; 3],
    )
    .unwrap()
}

#[test]
fn trivial_model_recovers_deterministic_dynamics() {
    let mdp = deterministic_mdp();
    let batch = collect_batch(&mdp, "cycle", 20, 10, 3).unwrap();
    let counts = counts_from_batch(&batch, 3, 2).unwrap();
    for s in 0..3 {
        for a in 0..2 {
            assert!(
                counts.row(s, a).iter().sum::<u64>() > 0,
                "({s},{a}) unvisited"
            );
        }
    }
    let trivial = DirichletPosterior::for_environment(counts, &mdp)
        .unwrap()
        .trivial_model();
    assert_eq!(trivial.transitions(), mdp.transitions());
}

#[test]
fn chain_trivial_model_equals_recounted_frequencies() {
    let mdp = chain();
    let batch = collect_batch(&mdp, "chain", 40, 8, 21).unwrap();
    let mut tally: HashMap<(usize, usize, usize), u64> = HashMap::new();
    let mut visits: HashMap<(usize, usize), u64> = HashMap::new();
    for step in batch.steps() {
        *tally
            .entry((step.state, step.action, step.next_state))
            .or_default() += 1;
        *visits.entry((step.state, step.action)).or_default() += 1;
    }
    assert_eq!(visits.len(), 10, "every (s, a) must be visited");
    let counts = counts_from_batch(&batch, 5, 2).unwrap();
    let trivial = DirichletPosterior::for_environment(counts, &mdp)
        .unwrap()
        .trivial_model();
    for s in 0..5 {
        for a in 0..2 {
            for next in 0..5 {
                let expected =
                    *tally.get(&(s, a, next)).unwrap_or(&0) as f64 / visits[&(s, a)] as f64;
                assert_eq!(trivial.transition(s, a)[next], expected);
            }
        }
    }
}

#[test]
fn count_mass_equals_batch_length() {
    let batch = collect_batch(&chain(), "chain", 3, 8, 9).unwrap();
    assert_eq!(counts_from_batch(&batch, 5, 2).unwrap().total(), 24);
}

#[test]
fn empty_batch_gives_the_prior() {
    let mdp = chain();
    let counts = counts_from_batch(&TransitionBatch::empty(5, 2, "chain"), 5, 2).unwrap();
    let mean = DirichletPosterior::for_environment(counts, &mdp)
        .unwrap()
        .posterior_mean();
    assert!(mean.transitions().iter().all(|&p| p == 0.2));
}

#[test]
fn chained_steps_are_required() {
    let broken = vec![
        Step {
            state: 0,
            action: 0,
            reward: 0.0,
            next_state: 1,
        },
        Step {
            state: 2,
            action: 0,
            reward: 0.0,
            next_state: 1,
        },
    ];
    assert!(Trajectory::new(broken).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn counts_are_additive(m1 in 1usize..6, m2 in 1usize..6, s1: u64, s2: u64) {
        let mdp = chain();
        let a = collect_batch(&mdp, "chain", m1, 8, s1).unwrap();
        let b = collect_batch(&mdp, "chain", m2, 8, s2).unwrap();
        let joint = counts_from_batch(&a.concat(&b).unwrap(), 5, 2).unwrap();
        let ca = counts_from_batch(&a, 5, 2).unwrap();
        let cb = counts_from_batch(&b, 5, 2).unwrap();
        let summed: Vec<u64> = ca.as_slice().iter().zip(cb.as_slice()).map(|(x, y)| x + y).collect();
        prop_assert_eq!(joint.as_slice(), &summed[..]);
        prop_assert_eq!(&joint, &ca.merged(&cb).unwrap());
    }

    #[test]
    fn lazy_performance_matches_the_sampled_model(seed: u64, actions in prop::collection::vec(0usize..2, 5)) {
        let mdp = chain();
        let batch = collect_batch(&mdp, "chain", 3, 8, 4).unwrap();
        let post = DirichletPosterior::for_environment(counts_from_batch(&batch, 5, 2).unwrap(), &mdp).unwrap();
        let pi = Policy::deterministic(2, actions, "").unwrap();
        let lazy = post.sample_performance(&pi, 0.9, seed).unwrap();
        let full = performance(&post.sample_model(seed), &pi, 0.9).unwrap();
        prop_assert!((lazy - full).abs() <= 1e-10 * full.abs().max(1.0), "{} vs {}", lazy, full);
    }

    #[test]
    fn sampled_rows_are_stochastic(seed: u64) {
        let mdp = chain();
        let batch = collect_batch(&mdp, "chain", 2, 8, seed).unwrap();
        let post = DirichletPosterior::for_environment(counts_from_batch(&batch, 5, 2).unwrap(), &mdp).unwrap();
        let m = post.sample_model(seed);
        for row in m.transitions().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
