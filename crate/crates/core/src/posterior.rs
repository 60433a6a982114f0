//! Dirichlet posterior over transition models.
//!
//! Under the uninformative prior every row `T[s][a][.]` has posterior
//! `Dirichlet(n[s][a][.] + 1)`, where `n` counts transitions observed in the
//! batch. Rewards, the initial distribution and the absorbing-state mask
//! are known inputs; absorbing rows stay fixed self-loops in every model.
//!
//! Sampling is counter-based: row `(s, a)` of the model drawn with seed `k`
//! uses ChaCha stream `s * |A| + a` of `k`, so a row's value never depends on
//! which other rows were drawn.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

use crate::batch::TransitionBatch;
use crate::error::{invalid, Result};
use crate::mdp::{policy_system, solve_policy_system, EvalMethod, Policy, TabularMdp};
use crate::seeding::rng_for;

/// Per-(s, a) successor counts `n[s][a][s']`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCounts {
    n_states: usize,
    n_actions: usize,
    counts: Vec<u64>,
}

impl TransitionCounts {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            counts: vec![0; n_states * n_actions * n_states],
        }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_states * n_actions * n_states {
            return Err(invalid("count tensor has wrong length"));
        }
        Ok(Self {
            n_states,
            n_actions,
            counts,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize, next: usize) -> u64 {
        self.counts[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn row(&self, s: usize, a: usize) -> &[u64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.counts[start..start + self.n_states]
    }

    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [u64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &mut self.counts[start..start + self.n_states]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    /// Total number of counted transitions.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merged(&self, other: &TransitionCounts) -> Result<Self> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(invalid("count tensors have different shapes"));
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self { counts, ..*self })
    }

    /// Structured text form, tagged with the batch it came from.
    pub fn to_json(&self, meta: &CountsMeta) -> String {
        let doc = CountsDocument {
            meta: meta.clone(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            counts: (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| self.row(s, a).to_vec())
                        .collect()
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("counts serialize");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<(Self, CountsMeta)> {
        let doc: CountsDocument = serde_json::from_str(text)?;
        let mut flat = Vec::with_capacity(doc.n_states * doc.n_actions * doc.n_states);
        if doc.counts.len() != doc.n_states {
            return Err(invalid("count document has wrong number of states"));
        }
        for per_action in &doc.counts {
            if per_action.len() != doc.n_actions
                || per_action.iter().any(|r| r.len() != doc.n_states)
            {
                return Err(invalid("count document rows have wrong shape"));
            }
            per_action.iter().for_each(|r| flat.extend_from_slice(r));
        }
        Ok((Self::from_vec(doc.n_states, doc.n_actions, flat)?, doc.meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &CountsMeta) -> Result<()> {
        fs::write(path, self.to_json(meta))?;
        Ok(())
    }
}

/// Batch metadata stored next to serialized counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsMeta {
    pub env: String,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
}

#[derive(Serialize, Deserialize)]
struct CountsDocument {
    #[serde(flatten)]
    meta: CountsMeta,
    n_states: usize,
    n_actions: usize,
    counts: Vec<Vec<Vec<u64>>>,
}

/// Tallies every transition of `batch`.
pub fn counts_from_batch(
    batch: &TransitionBatch,
    n_states: usize,
    n_actions: usize,
) -> Result<TransitionCounts> {
    let mut counts = TransitionCounts::zeros(n_states, n_actions);
    for step in batch.steps() {
        if step.state >= n_states || step.next_state >= n_states || step.action >= n_actions {
            return Err(invalid(format!(
                "transition ({}, {}, {}) out of range for {n_states} states, {n_actions} actions",
                step.state, step.action, step.next_state
            )));
        }
        counts.row_mut(step.state, step.action)[step.next_state] += 1;
    }
    Ok(counts)
}

/// Known reward function.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// Expected reward table `r[s][a]`, independent of the dynamics.
    StateAction(Vec<f64>),
    /// Transition-labelled rewards `r(s, a, s')`; each model's expected
    /// reward table follows from its own transition rows.
    Transition(Vec<f64>),
}

/// Posterior over transition models given counts and the known parts of
/// the MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPosterior {
    counts: TransitionCounts,
    rewards: RewardModel,
    initial: Vec<f64>,
    terminal: Vec<bool>,
}

impl DirichletPosterior {
    pub fn new(
        counts: TransitionCounts,
        rewards: RewardModel,
        initial: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let (ns, na) = (counts.n_states, counts.n_actions);
        let reward_len = match &rewards {
            RewardModel::StateAction(r) => {
                (r.len() == ns * na)
                    .then_some(())
                    .ok_or_else(|| invalid("reward table shape"))?;
                r
            }
            RewardModel::Transition(r) => {
                (r.len() == ns * na * ns)
                    .then_some(())
                    .ok_or_else(|| invalid("transition reward shape"))?;
                r
            }
        };
        if reward_len.iter().any(|r| !r.is_finite()) {
            return Err(invalid("non-finite reward"));
        }
        if initial.len() != ns || terminal.len() != ns {
            return Err(invalid(
                "initial distribution or terminal mask has wrong length",
            ));
        }
        Ok(Self {
            counts,
            rewards,
            initial,
            terminal,
        })
    }

    /// Posterior whose known parts (rewards, initial distribution, absorbing
    /// states) are copied from `env`.
    pub fn for_environment(counts: TransitionCounts, env: &TabularMdp) -> Result<Self> {
        if counts.n_states != env.n_states() || counts.n_actions != env.n_actions() {
            return Err(invalid("counts do not match the environment dimensions"));
        }
        let rewards = match env.transition_rewards() {
            Some(tr) => RewardModel::Transition(tr.to_vec()),
            None => RewardModel::StateAction(env.rewards().to_vec()),
        };
        Self::new(
            counts,
            rewards,
            env.initial_dist().to_vec(),
            env.terminal_mask().to_vec(),
        )
    }

    pub fn counts(&self) -> &TransitionCounts {
        &self.counts
    }

    pub fn n_states(&self) -> usize {
        self.counts.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.counts.n_actions
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    /// `(r_min, r_max)` over the known rewards.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let values = match &self.rewards {
            RewardModel::StateAction(r) | RewardModel::Transition(r) => r,
        };
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            })
    }

    fn row_reward(&self, s: usize, a: usize, row: &[f64]) -> f64 {
        let na = self.counts.n_actions;
        match &self.rewards {
            RewardModel::StateAction(r) => r[s * na + a],
            RewardModel::Transition(tr) => {
                let ns = self.counts.n_states;
                let start = (s * na + a) * ns;
                row.iter()
                    .zip(&tr[start..start + ns])
                    .map(|(p, r)| p * r)
                    .sum()
            }
        }
    }

    fn absorbing_row(&self, s: usize, out: &mut [f64]) {
        out.fill(0.0);
        out[s] = 1.0;
    }

    fn build_model(&self, mut fill_row: impl FnMut(usize, usize, &mut [f64])) -> TabularMdp {
        let (ns, na) = (self.counts.n_states, self.counts.n_actions);
        let mut transitions = vec![0.0; ns * na * ns];
        for (row_index, out) in transitions.chunks_mut(ns).enumerate() {
            let (s, a) = (row_index / na, row_index % na);
            if self.terminal[s] {
                self.absorbing_row(s, out);
            } else {
                fill_row(s, a, out);
            }
        }
        let built = match &self.rewards {
            RewardModel::StateAction(r) => TabularMdp::new(
                ns,
                na,
                transitions,
                r.clone(),
                self.initial.clone(),
                self.terminal.clone(),
            ),
            RewardModel::Transition(tr) => TabularMdp::with_transition_rewards(
                ns,
                na,
                transitions,
                tr.clone(),
                self.initial.clone(),
                self.terminal.clone(),
            ),
        };
        built.expect("posterior models satisfy the MDP invariants")
    }

    /// Maximum-likelihood model: empirical frequencies, uniform rows where
    /// `(s, a)` was never visited.
    pub fn trivial_model(&self) -> TabularMdp {
        self.build_model(|s, a, out| {
            let row = self.counts.row(s, a);
            let total: u64 = row.iter().sum();
            if total == 0 {
                out.fill(1.0 / out.len() as f64);
            } else {
                for (o, &c) in out.iter_mut().zip(row) {
                    *o = c as f64 / total as f64;
                }
            }
        })
    }

    /// Posterior mean model, rows `(n_i + 1) / sum_k (n_k + 1)`.
    pub fn posterior_mean(&self) -> TabularMdp {
        self.build_model(|s, a, out| {
            let row = self.counts.row(s, a);
            let nu = row.iter().sum::<u64>() as f64 + row.len() as f64;
            for (o, &c) in out.iter_mut().zip(row) {
                *o = (c as f64 + 1.0) / nu;
            }
        })
    }

    /// Draws row `(s, a)` of the model with the given seed.
    fn sample_row(&self, s: usize, a: usize, seed: u64, out: &mut [f64]) {
        let stream = (s * self.counts.n_actions + a) as u64;
        let mut rng = rng_for(seed, stream);
        draw_dirichlet(self.counts.row(s, a), &mut rng, out);
    }

    /// A complete transition model drawn from the posterior.
    pub fn sample_model(&self, seed: u64) -> TabularMdp {
        self.build_model(|s, a, out| self.sample_row(s, a, seed, out))
    }

    /// `u(pi)` in the model `sample_model(seed)`, drawing only the rows the
    /// policy can reach. Bit-identical to evaluating the full sampled model.
    pub fn sample_performance(&self, policy: &Policy, gamma: f64, seed: u64) -> Result<f64> {
        let (ns, na) = (self.counts.n_states, self.counts.n_actions);
        if policy.n_states() != ns || policy.n_actions() != na {
            return Err(invalid("policy dimensions differ from the posterior"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid(format!("discount {gamma} outside [0, 1)")));
        }
        let mut rows = vec![0.0; ns * na * ns];
        let mut row_rewards = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                if policy.prob(s, a) == 0.0 {
                    continue;
                }
                let idx = s * na + a;
                let out = &mut rows[idx * ns..(idx + 1) * ns];
                if self.terminal[s] {
                    self.absorbing_row(s, out);
                } else {
                    self.sample_row(s, a, seed, out);
                }
                row_rewards[idx] = self.row_reward(s, a, out);
            }
        }
        let (p, r) = policy_system(ns, na, policy, |s, a| {
            let idx = s * na + a;
            (&rows[idx * ns..(idx + 1) * ns], row_rewards[idx])
        });
        let values = solve_policy_system(ns, &p, &r, gamma, EvalMethod::Auto)?;
        Ok(self.initial.iter().zip(&values).map(|(p, v)| p * v).sum())
    }
}

/// Fills `out` with a `Dirichlet(counts + 1)` draw via normalized gammas.
fn draw_dirichlet<R: Rng>(counts: &[u64], rng: &mut R, out: &mut [f64]) {
    let mut total = 0.0;
    for (o, &c) in out.iter_mut().zip(counts) {
        let g: f64 = if c == 0 {
            // Gamma(1, 1) is the unit exponential
            Exp1.sample(rng)
        } else {
            Gamma::new(c as f64 + 1.0, 1.0)
                .expect("positive shape")
                .sample(rng)
        };
        *o = g;
        total += g;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
