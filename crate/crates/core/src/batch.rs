//! Offline transition batches: collection under a uniformly random policy
//! and the batch CSV format.
//!
//! CSV schema, one row per transition, with a header:
//!
//! ```text
//! episode_id,t,s,a,r,s_next
//! 0,0,0,1,2,0
//! ```

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{Policy, TabularMdp};
use crate::seeding::rng_for;

/// One observed transition `(s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// A chained sequence of steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        if let Some(i) = steps.windows(2).position(|w| w[0].next_state != w[1].state) {
            return Err(invalid(format!(
                "trajectory breaks between steps {i} and {}",
                i + 1
            )));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `sum_t gamma^t r_t`, truncated at the end of the trajectory.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for step in &self.steps {
            total += discount * step.reward;
            discount *= gamma;
        }
        total
    }
}

/// An ordered set of equal-length trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    trajectories: Vec<Trajectory>,
    collector: Policy,
    env_name: String,
    seed: u64,
}

impl TransitionBatch {
    pub fn new(
        trajectories: Vec<Trajectory>,
        collector: Policy,
        env_name: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            if trajectories.iter().any(|t| t.len() != first.len()) {
                return Err(invalid("trajectories in a batch must share one length"));
            }
        }
        Ok(Self {
            trajectories,
            collector,
            env_name: env_name.into(),
            seed,
        })
    }

    /// A batch holding no transitions.
    pub fn empty(n_states: usize, n_actions: usize, env_name: impl Into<String>) -> Self {
        Self {
            trajectories: Vec::new(),
            collector: Policy::uniform(n_states, n_actions),
            env_name: env_name.into(),
            seed: 0,
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn collector(&self) -> &Policy {
        &self.collector
    }

    pub fn env_name(&self) -> &str {
        &self.env_name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Steps per trajectory (0 for an empty batch).
    pub fn trajectory_len(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::len)
    }

    /// Total number of transitions `N = m n`.
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    /// Concatenation of two batches, keeping this batch's metadata.
    pub fn concat(&self, other: &TransitionBatch) -> Result<Self> {
        let mut trajectories = self.trajectories.clone();
        trajectories.extend(other.trajectories.iter().cloned());
        Self::new(
            trajectories,
            self.collector.clone(),
            self.env_name.clone(),
            self.seed,
        )
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for (episode_id, traj) in self.trajectories.iter().enumerate() {
            for (t, step) in traj.steps.iter().enumerate() {
                out.serialize(CsvRow {
                    episode_id,
                    t,
                    s: step.state,
                    a: step.action,
                    r: step.reward,
                    s_next: step.next_state,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a batch CSV. Rows must be grouped by episode and ordered by `t`.
    pub fn read_csv<R: Read>(
        reader: R,
        n_states: usize,
        n_actions: usize,
        env_name: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let mut trajectories = Vec::new();
        let mut current: Vec<Step> = Vec::new();
        let mut current_id = None;
        for row in input.deserialize::<CsvRow>() {
            let row = row?;
            if row.s >= n_states || row.s_next >= n_states || row.a >= n_actions {
                return Err(invalid(format!(
                    "episode {} step {}: index out of range",
                    row.episode_id, row.t
                )));
            }
            if current_id != Some(row.episode_id) {
                if !current.is_empty() {
                    trajectories.push(Trajectory::new(std::mem::take(&mut current))?);
                }
                current_id = Some(row.episode_id);
            }
            if row.t != current.len() {
                return Err(invalid(format!(
                    "episode {}: expected t={}, found t={}",
                    row.episode_id,
                    current.len(),
                    row.t
                )));
            }
            current.push(Step {
                state: row.s,
                action: row.a,
                reward: row.r,
                next_state: row.s_next,
            });
        }
        if !current.is_empty() {
            trajectories.push(Trajectory::new(current)?);
        }
        Self::new(
            trajectories,
            Policy::uniform(n_states, n_actions),
            env_name,
            seed,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    episode_id: usize,
    t: usize,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
}

/// Index drawn from a discrete distribution using one uniform variate.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Collects `m` trajectories of `n` steps with uniformly random actions,
/// restarting from the initial distribution for each trajectory.
pub fn collect_batch(
    mdp: &TabularMdp,
    env_name: &str,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<TransitionBatch> {
    if m == 0 || n == 0 {
        return Err(invalid("m and n must be at least 1"));
    }
    let n_actions = mdp.n_actions();
    let trajectories = (0..m)
        .map(|episode| {
            let mut rng = rng_for(seed, episode as u64);
            let mut state = sample_index(mdp.initial_dist(), rng.random());
            let steps = (0..n)
                .map(|_| {
                    let action = rng.random_range(0..n_actions);
                    let next_state = sample_index(mdp.transition(state, action), rng.random());
                    let step = Step {
                        state,
                        action,
                        reward: mdp.transition_reward(state, action, next_state),
                        next_state,
                    };
                    state = next_state;
                    step
                })
                .collect();
            Trajectory { steps }
        })
        .collect();
    TransitionBatch::new(
        trajectories,
        Policy::uniform(mdp.n_states(), n_actions),
        env_name,
        seed,
    )
}
