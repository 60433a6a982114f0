//! Finite tabular MDPs: representation, exact policy evaluation, policy
//! iteration and the scalar performance functional.
//!
//! Transition tensors are stored flat in `[s][a][s']` order. When an
//! environment labels rewards per transition `r(s, a, s')`, the labelled
//! tensor is kept alongside the expected reward table
//! `r[s][a] = sum_{s'} T[s][a][s'] r(s, a, s')`; value functions only ever
//! see the expected table.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance used when checking that probability vectors sum to one.
pub const PROB_TOL: f64 = 1e-9;

/// State count up to which policy evaluation uses a dense linear solve.
pub const DIRECT_SOLVE_MAX_STATES: usize = 1000;

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid(format!(
            "{what}: negative or non-finite probability"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(invalid(format!("{what}: probabilities sum to {total}")));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// A finite MDP with known dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    transition_rewards: Option<Vec<f64>>,
    initial: Vec<f64>,
    terminal: Vec<bool>,
}

impl TabularMdp {
    /// Builds an MDP from a transition tensor and an expected reward table.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            transition_rewards: None,
            initial,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Builds an MDP whose rewards are labelled per transition `r(s, a, s')`.
    pub fn with_transition_rewards(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        transition_rewards: Vec<f64>,
        initial: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if transition_rewards.len() != n_states * n_actions * n_states {
            return Err(invalid("transition reward tensor has wrong length"));
        }
        if transitions.len() != transition_rewards.len() {
            return Err(invalid("transition tensor has wrong length"));
        }
        let rewards = expected_rewards(n_states, n_actions, &transitions, &transition_rewards);
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            transition_rewards: Some(transition_rewards),
            initial,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(invalid("state and action counts must be positive"));
        }
        if self.transitions.len() != ns * na * ns {
            return Err(invalid("transition tensor has wrong length"));
        }
        if self.rewards.len() != ns * na {
            return Err(invalid("reward table has wrong length"));
        }
        if self.initial.len() != ns || self.terminal.len() != ns {
            return Err(invalid(
                "initial distribution or terminal mask has wrong length",
            ));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(invalid("non-finite reward"));
        }
        if let Some(tr) = &self.transition_rewards {
            if tr.iter().any(|r| !r.is_finite()) {
                return Err(invalid("non-finite transition reward"));
            }
        }
        for s in 0..ns {
            for a in 0..na {
                check_distribution(self.transition(s, a), &format!("T[{s}][{a}]"))?;
                if self.terminal[s] && self.transition(s, a)[s] != 1.0 {
                    return Err(invalid(format!("terminal state {s} is not absorbing")));
                }
            }
        }
        check_distribution(&self.initial, "initial distribution")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Successor distribution `T[s][a][.]`.
    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// Expected immediate reward `r[s][a]`.
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Labelled reward of the transition `s -a-> next`. Falls back to the
    /// expected reward when the MDP carries no labelled tensor.
    pub fn transition_reward(&self, s: usize, a: usize, next: usize) -> f64 {
        match &self.transition_rewards {
            Some(tr) => tr[(s * self.n_actions + a) * self.n_states + next],
            None => self.reward(s, a),
        }
    }

    pub fn transition_rewards(&self) -> Option<&[f64]> {
        self.transition_rewards.as_deref()
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    /// `(r_min, r_max)` over every reward the agent can observe.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let values: &[f64] = self.transition_rewards.as_deref().unwrap_or(&self.rewards);
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            })
    }

    /// Copy of this MDP with every reward shifted by `c`.
    pub fn shift_rewards(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.rewards.iter_mut().for_each(|r| *r += c);
        if let Some(tr) = out.transition_rewards.as_mut() {
            tr.iter_mut().for_each(|r| *r += c);
        }
        out
    }

    /// Copy of this MDP with a different initial distribution.
    pub fn with_initial_dist(&self, initial: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.initial = initial;
        out.validate()?;
        Ok(out)
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(invalid(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

pub(crate) fn expected_rewards(
    n_states: usize,
    n_actions: usize,
    transitions: &[f64],
    transition_rewards: &[f64],
) -> Vec<f64> {
    (0..n_states * n_actions)
        .map(|row| {
            let span = row * n_states..(row + 1) * n_states;
            transitions[span.clone()]
                .iter()
                .zip(&transition_rewards[span])
                .map(|(p, r)| p * r)
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    Deterministic(Vec<usize>),
    Stochastic(Vec<f64>),
}

/// Deterministic action map or stochastic action-distribution matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    rule: Rule,
    provenance: String,
}

/// Two stochastic policies closer than this elementwise are duplicates.
pub const STOCHASTIC_DEDUP_TOL: f64 = 1e-12;

impl Policy {
    pub fn deterministic(
        n_actions: usize,
        actions: Vec<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if actions.is_empty() || n_actions == 0 {
            return Err(invalid("empty policy"));
        }
        if let Some(a) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(invalid(format!("action index {a} >= {n_actions}")));
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            rule: Rule::Deterministic(actions),
            provenance: provenance.into(),
        })
    }

    /// `probs` is row-major `pi[s][a]`.
    pub fn stochastic(
        n_states: usize,
        n_actions: usize,
        probs: Vec<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(invalid("empty policy"));
        }
        if probs.len() != n_states * n_actions {
            return Err(invalid("action probability matrix has wrong length"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, &format!("pi[{s}]"))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            rule: Rule::Stochastic(probs),
            provenance: provenance.into(),
        })
    }

    /// The uniformly random policy.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self::stochastic(
            n_states,
            n_actions,
            vec![p; n_states * n_actions],
            "uniform",
        )
        .expect("uniform policy is valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn kind(&self) -> PolicyKind {
        match self.rule {
            Rule::Deterministic(_) => PolicyKind::Deterministic,
            Rule::Stochastic(_) => PolicyKind::Stochastic,
        }
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Action map of a deterministic policy.
    pub fn actions(&self) -> Option<&[usize]> {
        match &self.rule {
            Rule::Deterministic(a) => Some(a),
            Rule::Stochastic(_) => None,
        }
    }

    /// `pi(a | s)`.
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match &self.rule {
            Rule::Deterministic(actions) => {
                if actions[s] == a {
                    1.0
                } else {
                    0.0
                }
            }
            Rule::Stochastic(p) => p[s * self.n_actions + a],
        }
    }

    /// Same decision rule, ignoring provenance.
    pub fn same_rule(&self, other: &Policy) -> bool {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return false;
        }
        match (&self.rule, &other.rule) {
            (Rule::Deterministic(a), Rule::Deterministic(b)) => a == b,
            (Rule::Stochastic(a), Rule::Stochastic(b)) => a
                .iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= STOCHASTIC_DEDUP_TOL),
            _ => false,
        }
    }

    /// Serializes to the policy file format.
    pub fn to_json(&self) -> String {
        let doc = PolicyDocument::from(self);
        let mut text = serde_json::to_string_pretty(&doc).expect("policy serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk policy schema.
///
/// ```json
/// {
///   "kind": "deterministic",
///   "n_states": 5,
///   "n_actions": 2,
///   "det_actions": [1, 0, 0, 0, 0],
///   "provenance_tag": "trivial"
/// }
/// ```
///
/// Stochastic policies carry `action_probs` (one row per state) instead of
/// `det_actions`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDocument {
    kind: PolicyKind,
    n_states: usize,
    n_actions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    det_actions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_probs: Option<Vec<Vec<f64>>>,
    provenance_tag: String,
}

impl From<&Policy> for PolicyDocument {
    fn from(p: &Policy) -> Self {
        let (det_actions, action_probs) = match &p.rule {
            Rule::Deterministic(a) => (Some(a.clone()), None),
            Rule::Stochastic(probs) => (
                None,
                Some(probs.chunks(p.n_actions).map(<[f64]>::to_vec).collect()),
            ),
        };
        Self {
            kind: p.kind(),
            n_states: p.n_states,
            n_actions: p.n_actions,
            det_actions,
            action_probs,
            provenance_tag: p.provenance.clone(),
        }
    }
}

impl TryFrom<PolicyDocument> for Policy {
    type Error = Error;

    fn try_from(doc: PolicyDocument) -> Result<Self> {
        match (doc.kind, doc.det_actions, doc.action_probs) {
            (PolicyKind::Deterministic, Some(actions), None) => {
                if actions.len() != doc.n_states {
                    return Err(invalid("det_actions length differs from n_states"));
                }
                Policy::deterministic(doc.n_actions, actions, doc.provenance_tag)
            }
            (PolicyKind::Stochastic, None, Some(rows)) => {
                if rows.len() != doc.n_states || rows.iter().any(|r| r.len() != doc.n_actions) {
                    return Err(invalid(
                        "action_probs shape differs from n_states x n_actions",
                    ));
                }
                Policy::stochastic(
                    doc.n_states,
                    doc.n_actions,
                    rows.concat(),
                    doc.provenance_tag,
                )
            }
            _ => Err(invalid("policy kind does not match the fields present")),
        }
    }
}

/// State values of a policy together with the discount used.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector {
    pub values: Vec<f64>,
    pub discount: f64,
}

impl ValueVector {
    /// `sum_s mu0[s] V(s)`.
    pub fn expectation(&self, dist: &[f64]) -> f64 {
        dist.iter().zip(&self.values).map(|(p, v)| p * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMethod {
    /// Dense linear solve up to [`DIRECT_SOLVE_MAX_STATES`], sweeps above.
    Auto,
    Direct,
    Iterative {
        tolerance: f64,
        max_sweeps: usize,
    },
}

impl EvalMethod {
    pub const DEFAULT_ITERATIVE: EvalMethod = EvalMethod::Iterative {
        tolerance: 1e-10,
        max_sweeps: 100_000,
    };
}

/// Row-major `P_pi` and `r_pi` for a policy, assembled from per-(s,a) rows.
pub(crate) fn policy_system<'a, R>(
    n_states: usize,
    n_actions: usize,
    policy: &Policy,
    mut row: R,
) -> (Vec<f64>, Vec<f64>)
where
    R: FnMut(usize, usize) -> (&'a [f64], f64),
{
    let mut p = vec![0.0; n_states * n_states];
    let mut r = vec![0.0; n_states];
    for s in 0..n_states {
        let target = &mut p[s * n_states..(s + 1) * n_states];
        match &policy.rule {
            Rule::Deterministic(actions) => {
                let (t, rew) = row(s, actions[s]);
                target.copy_from_slice(t);
                r[s] = rew;
            }
            Rule::Stochastic(probs) => {
                for a in 0..n_actions {
                    let w = probs[s * n_actions + a];
                    if w == 0.0 {
                        continue;
                    }
                    let (t, rew) = row(s, a);
                    for (dst, src) in target.iter_mut().zip(t) {
                        *dst += w * src;
                    }
                    r[s] += w * rew;
                }
            }
        }
    }
    (p, r)
}

/// Solves `V = r + gamma P V`.
pub(crate) fn solve_policy_system(
    n: usize,
    p: &[f64],
    r: &[f64],
    gamma: f64,
    method: EvalMethod,
) -> Result<Vec<f64>> {
    let method = match method {
        EvalMethod::Auto if n <= DIRECT_SOLVE_MAX_STATES => EvalMethod::Direct,
        EvalMethod::Auto => EvalMethod::DEFAULT_ITERATIVE,
        m => m,
    };
    match method {
        EvalMethod::Direct => {
            let a = DMatrix::from_fn(n, n, |i, j| {
                let diag = if i == j { 1.0 } else { 0.0 };
                diag - gamma * p[i * n + j]
            });
            let b = DVector::from_column_slice(r);
            a.lu()
                .solve(&b)
                .map(|v| v.as_slice().to_vec())
                .ok_or_else(|| Error::SolverFailure("singular Bellman system".into()))
        }
        EvalMethod::Iterative {
            tolerance,
            max_sweeps,
        } => {
            let mut v = vec![0.0; n];
            for _ in 0..max_sweeps {
                let mut residual = 0.0_f64;
                for s in 0..n {
                    let row = &p[s * n..(s + 1) * n];
                    let backup = r[s] + gamma * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
                    residual = residual.max((backup - v[s]).abs());
                    v[s] = backup;
                }
                if residual < tolerance {
                    return Ok(v);
                }
            }
            Err(Error::SolverFailure(format!(
                "iterative evaluation did not converge in {max_sweeps} sweeps"
            )))
        }
        EvalMethod::Auto => unreachable!(),
    }
}

/// Value function of `policy` in `mdp`.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<ValueVector> {
    evaluate_with(mdp, policy, gamma, EvalMethod::Auto)
}

pub fn evaluate_with(
    mdp: &TabularMdp,
    policy: &Policy,
    gamma: f64,
    method: EvalMethod,
) -> Result<ValueVector> {
    check_gamma(gamma)?;
    mdp.check_policy(policy)?;
    let (p, r) = policy_system(mdp.n_states, mdp.n_actions, policy, |s, a| {
        (mdp.transition(s, a), mdp.reward(s, a))
    });
    let values = solve_policy_system(mdp.n_states, &p, &r, gamma, method)?;
    Ok(ValueVector {
        values,
        discount: gamma,
    })
}

/// `u(pi) = E_{s ~ mu0}[V(s)]`.
pub fn performance(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<f64> {
    Ok(policy_evaluation(mdp, policy, gamma)?.expectation(mdp.initial_dist()))
}

/// `|| V - (r_pi + gamma P_pi V) ||_inf`.
pub fn bellman_residual(mdp: &TabularMdp, policy: &Policy, value: &ValueVector) -> f64 {
    let n = mdp.n_states;
    (0..n)
        .map(|s| {
            let backup: f64 = (0..mdp.n_actions)
                .map(|a| {
                    let w = policy.prob(s, a);
                    if w == 0.0 {
                        return 0.0;
                    }
                    let next: f64 = mdp
                        .transition(s, a)
                        .iter()
                        .zip(&value.values)
                        .map(|(p, v)| p * v)
                        .sum();
                    w * (mdp.reward(s, a) + value.discount * next)
                })
                .sum();
            (value.values[s] - backup).abs()
        })
        .fold(0.0, f64::max)
}

/// `Q(s, a) = r[s][a] + gamma sum_{s'} T[s][a][s'] V(s')`.
pub fn q_values(mdp: &TabularMdp, value: &ValueVector) -> Vec<f64> {
    let mut q = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let next: f64 = mdp
                .transition(s, a)
                .iter()
                .zip(&value.values)
                .map(|(p, v)| p * v)
                .sum();
            q.push(mdp.reward(s, a) + value.discount * next);
        }
    }
    q
}

/// Greedy action map; near-ties go to the lowest action index.
pub fn greedy_actions(mdp: &TabularMdp, value: &ValueVector) -> Vec<usize> {
    let q = q_values(mdp, value);
    q.chunks(mdp.n_actions)
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-10 * best.abs().max(1.0);
            row.iter().position(|&x| x >= best - tol).unwrap_or(0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyIterationOptions {
    pub max_iterations: usize,
    pub method: EvalMethod,
}

impl Default for PolicyIterationOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1_000,
            method: EvalMethod::Auto,
        }
    }
}

/// Optimal deterministic policy for `mdp` under discount `gamma`.
pub fn policy_iteration(mdp: &TabularMdp, gamma: f64) -> Result<Policy> {
    policy_iteration_with(mdp, gamma, PolicyIterationOptions::default())
}

pub fn policy_iteration_with(
    mdp: &TabularMdp,
    gamma: f64,
    options: PolicyIterationOptions,
) -> Result<Policy> {
    check_gamma(gamma)?;
    let mut policy = Policy::deterministic(mdp.n_actions, vec![0; mdp.n_states], "")?;
    for _ in 0..options.max_iterations {
        let value = evaluate_with(mdp, &policy, gamma, options.method)?;
        let improved = greedy_actions(mdp, &value);
        if Some(improved.as_slice()) == policy.actions() {
            return Ok(policy);
        }
        policy = Policy::deterministic(mdp.n_actions, improved, "")?;
    }
    Err(Error::SolverFailure(format!(
        "policy iteration did not converge in {} iterations",
        options.max_iterations
    )))
}
