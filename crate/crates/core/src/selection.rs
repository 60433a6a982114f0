//! Candidate generation by discount sweep and risk-aware argmax selection.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::batch::TransitionBatch;
use crate::error::{invalid, Result};
use crate::mdp::{policy_iteration, Policy, PolicyKind, TabularMdp};
use crate::posterior::{counts_from_batch, DirichletPosterior};
use crate::risk::{risk_evaluation, RiskEstimate, RiskMeasure, RiskRecord, RiskSpec};
use crate::seeding::derive_seed;

/// Provenance tag of the policy solved on the trivial model with `gamma_ev`.
pub const TRIVIAL_TAG: &str = "trivial";

/// Selection-rate class of a provenance tag: `trivial`, `gamma-sweep` or
/// `imported:<name>`.
pub fn provenance_class(tag: &str) -> String {
    if tag == TRIVIAL_TAG {
        TRIVIAL_TAG.to_string()
    } else if tag.starts_with("imported:") {
        tag.to_string()
    } else {
        "gamma-sweep".to_string()
    }
}

/// Ordered, duplicate-free set of candidate policies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    policies: Vec<Policy>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `policy` unless an equal decision rule is already present.
    pub fn push(&mut self, policy: Policy) -> bool {
        if self.policies.iter().any(|p| p.same_rule(&policy)) {
            return false;
        }
        self.policies.push(policy);
        true
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn get(&self, i: usize) -> Option<&Policy> {
        self.policies.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Policy> {
        self.policies.iter()
    }

    /// Builds a set that keeps duplicates. Only useful to check that
    /// deduplication never matters for the outcome.
    pub fn with_duplicates(policies: Vec<Policy>) -> Self {
        Self { policies }
    }
}

impl<'a> IntoIterator for &'a CandidateSet {
    type Item = &'a Policy;
    type IntoIter = std::slice::Iter<'a, Policy>;

    fn into_iter(self) -> Self::IntoIter {
        self.policies.iter()
    }
}

fn format_gamma(gamma: f64) -> String {
    format!("{gamma}")
}

/// Candidate set for one batch.
///
/// Order: the trivial policy (trivial model solved with `gamma_ev`), then
/// for each model in `[trivial, sample_1, ..., sample_l]` and each
/// `gamma in gammas` the optimal policy of that model, then `external`.
/// Duplicates keep their first occurrence.
pub fn generate_policies(
    posterior: &DirichletPosterior,
    gammas: &[f64],
    l: usize,
    gamma_ev: f64,
    external: &[Policy],
    seed: u64,
) -> Result<CandidateSet> {
    if let Some(g) = gammas.iter().find(|&&g| g > gamma_ev) {
        return Err(invalid(format!(
            "discount {g} exceeds the evaluation discount {gamma_ev}"
        )));
    }
    for p in external {
        if p.n_states() != posterior.n_states() || p.n_actions() != posterior.n_actions() {
            return Err(invalid(format!(
                "external policy {:?} has wrong shape",
                p.provenance()
            )));
        }
    }
    let trivial = posterior.trivial_model();
    let mut models = vec![trivial];
    models.extend((0..l).map(|i| posterior.sample_model(derive_seed(seed, i as u64))));

    let jobs: Vec<(usize, f64)> = (0..models.len())
        .flat_map(|m| gammas.iter().map(move |&g| (m, g)))
        .collect();
    let solved = jobs
        .par_iter()
        .map(|&(m, g)| {
            policy_iteration(&models[m], g)
                .map(|p| p.with_provenance(format!("gamma={}/model={m}", format_gamma(g))))
        })
        .collect::<Result<Vec<Policy>>>()?;

    let mut set = CandidateSet::new();
    set.push(policy_iteration(&models[0], gamma_ev)?.with_provenance(TRIVIAL_TAG));
    for p in solved {
        set.push(p);
    }
    for p in external {
        let tag = if p.provenance().starts_with("imported:") {
            p.provenance().to_string()
        } else {
            format!("imported:{}", p.provenance())
        };
        set.push(p.clone().with_provenance(tag));
    }
    Ok(set)
}

/// 64-bit FNV-1a digest of a decision rule.
fn rule_fingerprint(policy: &Policy) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |word: u64| {
        for byte in word.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(policy.n_states() as u64);
    eat(policy.n_actions() as u64);
    match policy.kind() {
        PolicyKind::Deterministic => {
            eat(0);
            for &a in policy.actions().expect("deterministic") {
                eat(a as u64);
            }
        }
        PolicyKind::Stochastic => {
            eat(1);
            for s in 0..policy.n_states() {
                for a in 0..policy.n_actions() {
                    eat(policy.prob(s, a).to_bits());
                }
            }
        }
    }
    h
}

/// Seed used to evaluate `policy` under master seed `seed`. Depends only on
/// the decision rule, so adding or duplicating candidates never perturbs the
/// estimate of another policy.
pub fn policy_seed(seed: u64, policy: &Policy) -> u64 {
    derive_seed(seed, rule_fingerprint(policy))
}

/// Outcome of [`mc2ps`].
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub winner_index: usize,
    pub winner: Policy,
    /// One entry per candidate, in candidate order.
    pub estimates: Vec<(Policy, RiskEstimate)>,
    /// Sum of the per-policy sample counts.
    pub total_models_sampled: usize,
}

#[derive(Debug, Serialize)]
struct ReportDocument<'a> {
    winner_index: usize,
    winner_provenance: &'a str,
    total_models_sampled: usize,
    non_converged: Vec<&'a str>,
    policies: Vec<PolicyRecord<'a>>,
}

#[derive(Debug, Serialize)]
struct PolicyRecord<'a> {
    provenance: &'a str,
    #[serde(flatten)]
    estimate: RiskRecord,
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    provenance: &'a str,
    measure: &'a str,
    q: f64,
    utility: f64,
    g: usize,
    h: usize,
    #[serde(rename = "L")]
    total_samples: usize,
    converged: bool,
}

impl SelectionReport {
    /// Candidates whose estimate hit the bail-out cap.
    pub fn non_converged(&self) -> Vec<usize> {
        self.estimates
            .iter()
            .enumerate()
            .filter(|(_, (_, e))| !e.converged)
            .map(|(i, _)| i)
            .collect()
    }

    /// Winner when the same draws are scored with `measure` instead.
    ///
    /// The stopping rule does not depend on the measure, so this equals the
    /// winner of a fresh [`mc2ps`] run under `measure` with the same seed.
    pub fn winner_under(&self, measure: RiskMeasure) -> usize {
        let score = |e: &RiskEstimate| match measure {
            RiskMeasure::VaR => e.var(),
            RiskMeasure::CVaR => e.cvar(),
        };
        first_argmax(self.estimates.iter().map(|(_, e)| score(e)))
    }

    pub fn to_json(&self) -> String {
        let doc = ReportDocument {
            winner_index: self.winner_index,
            winner_provenance: self.winner.provenance(),
            total_models_sampled: self.total_models_sampled,
            non_converged: self
                .non_converged()
                .into_iter()
                .map(|i| self.estimates[i].0.provenance())
                .collect(),
            policies: self
                .estimates
                .iter()
                .map(|(p, e)| PolicyRecord {
                    provenance: p.provenance(),
                    estimate: e.record(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
        text.push('\n');
        text
    }

    /// Per-policy CSV: provenance, measure, q, utility, g, h, L, converged.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for (p, e) in &self.estimates {
            out.serialize(CsvRow {
                provenance: p.provenance(),
                measure: e.measure.as_str(),
                q: e.q,
                utility: e.utility,
                g: e.g,
                h: e.h,
                total_samples: e.total_samples,
                converged: e.converged,
            })?;
        }
        out.flush()?;
        Ok(())
    }
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Picks the candidate with the highest risk-aware utility.
///
/// Candidates are evaluated concurrently; ties go to the earliest
/// candidate. Estimates that hit the bail-out cap still compete with their
/// best-effort value and are listed by [`SelectionReport::non_converged`].
pub fn mc2ps(
    candidates: &CandidateSet,
    posterior: &DirichletPosterior,
    gamma_ev: f64,
    spec: &RiskSpec,
    seed: u64,
) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate set"));
    }
    let estimates = candidates
        .policies()
        .par_iter()
        .map(|p| risk_evaluation(p, posterior, gamma_ev, spec, policy_seed(seed, p)))
        .collect::<Result<Vec<_>>>()?;
    let winner_index = first_argmax(estimates.iter().map(|e| e.utility));
    let total_models_sampled = estimates.iter().map(|e| e.total_samples).sum();
    Ok(SelectionReport {
        winner_index,
        winner: candidates.policies()[winner_index].clone(),
        estimates: candidates
            .policies()
            .iter()
            .cloned()
            .zip(estimates)
            .collect(),
        total_models_sampled,
    })
}

/// Inputs of one end-to-end selection besides the batch.
#[derive(Debug, Clone)]
pub struct EvcSettings {
    pub gammas: Vec<f64>,
    pub l: usize,
    pub gamma_ev: f64,
    pub spec: RiskSpec,
}

impl Default for EvcSettings {
    fn default() -> Self {
        Self {
            gammas: vec![0.2, 0.4, 0.6, 0.8, 0.9],
            l: 3,
            gamma_ev: 0.9,
            spec: RiskSpec::default(),
        }
    }
}

/// Seeds for the two randomized stages of [`evc`].
pub fn evc_seeds(seed: u64) -> (u64, u64) {
    (derive_seed(seed, 0), derive_seed(seed, 1))
}

/// Batch -> counts -> posterior -> candidates -> risk-aware selection.
///
/// `env` supplies the known parts of the MDP (rewards, initial distribution,
/// absorbing states); its transition tensor is never read.
pub fn evc(
    batch: &TransitionBatch,
    env: &TabularMdp,
    settings: &EvcSettings,
    external: &[Policy],
    seed: u64,
) -> Result<SelectionReport> {
    let counts = counts_from_batch(batch, env.n_states(), env.n_actions())?;
    let posterior = DirichletPosterior::for_environment(counts, env)?;
    let (generate_seed, select_seed) = evc_seeds(seed);
    let candidates = generate_policies(
        &posterior,
        &settings.gammas,
        settings.l,
        settings.gamma_ev,
        external,
        generate_seed,
    )?;
    mc2ps(
        &candidates,
        &posterior,
        settings.gamma_ev,
        &settings.spec,
        select_seed,
    )
}
