//! Confident Monte Carlo estimation of VaR and CVaR.
//!
//! Utilities `u_1 <= ... <= u_L` of i.i.d. draws are kept sorted. The number
//! `B` of draws at or below the true quantile `a_q` is `Binomial(L, q)`, so
//! `P(u_g <= a_q < u_h) = sum_{i=g}^{h-1} C(L, i) q^i (1 - q)^(L - i)`.
//! Sampling proceeds in batches of `k` until the narrowest bracket `(g, h)`
//! with coverage above `1 - alpha` is also narrow in value:
//! `u_h - u_g < eps_rel (u_L - u_1)`.
//!
//! Indices `g` and `h` are 1-based throughout, matching order-statistic
//! notation.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::Policy;
use crate::posterior::DirichletPosterior;
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMeasure {
    #[serde(rename = "var")]
    VaR,
    #[serde(rename = "cvar")]
    CVaR,
}

impl RiskMeasure {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskMeasure::VaR => "var",
            RiskMeasure::CVaR => "cvar",
        }
    }
}

impl std::fmt::Display for RiskMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RiskMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "var" => Ok(RiskMeasure::VaR),
            "cvar" => Ok(RiskMeasure::CVaR),
            other => Err(invalid(format!("unknown risk measure {other:?}"))),
        }
    }
}

/// Parameters of one confident quantile estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    /// Risk level (quantile order).
    pub q: f64,
    /// Significance of the order-statistic bracket.
    pub alpha: f64,
    /// Bracket width tolerance relative to the sample range.
    pub eps_rel: f64,
    /// Draws per sampling round.
    pub k: usize,
    /// Bail-out cap on the total number of draws.
    pub max_samples: usize,
    pub measure: RiskMeasure,
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            q: 0.25,
            alpha: 0.01,
            eps_rel: 0.01,
            k: 100,
            max_samples: 10_000,
            measure: RiskMeasure::VaR,
        }
    }
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.q) {
            return Err(invalid(format!("q = {} outside (0, 1)", self.q)));
        }
        if !open_unit(self.alpha) {
            return Err(invalid(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if !(self.eps_rel > 0.0 && self.eps_rel <= 1.0) {
            return Err(invalid(format!(
                "eps_rel = {} outside (0, 1]",
                self.eps_rel
            )));
        }
        if self.k == 0 {
            return Err(invalid("k must be positive"));
        }
        if self.max_samples < self.k {
            return Err(invalid("max_samples must be at least k"));
        }
        Ok(())
    }

    pub fn with_measure(mut self, measure: RiskMeasure) -> Self {
        self.measure = measure;
        self
    }
}

/// Outcome of [`confident_quantile`].
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate {
    pub measure: RiskMeasure,
    pub q: f64,
    pub alpha: f64,
    pub eps_rel: f64,
    /// VaR estimate `u_g` or CVaR estimate `mean(u_1..u_g)`.
    pub utility: f64,
    pub g: usize,
    pub h: usize,
    pub total_samples: usize,
    pub sorted_utilities: Vec<f64>,
    /// False when the bail-out cap was reached first.
    pub converged: bool,
}

impl RiskEstimate {
    /// `u_g`.
    pub fn var(&self) -> f64 {
        self.sorted_utilities[self.g - 1]
    }

    /// `(1/g) sum_{i <= g} u_i`.
    pub fn cvar(&self) -> f64 {
        lower_mean(&self.sorted_utilities, self.g)
    }

    /// `[u_g, u_h)`.
    pub fn bracket(&self) -> (f64, f64) {
        (
            self.sorted_utilities[self.g - 1],
            self.sorted_utilities[self.h - 1],
        )
    }

    pub fn record(&self) -> RiskRecord {
        RiskRecord {
            utility: self.utility,
            g: self.g,
            h: self.h,
            total_samples: self.total_samples,
            converged: self.converged,
            measure: self.measure,
            q: self.q,
            alpha: self.alpha,
            eps_rel: self.eps_rel,
        }
    }
}

/// Flat, loggable summary of a [`RiskEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub utility: f64,
    pub g: usize,
    pub h: usize,
    pub total_samples: usize,
    pub converged: bool,
    pub measure: RiskMeasure,
    pub q: f64,
    pub alpha: f64,
    pub eps_rel: f64,
}

fn lower_mean(sorted: &[f64], g: usize) -> f64 {
    sorted[..g].iter().sum::<f64>() / g as f64
}

/// Binomial pmf of `Binomial(l, q)` at `0..=l`, computed in log space.
pub fn binomial_pmf(l: usize, q: f64) -> Vec<f64> {
    let mut ln_fact = Vec::with_capacity(l + 1);
    let mut acc = 0.0_f64;
    ln_fact.push(0.0);
    for i in 1..=l {
        acc += (i as f64).ln();
        ln_fact.push(acc);
    }
    let (ln_q, ln_p) = (q.ln(), (-q).ln_1p());
    (0..=l)
        .map(|i| {
            let log =
                ln_fact[l] - ln_fact[i] - ln_fact[l - i] + i as f64 * ln_q + (l - i) as f64 * ln_p;
            log.exp()
        })
        .collect()
}

/// Narrowest 1-based index pair `1 <= g < h <= l` with
/// `sum_{i=g}^{h-1} Binom(l, q)(i) > 1 - alpha`.
///
/// Among pairs of minimal width the one whose center is nearest `ceil(q l)`
/// wins, then the smaller `g`. `None` when no pair reaches the coverage.
pub fn binomial_bracket(l: usize, q: f64, alpha: f64) -> Option<(usize, usize)> {
    if l < 2 {
        return None;
    }
    let pmf = binomial_pmf(l, q);
    let mut prefix = Vec::with_capacity(l + 2);
    prefix.push(0.0_f64);
    for p in &pmf {
        let last = *prefix.last().unwrap();
        prefix.push(last + p);
    }
    // sum_{i=g}^{h-1} pmf[i] = prefix[h] - prefix[g]
    let target = 1.0 - alpha;
    // tolerance keeps products like 0.1 * 30 from rounding up past an integer
    let anchor = 2 * (q * l as f64 - 1e-9).ceil() as i64;
    let mut best: Option<(usize, usize)> = None;
    let mut h = 2;
    for g in 1..l {
        h = h.max(g + 1);
        while h <= l && prefix[h] - prefix[g] <= target {
            h += 1;
        }
        if h > l {
            break;
        }
        best = match best {
            None => Some((g, h)),
            Some((bg, bh)) => {
                let (w, bw) = (h - g, bh - bg);
                let off = ((g + h) as i64 - anchor).abs();
                let boff = ((bg + bh) as i64 - anchor).abs();
                if w < bw || (w == bw && off < boff) {
                    Some((g, h))
                } else {
                    Some((bg, bh))
                }
            }
        };
    }
    best
}

type BracketKey = (usize, u64, u64);
type BracketMemo = Mutex<HashMap<BracketKey, Option<(usize, usize)>>>;

fn bracket_memo() -> &'static BracketMemo {
    static MEMO: OnceLock<BracketMemo> = OnceLock::new();
    MEMO.get_or_init(Default::default)
}

/// Memoized [`binomial_bracket`]; the bracket depends only on `(l, q, alpha)`.
pub fn cached_bracket(l: usize, q: f64, alpha: f64) -> Option<(usize, usize)> {
    let key = (l, q.to_bits(), alpha.to_bits());
    if let Some(hit) = bracket_memo().lock().unwrap().get(&key) {
        return *hit;
    }
    let value = binomial_bracket(l, q, alpha);
    bracket_memo().lock().unwrap().insert(key, value);
    value
}

fn merge_sorted(sorted: &mut Vec<f64>, mut fresh: Vec<f64>) {
    fresh.sort_by(f64::total_cmp);
    let old = std::mem::take(sorted);
    let mut merged = Vec::with_capacity(old.len() + fresh.len());
    let (mut i, mut j) = (0, 0);
    while i < old.len() && j < fresh.len() {
        if old[i] <= fresh[j] {
            merged.push(old[i]);
            i += 1;
        } else {
            merged.push(fresh[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&old[i..]);
    merged.extend_from_slice(&fresh[j..]);
    *sorted = merged;
}

/// Draws utilities with `sampler(derive_seed(seed, j))` for `j = 0, 1, ...`
/// in rounds of `spec.k` until the quantile bracket is narrow enough or the
/// bail-out cap is hit.
///
/// Each round is evaluated in parallel; the result depends only on
/// `(spec, seed, sampler)`.
pub fn confident_quantile<F>(spec: &RiskSpec, seed: u64, sampler: F) -> Result<RiskEstimate>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    spec.validate()?;
    let mut sorted: Vec<f64> = Vec::new();
    loop {
        let start = sorted.len();
        let round = spec.k.min(spec.max_samples - start);
        let fresh = (start..start + round)
            .into_par_iter()
            .map(|j| sampler(derive_seed(seed, j as u64)))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(bad) = fresh.iter().find(|u| !u.is_finite()) {
            return Err(Error::EstimationFailure(format!(
                "non-finite utility {bad}"
            )));
        }
        merge_sorted(&mut sorted, fresh);
        let l = sorted.len();
        let bracket = cached_bracket(l, spec.q, spec.alpha);
        let exhausted = l >= spec.max_samples;
        let converged = bracket.is_some_and(|(g, h)| {
            let range = sorted[l - 1] - sorted[0];
            range == 0.0 || sorted[h - 1] - sorted[g - 1] < spec.eps_rel * range
        });
        if !(converged || exhausted) {
            continue;
        }
        let (g, h) = bracket.ok_or_else(|| {
            Error::EstimationFailure(format!(
                "no order-statistic bracket reaches coverage {} with {l} samples",
                1.0 - spec.alpha
            ))
        })?;
        let utility = match spec.measure {
            RiskMeasure::VaR => sorted[g - 1],
            RiskMeasure::CVaR => lower_mean(&sorted, g),
        };
        return Ok(RiskEstimate {
            measure: spec.measure,
            q: spec.q,
            alpha: spec.alpha,
            eps_rel: spec.eps_rel,
            utility,
            g,
            h,
            total_samples: l,
            sorted_utilities: sorted,
            converged,
        });
    }
}

/// Risk-aware utility of `policy` under the posterior, evaluated with
/// discount `gamma_ev`.
pub fn risk_evaluation(
    policy: &Policy,
    posterior: &DirichletPosterior,
    gamma_ev: f64,
    spec: &RiskSpec,
    seed: u64,
) -> Result<RiskEstimate> {
    if policy.n_states() != posterior.n_states() || policy.n_actions() != posterior.n_actions() {
        return Err(invalid("policy dimensions differ from the posterior"));
    }
    confident_quantile(spec, seed, |s| {
        posterior.sample_performance(policy, gamma_ev, s)
    })
}

/// Draws per round in [`cvar_refine_with`].
const REFINE_CHUNK: usize = 256;

/// Default rejection budget per requested sample in [`cvar_refine`].
pub const REFINE_BUDGET_PER_SAMPLE: usize = 1_000;

/// Mean of the first `n` draws whose utility is at most `var_estimate`.
///
/// Draw `j` uses `sampler(derive_seed(seed, j))`. Fails once `max_draws`
/// draws have been spent without finding `n` acceptable ones.
pub fn cvar_refine_with<F>(
    var_estimate: f64,
    n: usize,
    max_draws: usize,
    seed: u64,
    sampler: F,
) -> Result<f64>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let mut accepted = 0usize;
    let mut total = 0.0;
    let mut drawn = 0usize;
    while drawn < max_draws {
        let round = REFINE_CHUNK.min(max_draws - drawn);
        let values = (drawn..drawn + round)
            .into_par_iter()
            .map(|j| sampler(derive_seed(seed, j as u64)))
            .collect::<Result<Vec<f64>>>()?;
        drawn += round;
        for u in values.into_iter().filter(|&u| u <= var_estimate) {
            total += u;
            accepted += 1;
            if accepted == n {
                return Ok(total / n as f64);
            }
        }
    }
    Err(Error::EstimationFailure(format!(
        "only {accepted} of {n} draws fell below {var_estimate} within {max_draws} draws"
    )))
}

/// Refined CVaR estimate from `n` fresh posterior models whose performance
/// does not exceed `var_estimate`.
pub fn cvar_refine(
    policy: &Policy,
    posterior: &DirichletPosterior,
    gamma_ev: f64,
    var_estimate: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    cvar_refine_with(
        var_estimate,
        n,
        n.saturating_mul(REFINE_BUDGET_PER_SAMPLE),
        seed,
        |s| posterior.sample_performance(policy, gamma_ev, s),
    )
}
