//! Self-normalized importance-sampling risk estimates from logged
//! trajectories, used as a comparison selector.
//!
//! For a deterministic target policy and a uniform behavior policy the
//! per-trajectory ratio is `|A|^n` when every logged action agrees with the
//! target and 0 otherwise, so on realistic batches most candidates end up
//! with no support at all.

use crate::batch::{Trajectory, TransitionBatch};
use crate::error::{invalid, Result};
use crate::mdp::Policy;
use crate::risk::RiskMeasure;
use crate::selection::CandidateSet;

/// Product over steps of `pi(a|s) / behavior(a|s)`.
pub fn is_ratio(traj: &Trajectory, policy: &Policy, behavior: &Policy) -> Result<f64> {
    let mut ratio = 1.0;
    for step in traj.steps() {
        let b = behavior.prob(step.state, step.action);
        if b <= 0.0 {
            return Err(invalid(format!(
                "behavior policy never takes action {} in state {}",
                step.action, step.state
            )));
        }
        ratio *= policy.prob(step.state, step.action) / b;
    }
    Ok(ratio)
}

/// Discounted return and importance weight of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedReturn {
    pub ret: f64,
    pub weight: f64,
}

pub fn weighted_returns(
    batch: &TransitionBatch,
    policy: &Policy,
    behavior: &Policy,
    gamma: f64,
) -> Result<Vec<WeightedReturn>> {
    batch
        .trajectories()
        .iter()
        .map(|t| {
            Ok(WeightedReturn {
                ret: t.discounted_return(gamma),
                weight: is_ratio(t, policy, behavior)?,
            })
        })
        .collect()
}

/// Parameters shared by every candidate in one comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnoConfig {
    pub gamma_ev: f64,
    pub q: f64,
    pub measure: RiskMeasure,
    /// Smallest per-step reward; `r_min / (1 - gamma_ev)` is reported when
    /// no trajectory supports the policy.
    pub r_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnoEstimate {
    pub value: f64,
    /// True when every importance weight was zero.
    pub degenerate: bool,
    /// Trajectories with a nonzero weight.
    pub support: usize,
}

/// Returns sorted ascending with self-normalized weights summing to one.
/// Empty when every weight is zero.
pub fn normalized_weights(samples: &[WeightedReturn]) -> Vec<WeightedReturn> {
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut out: Vec<WeightedReturn> = samples
        .iter()
        .filter(|s| s.weight > 0.0)
        .map(|s| WeightedReturn {
            ret: s.ret,
            weight: s.weight / total,
        })
        .collect();
    out.sort_by(|a, b| a.ret.total_cmp(&b.ret));
    out
}

/// VaR or CVaR of the weighted empirical return distribution.
pub fn weighted_risk(samples: &[WeightedReturn], q: f64, measure: RiskMeasure) -> Option<f64> {
    let cdf = normalized_weights(samples);
    if cdf.is_empty() {
        return None;
    }
    let mut acc = 0.0;
    let mut var = cdf.last().unwrap().ret;
    for s in &cdf {
        acc += s.weight;
        if acc >= q - 1e-12 {
            var = s.ret;
            break;
        }
    }
    Some(match measure {
        RiskMeasure::VaR => var,
        RiskMeasure::CVaR => {
            let (mass, sum) = cdf
                .iter()
                .take_while(|s| s.ret <= var)
                .fold((0.0, 0.0), |(m, t), s| (m + s.weight, t + s.weight * s.ret));
            sum / mass
        }
    })
}

/// Risk of `policy` estimated from trajectories logged under `behavior`.
pub fn uno_risk(
    batch: &TransitionBatch,
    policy: &Policy,
    behavior: &Policy,
    config: &UnoConfig,
) -> Result<UnoEstimate> {
    if batch.trajectories().is_empty() {
        return Err(invalid("empty batch"));
    }
    if !(config.q > 0.0 && config.q < 1.0) {
        return Err(invalid(format!("q = {} outside (0, 1)", config.q)));
    }
    let samples = weighted_returns(batch, policy, behavior, config.gamma_ev)?;
    let support = samples.iter().filter(|s| s.weight > 0.0).count();
    Ok(match weighted_risk(&samples, config.q, config.measure) {
        Some(value) => UnoEstimate {
            value,
            degenerate: false,
            support,
        },
        None => UnoEstimate {
            value: config.r_min / (1.0 - config.gamma_ev),
            degenerate: true,
            support,
        },
    })
}

#[derive(Debug, Clone)]
pub struct UnoSelection {
    pub winner_index: usize,
    pub estimates: Vec<UnoEstimate>,
}

/// Candidate with the highest weighted risk estimate; ties and the case
/// where every candidate is degenerate fall back to the earliest candidate.
pub fn uno_select(
    candidates: &CandidateSet,
    batch: &TransitionBatch,
    behavior: &Policy,
    config: &UnoConfig,
) -> Result<UnoSelection> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate set"));
    }
    let estimates = candidates
        .iter()
        .map(|p| uno_risk(batch, p, behavior, config))
        .collect::<Result<Vec<_>>>()?;
    let mut winner_index = 0;
    let mut best: Option<f64> = None;
    for (i, e) in estimates.iter().enumerate() {
        if e.degenerate {
            continue;
        }
        if best.is_none_or(|b| e.value > b) {
            best = Some(e.value);
            winner_index = i;
        }
    }
    Ok(UnoSelection {
        winner_index,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Step;

    fn traj(actions: &[usize]) -> Trajectory {
        Trajectory::new(
            actions
                .iter()
                .map(|&a| Step {
                    state: 0,
                    action: a,
                    reward: 1.0,
                    next_state: 0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_ratio_is_power_of_action_count() {
        let pi = Policy::deterministic(3, vec![1], "").unwrap();
        let beta = Policy::uniform(1, 3);
        assert_eq!(is_ratio(&traj(&[1; 8]), &pi, &beta).unwrap(), 6561.0);
        assert_eq!(
            is_ratio(&traj(&[1, 1, 1, 0, 1, 1, 1, 1]), &pi, &beta).unwrap(),
            0.0
        );
    }

    #[test]
    fn identical_stochastic_policies_give_unit_ratio() {
        let pi = Policy::stochastic(1, 3, vec![0.2, 0.3, 0.5], "").unwrap();
        let r = is_ratio(&traj(&[0, 2, 1, 2]), &pi, &pi).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_behavior_probability_is_rejected() {
        let pi = Policy::uniform(1, 2);
        let beta = Policy::deterministic(2, vec![0], "").unwrap();
        assert!(is_ratio(&traj(&[1]), &pi, &beta).is_err());
    }

    #[test]
    fn hand_computed_weighted_cdf() {
        let samples = [
            WeightedReturn {
                ret: 0.0,
                weight: 1.0,
            },
            WeightedReturn {
                ret: 10.0,
                weight: 3.0,
            },
        ];
        assert_eq!(weighted_risk(&samples, 0.5, RiskMeasure::VaR), Some(10.0));
        assert_eq!(weighted_risk(&samples, 0.25, RiskMeasure::VaR), Some(0.0));
        assert_eq!(weighted_risk(&samples, 0.5, RiskMeasure::CVaR), Some(7.5));
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let samples = [
            WeightedReturn {
                ret: 3.0,
                weight: 2.0,
            },
            WeightedReturn {
                ret: 1.0,
                weight: 0.0,
            },
            WeightedReturn {
                ret: 2.0,
                weight: 5.0,
            },
        ];
        let w = normalized_weights(&samples);
        assert_eq!(w.len(), 2);
        assert!((w.iter().map(|s| s.weight).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(normalized_weights(&[WeightedReturn {
            ret: 1.0,
            weight: 0.0
        }])
        .is_empty());
    }

    fn batch(actions: &[&[usize]]) -> TransitionBatch {
        TransitionBatch::new(
            actions.iter().map(|a| traj(a)).collect(),
            Policy::uniform(1, 2),
            "unit",
            0,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_policy_gets_floor() {
        let b = batch(&[&[0, 0], &[0, 1]]);
        let pi = Policy::deterministic(2, vec![1], "").unwrap();
        let cfg = UnoConfig {
            gamma_ev: 0.5,
            q: 0.25,
            measure: RiskMeasure::VaR,
            r_min: -1.0,
        };
        let e = uno_risk(&b, &pi, &Policy::uniform(1, 2), &cfg).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.value, -2.0);
        assert_eq!(e.support, 0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let b = TransitionBatch::empty(1, 2, "unit");
        let cfg = UnoConfig {
            gamma_ev: 0.5,
            q: 0.25,
            measure: RiskMeasure::VaR,
            r_min: 0.0,
        };
        assert!(uno_risk(&b, &Policy::uniform(1, 2), &Policy::uniform(1, 2), &cfg).is_err());
    }

    #[test]
    fn all_degenerate_falls_back_to_first() {
        let b = batch(&[&[0, 1], &[1, 0]]);
        let mut set = CandidateSet::new();
        set.push(Policy::deterministic(2, vec![0], "first").unwrap());
        set.push(Policy::deterministic(2, vec![1], "second").unwrap());
        let cfg = UnoConfig {
            gamma_ev: 0.5,
            q: 0.25,
            measure: RiskMeasure::CVaR,
            r_min: 0.0,
        };
        let sel = uno_select(&set, &b, &Policy::uniform(1, 2), &cfg).unwrap();
        assert_eq!(sel.winner_index, 0);
        assert!(sel.estimates.iter().all(|e| e.degenerate));
    }
}
