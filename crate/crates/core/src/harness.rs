//! Experiment sweeps: collect batches from a known environment, run the
//! selectors on each, and score their picks against the true model.
//!
//! Every (batch size, replicate) cell gets its own seed derived from the
//! master seed, so cells run concurrently and results are reproducible.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::collect_batch;
use crate::envs::{EnvName, EnvSpec};
use crate::error::{invalid, Error, Result};
use crate::mdp::{performance, policy_iteration, Policy, TabularMdp};
use crate::ope::{uno_select, UnoConfig};
use crate::posterior::{counts_from_batch, DirichletPosterior};
use crate::risk::{RiskMeasure, RiskSpec};
use crate::seeding::derive_seed;
use crate::selection::{evc_seeds, generate_policies, mc2ps, provenance_class, TRIVIAL_TAG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    EvcVar,
    EvcCvar,
    UnoVar,
    UnoCvar,
    Trivial,
}

impl Selector {
    pub const ALL: [Selector; 5] = [
        Selector::EvcVar,
        Selector::EvcCvar,
        Selector::UnoVar,
        Selector::UnoCvar,
        Selector::Trivial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::EvcVar => "evc_var",
            Selector::EvcCvar => "evc_cvar",
            Selector::UnoVar => "uno_var",
            Selector::UnoCvar => "uno_cvar",
            Selector::Trivial => "trivial",
        }
    }

    fn is_evc(self) -> bool {
        matches!(self, Selector::EvcVar | Selector::EvcCvar)
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|sel| sel.as_str() == s.trim())
            .ok_or_else(|| invalid(format!("unknown selector {s:?}")))
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in documentation order.
pub const CONFIG_KEYS: [&str; 20] = [
    "env",
    "grid_size",
    "slip_prob",
    "hole_prob",
    "map_seed",
    "reward_seed",
    "batch_sizes",
    "n",
    "replicates",
    "q",
    "alpha",
    "eps_rel",
    "k",
    "max_samples",
    "gammas",
    "l",
    "gamma_ev",
    "external_policies",
    "selectors",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    /// Total transitions per batch; each must be a multiple of `n`.
    pub batch_sizes: Vec<usize>,
    /// Steps per trajectory.
    pub n: usize,
    /// Batches per size.
    pub replicates: usize,
    pub risk: RiskSpec,
    pub gammas: Vec<f64>,
    /// Posterior models solved per discount when generating candidates.
    pub l: usize,
    pub gamma_ev: f64,
    pub external_policies: Vec<PathBuf>,
    pub selectors: Vec<Selector>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Defaults for `env`: n = 8, l = 3, N in {8, 16, ..., 56} and 100
    /// batches per size for Ring and Chain; n = 15, l = 10,
    /// N in {15, 30, ..., 135} and 50 batches per size for RFL.
    pub fn defaults(env: EnvName) -> Self {
        let (n, l, sizes, replicates) = match env {
            EnvName::Ring | EnvName::Chain => (8, 3, 7, 100),
            EnvName::Rfl => (15, 10, 9, 50),
        };
        Self {
            env: EnvSpec::named(env),
            batch_sizes: (1..=sizes).map(|i| i * n).collect(),
            n,
            replicates,
            risk: RiskSpec::default(),
            gammas: vec![0.2, 0.4, 0.6, 0.8, 0.9],
            l,
            gamma_ev: 0.9,
            external_policies: Vec::new(),
            selectors: Selector::ALL.to_vec(),
            seed: 0,
        }
    }

    /// Overwrites one field from its text form. Lists are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("{key} = {value:?}: {e}"));
        macro_rules! parse {
            () => {
                value.trim().parse().map_err(|e| bad(&e))?
            };
        }
        fn list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, T::Err> {
            value
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(str::parse)
                .collect()
        }
        match key {
            "env" => self.env.name = value.parse().map_err(|e: Error| bad(&e))?,
            "grid_size" => self.env.grid_size = parse!(),
            "slip_prob" => self.env.slip_prob = parse!(),
            "hole_prob" => self.env.hole_prob = parse!(),
            "map_seed" => self.env.map_seed = parse!(),
            "reward_seed" => self.env.reward_seed = parse!(),
            "batch_sizes" => self.batch_sizes = list(value).map_err(|e| bad(&e))?,
            "n" => self.n = parse!(),
            "replicates" => self.replicates = parse!(),
            "q" => self.risk.q = parse!(),
            "alpha" => self.risk.alpha = parse!(),
            "eps_rel" => self.risk.eps_rel = parse!(),
            "k" => self.risk.k = parse!(),
            "max_samples" => self.risk.max_samples = parse!(),
            "gammas" => self.gammas = list(value).map_err(|e| bad(&e))?,
            "l" => self.l = parse!(),
            "gamma_ev" => self.gamma_ev = parse!(),
            "external_policies" => {
                self.external_policies = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "selectors" => self.selectors = list(value).map_err(|e: Error| bad(&e))?,
            "seed" => self.seed = parse!(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Builds a config from ordered key/value pairs. Defaults follow the
    /// last `env` entry (Chain when absent); later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let env = match pairs.iter().rev().find(|(k, _)| k == "env") {
            Some((_, v)) => v.parse()?,
            None => EnvName::Chain,
        };
        let mut config = Self::defaults(env);
        for (k, v) in pairs {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.env.validate()?;
        self.risk.validate()?;
        if self.n == 0 {
            return fail("n must be positive".into());
        }
        if self.batch_sizes.is_empty() {
            return fail("batch_sizes is empty".into());
        }
        if let Some(bad) = self
            .batch_sizes
            .iter()
            .find(|&&b| b == 0 || b % self.n != 0)
        {
            return fail(format!(
                "batch size {bad} is not a positive multiple of n = {}",
                self.n
            ));
        }
        if self.replicates == 0 {
            return fail("replicates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma_ev) {
            return fail(format!("gamma_ev = {} outside [0, 1)", self.gamma_ev));
        }
        if self.gammas.is_empty() {
            return fail("gammas is empty".into());
        }
        if let Some(g) = self
            .gammas
            .iter()
            .find(|&&g| !(0.0..=self.gamma_ev).contains(&g))
        {
            return fail(format!("discount {g} outside [0, gamma_ev]"));
        }
        if self.selectors.is_empty() {
            return fail("selectors is empty".into());
        }
        Ok(())
    }

    /// Reads the external policy files. Untagged policies are named after
    /// their file stem.
    pub fn load_externals(&self) -> Result<Vec<Policy>> {
        self.external_policies
            .iter()
            .map(|path| {
                let p = Policy::load(path)?;
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(if p.provenance().is_empty() {
                    p.with_provenance(name)
                } else {
                    p
                })
            })
            .collect()
    }

    /// Flat `key = value` document that [`parse_config`] reads back.
    pub fn to_toml(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        line("env", format!("{:?}", self.env.name.as_str()));
        line("grid_size", self.env.grid_size.to_string());
        line("slip_prob", fmt_float(self.env.slip_prob));
        line("hole_prob", fmt_float(self.env.hole_prob));
        line("map_seed", self.env.map_seed.to_string());
        line("reward_seed", self.env.reward_seed.to_string());
        line(
            "batch_sizes",
            format!(
                "[{}]",
                join(self.batch_sizes.iter().map(|b| b.to_string()).collect())
            ),
        );
        line("n", self.n.to_string());
        line("replicates", self.replicates.to_string());
        line("q", fmt_float(self.risk.q));
        line("alpha", fmt_float(self.risk.alpha));
        line("eps_rel", fmt_float(self.risk.eps_rel));
        line("k", self.risk.k.to_string());
        line("max_samples", self.risk.max_samples.to_string());
        line(
            "gammas",
            format!(
                "[{}]",
                join(self.gammas.iter().map(|&g| fmt_float(g)).collect())
            ),
        );
        line("l", self.l.to_string());
        line("gamma_ev", fmt_float(self.gamma_ev));
        line(
            "external_policies",
            format!(
                "[{}]",
                join(
                    self.external_policies
                        .iter()
                        .map(|p| format!("{:?}", p.display().to_string()))
                        .collect()
                )
            ),
        );
        line(
            "selectors",
            format!(
                "[{}]",
                join(
                    self.selectors
                        .iter()
                        .map(|s| format!("{:?}", s.as_str()))
                        .collect()
                )
            ),
        );
        line("seed", self.seed.to_string());
        out
    }
}

/// TOML float literal (always carries a decimal point or exponent).
fn fmt_float(x: f64) -> String {
    let text = format!("{x:?}");
    if text.contains(['.', 'e', 'E']) || !x.is_finite() {
        text
    } else {
        format!("{text}.0")
    }
}

/// Reads a flat TOML document into key/value pairs for
/// [`ExperimentConfig::from_pairs`]. Arrays become comma-separated text.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    fn scalar(key: &str, v: &toml::Value) -> Result<String> {
        match v {
            toml::Value::String(s) => Ok(s.clone()),
            toml::Value::Integer(i) => Ok(i.to_string()),
            toml::Value::Float(f) => Ok(f.to_string()),
            toml::Value::Boolean(b) => Ok(b.to_string()),
            _ => Err(Error::Config(format!("{key}: unsupported value {v}"))),
        }
    }
    table
        .iter()
        .map(|(k, v)| {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            let text = match v {
                toml::Value::Array(items) => items
                    .iter()
                    .map(|i| scalar(k, i))
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                other => scalar(k, other)?,
            };
            Ok((k.clone(), text))
        })
        .collect()
}

/// True-model scoring shared by every cell of a sweep.
#[derive(Debug, Clone)]
pub struct DeltaUContext {
    mdp: TabularMdp,
    gamma: f64,
    optimal: Policy,
    u_star: f64,
}

impl DeltaUContext {
    /// Solves the true model once. Fails when the optimal performance is not
    /// positive, since it is the normalizer.
    pub fn new(mdp: &TabularMdp, gamma: f64) -> Result<Self> {
        let optimal = policy_iteration(mdp, gamma)?;
        let u_star = performance(mdp, &optimal, gamma)?;
        if u_star <= 0.0 {
            return Err(Error::Normalization(format!(
                "optimal performance {u_star} is not positive"
            )));
        }
        Ok(Self {
            mdp: mdp.clone(),
            gamma,
            optimal,
            u_star,
        })
    }

    pub fn optimal(&self) -> &Policy {
        &self.optimal
    }

    pub fn u_star(&self) -> f64 {
        self.u_star
    }

    pub fn performance(&self, policy: &Policy) -> Result<f64> {
        performance(&self.mdp, policy, self.gamma)
    }

    /// `(u(policy) - u(trivial)) / u(optimal)` on the true model.
    pub fn delta_u(&self, policy: &Policy, trivial: &Policy) -> Result<f64> {
        Ok((self.performance(policy)? - self.performance(trivial)?) / self.u_star)
    }
}

/// One-off form of [`DeltaUContext::delta_u`].
pub fn delta_u(
    policy: &Policy,
    trivial: &Policy,
    true_mdp: &TabularMdp,
    gamma_ev: f64,
) -> Result<f64> {
    DeltaUContext::new(true_mdp, gamma_ev)?.delta_u(policy, trivial)
}

/// Seed of cell (`size_index`, `replicate`).
pub fn cell_seed(master: u64, size_index: usize, replicate: usize) -> u64 {
    derive_seed(derive_seed(master, size_index as u64), replicate as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorOutcome {
    pub selector: Selector,
    pub winner_provenance: String,
    pub delta_u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub batch_size: usize,
    pub replicate: usize,
    pub seed: u64,
    pub candidates: usize,
    /// Smallest and largest ΔU over the candidate set.
    pub candidate_range: Option<(f64, f64)>,
    /// Selector outcomes, or the failure message.
    pub outcome: std::result::Result<Vec<SelectorOutcome>, String>,
}

struct Sweep<'a> {
    config: &'a ExperimentConfig,
    mdp: TabularMdp,
    scorer: DeltaUContext,
    external: Vec<Policy>,
}

impl Sweep<'_> {
    fn run_cell(
        &self,
        batch_size: usize,
        seed: u64,
    ) -> Result<(usize, (f64, f64), Vec<SelectorOutcome>)> {
        let c = self.config;
        let batch = collect_batch(
            &self.mdp,
            c.env.name.as_str(),
            batch_size / c.n,
            c.n,
            derive_seed(seed, 2),
        )?;
        let counts = counts_from_batch(&batch, self.mdp.n_states(), self.mdp.n_actions())?;
        let posterior = DirichletPosterior::for_environment(counts, &self.mdp)?;
        let (generate_seed, select_seed) = evc_seeds(seed);
        let candidates = generate_policies(
            &posterior,
            &c.gammas,
            c.l,
            c.gamma_ev,
            &self.external,
            generate_seed,
        )?;
        let trivial = &candidates.policies()[0];
        debug_assert_eq!(trivial.provenance(), TRIVIAL_TAG);

        let u_trivial = self.scorer.performance(trivial)?;
        let deltas = candidates
            .iter()
            .map(|p| Ok((self.scorer.performance(p)? - u_trivial) / self.scorer.u_star()))
            .collect::<Result<Vec<f64>>>()?;
        let range = deltas
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
                (lo.min(d), hi.max(d))
            });

        let evc = if c.selectors.iter().any(|s| s.is_evc()) {
            Some(mc2ps(
                &candidates,
                &posterior,
                c.gamma_ev,
                &c.risk.with_measure(RiskMeasure::VaR),
                select_seed,
            )?)
        } else {
            None
        };
        let uno = |measure| {
            let config = UnoConfig {
                gamma_ev: c.gamma_ev,
                q: c.risk.q,
                measure,
                r_min: self.mdp.reward_bounds().0,
            };
            uno_select(&candidates, &batch, batch.collector(), &config).map(|s| s.winner_index)
        };
        let outcomes = c
            .selectors
            .iter()
            .map(|&selector| {
                let winner = match selector {
                    Selector::EvcVar => evc
                        .as_ref()
                        .expect("evc ran")
                        .winner_under(RiskMeasure::VaR),
                    Selector::EvcCvar => evc
                        .as_ref()
                        .expect("evc ran")
                        .winner_under(RiskMeasure::CVaR),
                    Selector::UnoVar => uno(RiskMeasure::VaR)?,
                    Selector::UnoCvar => uno(RiskMeasure::CVaR)?,
                    Selector::Trivial => 0,
                };
                Ok(SelectorOutcome {
                    selector,
                    winner_provenance: candidates.policies()[winner].provenance().to_string(),
                    delta_u: deltas[winner],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((candidates.len(), range, outcomes))
    }
}

/// Aggregate of one selector at one batch size (`None` pools all sizes).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub selector: Selector,
    pub batch_size: Option<usize>,
    pub cells: usize,
    pub failed: usize,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    /// Share of winners per provenance class; empty when no cell succeeded.
    pub shares: BTreeMap<String, f64>,
}

impl MetricsRow {
    fn from_cells<'a>(
        selector: Selector,
        batch_size: Option<usize>,
        cells: impl Iterator<Item = &'a CellResult>,
    ) -> Self {
        let mut values = Vec::new();
        let mut classes: BTreeMap<String, usize> = BTreeMap::new();
        let mut failed = 0;
        for cell in cells {
            match &cell.outcome {
                Ok(outs) => {
                    let o = outs
                        .iter()
                        .find(|o| o.selector == selector)
                        .expect("selector outcome");
                    values.push(o.delta_u);
                    *classes
                        .entry(provenance_class(&o.winner_provenance))
                        .or_default() += 1;
                }
                Err(_) => failed += 1,
            }
        }
        let n = values.len();
        values.sort_by(f64::total_cmp);
        let median = match n {
            0 => None,
            _ if n % 2 == 1 => Some(values[n / 2]),
            _ => Some(0.5 * (values[n / 2 - 1] + values[n / 2])),
        };
        Self {
            selector,
            batch_size,
            cells: n,
            failed,
            max: values.last().copied(),
            mean: (n > 0).then(|| values.iter().sum::<f64>() / n as f64),
            median,
            min: values.first().copied(),
            shares: classes
                .into_iter()
                .map(|(k, c)| (k, c as f64 / n as f64))
                .collect(),
        }
    }

    pub fn share(&self, class: &str) -> f64 {
        self.shares.get(class).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub u_star: f64,
    pub cells: Vec<CellResult>,
    pub rows: Vec<MetricsRow>,
}

/// Runs every (batch size, replicate) cell and aggregates per selector.
///
/// A failing cell is recorded with its error and excluded from the
/// statistics instead of aborting the sweep.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mdp = config.env.build()?;
    let external = config.load_externals()?;
    let sweep = Sweep {
        config,
        scorer: DeltaUContext::new(&mdp, config.gamma_ev)?,
        mdp,
        external,
    };

    let jobs: Vec<(usize, usize)> = (0..config.batch_sizes.len())
        .flat_map(|i| (0..config.replicates).map(move |r| (i, r)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(i, replicate)| {
            let batch_size = config.batch_sizes[i];
            let seed = cell_seed(config.seed, i, replicate);
            let (candidates, candidate_range, outcome) = match sweep.run_cell(batch_size, seed) {
                Ok((n, range, outs)) => (n, Some(range), Ok(outs)),
                Err(e) => (0, None, Err(e.to_string())),
            };
            CellResult {
                batch_size,
                replicate,
                seed,
                candidates,
                candidate_range,
                outcome,
            }
        })
        .collect();

    let mut rows = Vec::new();
    for &selector in &config.selectors {
        for &size in &config.batch_sizes {
            rows.push(MetricsRow::from_cells(
                selector,
                Some(size),
                cells.iter().filter(|c| c.batch_size == size),
            ));
        }
        rows.push(MetricsRow::from_cells(selector, None, cells.iter()));
    }
    Ok(ExperimentOutcome {
        config: config.clone(),
        u_star: sweep.scorer.u_star(),
        cells,
        rows,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn size_label(size: Option<usize>) -> String {
    size.map(|s| s.to_string()).unwrap_or_else(|| "all".into())
}

impl ExperimentOutcome {
    /// Provenance classes seen in any row: `trivial` and `gamma-sweep`
    /// first, then imported classes in lexicographic order.
    pub fn classes(&self) -> Vec<String> {
        let mut out = vec![TRIVIAL_TAG.to_string(), "gamma-sweep".to_string()];
        let mut extra: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.shares.keys().cloned())
            .filter(|k| !out.contains(k))
            .collect();
        extra.sort();
        extra.dedup();
        out.extend(extra);
        out
    }

    /// `selector,N,cells,failed,max,mean,median,min,share_<class>...`
    pub fn write_metrics_csv<W: Write>(&self, writer: W) -> Result<()> {
        let classes = self.classes();
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = [
            "selector", "N", "cells", "failed", "max", "mean", "median", "min",
        ]
        .map(String::from)
        .to_vec();
        header.extend(classes.iter().map(|c| format!("share_{c}")));
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.selector.to_string(),
                size_label(r.batch_size),
                r.cells.to_string(),
                r.failed.to_string(),
                opt(r.max),
                opt(r.mean),
                opt(r.median),
                opt(r.min),
            ];
            rec.extend(classes.iter().map(|c| {
                if r.cells == 0 {
                    String::new()
                } else {
                    r.share(c).to_string()
                }
            }));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One line per (cell, selector); failed cells get a single line.
    pub fn write_cells_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([
            "N",
            "replicate",
            "seed",
            "candidates",
            "candidate_min",
            "candidate_max",
            "selector",
            "winner",
            "class",
            "delta_u",
            "error",
        ])?;
        for c in &self.cells {
            let head = [
                c.batch_size.to_string(),
                c.replicate.to_string(),
                c.seed.to_string(),
                c.candidates.to_string(),
                opt(c.candidate_range.map(|r| r.0)),
                opt(c.candidate_range.map(|r| r.1)),
            ];
            match &c.outcome {
                Ok(outs) => {
                    for o in outs {
                        let mut rec = head.to_vec();
                        rec.extend([
                            o.selector.to_string(),
                            o.winner_provenance.clone(),
                            provenance_class(&o.winner_provenance),
                            o.delta_u.to_string(),
                            String::new(),
                        ]);
                        out.write_record(&rec)?;
                    }
                }
                Err(msg) => {
                    let mut rec = head.to_vec();
                    rec.extend([
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        msg.clone(),
                    ]);
                    out.write_record(&rec)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Fixed-width text table of the metrics.
    pub fn summary(&self) -> String {
        let classes = self.classes();
        let mut s = String::new();
        let c = &self.config;
        writeln!(
            s,
            "env={} n={} replicates={} q={} alpha={} l={} gamma_ev={} seed={} u*={:.6}",
            c.env.name,
            c.n,
            c.replicates,
            c.risk.q,
            c.risk.alpha,
            c.l,
            c.gamma_ev,
            c.seed,
            self.u_star
        )
        .unwrap();
        write!(
            s,
            "{:<10} {:>5} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}",
            "selector", "N", "cells", "failed", "max", "mean", "median", "min"
        )
        .unwrap();
        for class in &classes {
            write!(s, " {:>12}", class).unwrap();
        }
        s.push('\n');
        let num = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            write!(
                s,
                "{:<10} {:>5} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}",
                r.selector.as_str(),
                size_label(r.batch_size),
                r.cells,
                r.failed,
                num(r.max),
                num(r.mean),
                num(r.median),
                num(r.min)
            )
            .unwrap();
            for class in &classes {
                let v = if r.cells == 0 {
                    "-".to_string()
                } else {
                    format!("{:.3}", r.share(class))
                };
                write!(s, " {:>12}", v).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::chain;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn environment_defaults() {
        let chain = ExperimentConfig::defaults(EnvName::Chain);
        assert_eq!(chain.batch_sizes, vec![8, 16, 24, 32, 40, 48, 56]);
        assert_eq!((chain.n, chain.l, chain.replicates), (8, 3, 100));
        let rfl = ExperimentConfig::defaults(EnvName::Rfl);
        assert_eq!(rfl.batch_sizes.last(), Some(&135));
        assert_eq!((rfl.n, rfl.l, rfl.replicates), (15, 10, 50));
    }

    #[test]
    fn env_key_picks_defaults_regardless_of_order() {
        let c =
            ExperimentConfig::from_pairs(&pairs(&[("replicates", "3"), ("env", "rfl")])).unwrap();
        assert_eq!(c.n, 15);
        assert_eq!(c.replicates, 3);
    }

    #[test]
    fn indivisible_batch_size_is_rejected() {
        let err = ExperimentConfig::from_pairs(&pairs(&[("batch_sizes", "8,12")])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(ExperimentConfig::from_pairs(&pairs(&[("colour", "red")])).is_err());
        assert!(parse_config("colour = 1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::defaults(EnvName::Ring);
        c.selectors = vec![Selector::EvcCvar, Selector::Trivial];
        c.external_policies = vec![PathBuf::from("a/b.json")];
        c.env.slip_prob = 0.2;
        c.gamma_ev = 0.95;
        c.gammas = vec![0.5, 0.95];
        let back = ExperimentConfig::from_pairs(&parse_config(&c.to_toml()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn delta_u_of_trivial_is_zero() {
        let mdp = chain();
        let p = Policy::deterministic(2, vec![1, 0, 0, 0, 0], "").unwrap();
        assert_eq!(delta_u(&p, &p, &mdp, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn optimal_delta_u_is_bounded() {
        let mdp = chain();
        let ctx = DeltaUContext::new(&mdp, 0.9).unwrap();
        let worst = Policy::deterministic(2, vec![1; 5], "").unwrap();
        let d = ctx.delta_u(ctx.optimal(), &worst).unwrap();
        assert!((0.0..=1.0).contains(&d), "{d}");
    }

    #[test]
    fn zero_optimum_cannot_normalize() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], vec![false]).unwrap();
        assert!(matches!(
            DeltaUContext::new(&mdp, 0.9),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn trivial_selector_has_zero_statistics() {
        let mut c = ExperimentConfig::defaults(EnvName::Chain);
        c.batch_sizes = vec![8, 16];
        c.replicates = 3;
        c.selectors = vec![Selector::Trivial];
        let out = run_experiment(&c).unwrap();
        assert_eq!(out.rows.len(), 3);
        for r in &out.rows {
            assert_eq!(
                (r.max, r.mean, r.median, r.min),
                (Some(0.0), Some(0.0), Some(0.0), Some(0.0))
            );
            assert_eq!(r.share(TRIVIAL_TAG), 1.0);
        }
    }
}
