//! Library side of the `evc` command: argument definitions and dispatch,
//! so the commands can also be driven in-process.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use evc_core::batch::{collect_batch, TransitionBatch};
use evc_core::envs::{generate_map, EnvName};
use evc_core::harness::{parse_config, run_experiment, ExperimentConfig, CONFIG_KEYS};
use evc_core::mdp::{policy_iteration, TabularMdp};
use evc_core::plot;
use evc_core::posterior::{counts_from_batch, DirichletPosterior};
use evc_core::risk::RiskMeasure;
use evc_core::selection::{evc, EvcSettings, TRIVIAL_TAG};

#[derive(Debug, Parser)]
#[command(
    name = "evc",
    version,
    about = "Risk-aware offline policy selection for finite MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect `m` trajectories of `n` steps with uniformly random actions.
    Collect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of trajectories.
        #[arg(long)]
        m: usize,
        /// Output batch CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the maximum-likelihood model of a batch with `gamma_ev`.
    SolveTrivial {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        batch: PathBuf,
        /// Output policy JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate candidates from a batch and pick the best by VaR or CVaR.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, default_value = "var")]
        measure: RiskMeasure,
        /// Receives report.json, report.csv and winner.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a sweep over batch sizes and replicates.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        /// Receives metrics.csv, cells.csv, summary.txt and config.toml.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render SVG charts from a metrics CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the generated Random Frozen Lake map as a text grid.
    Map {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

macro_rules! config_args {
    ($($field:ident),* $(,)?) => {
        /// Experiment settings: an optional flat TOML file plus per-key
        /// overrides. Lists are comma separated.
        #[derive(Debug, Args)]
        pub struct ConfigArgs {
            /// Flat TOML config file.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long)]
                $field: Option<String>,
            )*
        }

        impl ConfigArgs {
            fn overrides(&self) -> Vec<(String, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field).to_string(), v.clone()));
                    }
                )*
                out
            }
        }
    };
}

config_args!(
    env,
    grid_size,
    slip_prob,
    hole_prob,
    map_seed,
    reward_seed,
    batch_sizes,
    n,
    replicates,
    q,
    alpha,
    eps_rel,
    k,
    max_samples,
    gammas,
    l,
    gamma_ev,
    external_policies,
    selectors,
    seed,
);

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                parse_config(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => Vec::new(),
        };
        pairs.extend(self.overrides());
        debug_assert!(pairs.iter().all(|(k, _)| CONFIG_KEYS.contains(&k.as_str())));
        Ok(ExperimentConfig::from_pairs(&pairs)?)
    }
}

fn read_batch(
    path: &Path,
    env: &TabularMdp,
    config: &ExperimentConfig,
) -> anyhow::Result<TransitionBatch> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let batch = TransitionBatch::read_csv(
        file,
        env.n_states(),
        env.n_actions(),
        config.env.name.as_str(),
        config.seed,
    )
    .with_context(|| format!("reading batch {}", path.display()))?;
    Ok(batch)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(Cli::try_parse_from(args)?)
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Collect { config, m, out } => {
            let config = config.resolve()?;
            let env = config.env.build()?;
            let batch = collect_batch(&env, config.env.name.as_str(), m, config.n, config.seed)?;
            batch.write_csv(create(&out)?)?;
            println!("wrote {} transitions to {}", batch.len(), out.display());
        }
        Command::SolveTrivial { config, batch, out } => {
            let config = config.resolve()?;
            let env = config.env.build()?;
            let batch = read_batch(&batch, &env, &config)?;
            let counts = counts_from_batch(&batch, env.n_states(), env.n_actions())?;
            let posterior = DirichletPosterior::for_environment(counts, &env)?;
            let policy = policy_iteration(&posterior.trivial_model(), config.gamma_ev)?
                .with_provenance(TRIVIAL_TAG);
            policy.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Select {
            config,
            batch,
            measure,
            out_dir,
        } => {
            let config = config.resolve()?;
            let env = config.env.build()?;
            let batch = read_batch(&batch, &env, &config)?;
            let settings = EvcSettings {
                gammas: config.gammas.clone(),
                l: config.l,
                gamma_ev: config.gamma_ev,
                spec: config.risk.with_measure(measure),
            };
            let report = evc(
                &batch,
                &env,
                &settings,
                &config.load_externals()?,
                config.seed,
            )?;
            fs::create_dir_all(&out_dir)?;
            write_text(&out_dir.join("report.json"), &report.to_json())?;
            report.write_csv(create(&out_dir.join("report.csv"))?)?;
            report.winner.save(out_dir.join("winner.json"))?;
            println!(
                "winner {} ({} candidates, {} models sampled)",
                report.winner.provenance(),
                report.estimates.len(),
                report.total_models_sampled
            );
            for i in report.non_converged() {
                eprintln!(
                    "warning: estimate for {} stopped at the sample cap",
                    report.estimates[i].0.provenance()
                );
            }
        }
        Command::Experiment { config, out_dir } => {
            let config = config.resolve()?;
            let outcome = run_experiment(&config)?;
            fs::create_dir_all(&out_dir)?;
            outcome.write_metrics_csv(create(&out_dir.join("metrics.csv"))?)?;
            outcome.write_cells_csv(create(&out_dir.join("cells.csv"))?)?;
            let summary = outcome.summary();
            write_text(&out_dir.join("summary.txt"), &summary)?;
            write_text(&out_dir.join("config.toml"), &config.to_toml())?;
            print!("{summary}");
        }
        Command::Plot { metrics, out_dir } => {
            let file =
                File::open(&metrics).with_context(|| format!("opening {}", metrics.display()))?;
            let records = plot::read_metrics(file)?;
            if records.is_empty() {
                bail!("{} has no rows", metrics.display());
            }
            fs::create_dir_all(&out_dir)?;
            write_text(&out_dir.join("delta_u.svg"), &plot::delta_u_chart(&records))?;
            for sel in plot::selectors(&records) {
                write_text(
                    &out_dir.join(format!("selection_{sel}.svg")),
                    &plot::selection_chart(&records, &sel),
                )?;
            }
            println!("wrote charts to {}", out_dir.display());
        }
        Command::Map { config, out } => {
            let config = config.resolve()?;
            if config.env.name != EnvName::Rfl {
                bail!("maps exist only for the rfl environment");
            }
            let map = generate_map(&config.env)?;
            write_text(&out, &map.to_string())?;
            print!("{map}");
        }
    }
    Ok(())
}
