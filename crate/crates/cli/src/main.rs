//! Command-line runner for the highway fast-charging market simulator.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chargesim::market::StationSpec;
use chargesim::pricing::StationPolicy;
use chargesim::scenario::{
    builtin, builtin_names, evaluate, export_outcome, export_training, freeze_policies,
    load_policies, run_ablation, save_policies, train, Scenario,
};

#[derive(Parser)]
#[command(
    name = "chargesim",
    about = "Simulate a competitive EV fast-charging market with learning price setters",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List built-in scenarios, or export them as editable TOML files.
    Scenarios {
        /// Write one <name>.toml per built-in scenario into this directory.
        #[arg(long, value_name = "DIR")]
        export: Option<PathBuf>,
    },
    /// Train the learning stations of a scenario in day episodes.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Maximum training days (stops earlier once daily losses settle).
        #[arg(long, default_value_t = 10)]
        days: u32,
        /// Where to write the trained policy snapshot.
        #[arg(long, value_name = "FILE")]
        policies_out: Option<PathBuf>,
    },
    /// Evaluate a scenario over full days and export the results.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluation days.
        #[arg(long, default_value_t = 5)]
        days: u32,
        /// Trained policy snapshot for the scenario's learning stations.
        #[arg(long, value_name = "FILE")]
        policies: Option<PathBuf>,
        /// Evaluate learning stations untrained (exploratory prices frozen
        /// to their initial value function) instead of requiring --policies.
        #[arg(long)]
        allow_untrained: bool,
        /// Keep per-minute occupancy and quote logs (larger outputs).
        #[arg(long)]
        logs: bool,
    },
    /// Train and evaluate the co-located market once per observation scope,
    /// over several seeds, and compare the learning station's revenue.
    Ablation {
        /// Training days per run.
        #[arg(long, default_value_t = 10)]
        train_days: u32,
        /// Evaluation days per run.
        #[arg(long, default_value_t = 3)]
        eval_days: u32,
        /// Number of seeds (each scope sees the same seeds).
        #[arg(long, default_value_t = 5)]
        seeds: u32,
        /// Base seed the per-run seeds derive from.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the arrival rate (EVs per hour) in every run.
        #[arg(long)]
        rate: Option<f64>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Stress-test the station-selection solver on random markets.
    Certify {
        /// Number of random instances.
        #[arg(long, default_value_t = 1000)]
        instances: u64,
        /// Largest number of EVs per instance.
        #[arg(long, default_value_t = 8)]
        max_evs: usize,
        /// Largest number of stations per instance.
        #[arg(long, default_value_t = 3)]
        max_stations: usize,
        /// Cross-check instances up to this many EVs against brute force.
        #[arg(long, default_value_t = 6)]
        exhaustive_max_evs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Built-in scenario name or path to a scenario TOML file.
    #[arg(long, value_name = "NAME|FILE")]
    scenario: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (defaults to $CHARGESIM_OUT or ./out).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("CHARGESIM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_scenario(name_or_path: &str) -> anyhow::Result<Scenario> {
    if let Some(scenario) = builtin(name_or_path) {
        return Ok(scenario);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return Scenario::load(path)
            .with_context(|| format!("loading scenario file {}", path.display()));
    }
    bail!(
        "unknown scenario '{name_or_path}': not a built-in ({}) and no such file",
        builtin_names().join(", ")
    );
}

fn has_learners(policies: &[(StationSpec, StationPolicy)]) -> bool {
    policies.iter().any(|(_, p)| matches!(p, StationPolicy::Learned(_)))
}

fn main() {
    if let Err(err) = real_main() {
        let payload = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn real_main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Scenarios { export } => {
            if let Some(dir) = export {
                std::fs::create_dir_all(&dir)?;
                for name in builtin_names() {
                    let scenario = builtin(name).expect("built-in exists");
                    let path = dir.join(format!("{name}.toml"));
                    scenario.save(&path)?;
                    println!("wrote {}", path.display());
                }
            } else {
                for name in builtin_names() {
                    println!("{name}");
                }
            }
            Ok(())
        }
        Command::Train { common, days, policies_out } => {
            let scenario = load_scenario(&common.scenario)?;
            let dir = out_dir(common.out);
            std::fs::create_dir_all(&dir)?;
            let outcome = train(&scenario, days, common.seed)
                .with_context(|| format!("training scenario '{}'", scenario.name))?;
            export_training(&dir, &outcome)?;
            let policy_path = policies_out.unwrap_or_else(|| dir.join("policies.json"));
            save_policies(&policy_path, &outcome.policies)?;
            let summary = serde_json::json!({
                "scenario": scenario.name,
                "seed": common.seed,
                "days_trained": outcome.days_trained,
                "converged": outcome.converged,
                "policies": policy_path.display().to_string(),
            });
            std::fs::write(
                dir.join("train_summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!("{summary}");
            Ok(())
        }
        Command::Run { common, days, policies, allow_untrained, logs } => {
            let scenario = load_scenario(&common.scenario)?;
            let dir = out_dir(common.out);
            std::fs::create_dir_all(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let mut bound = match &policies {
                Some(path) => load_policies(&scenario, path, &mut rng)
                    .with_context(|| format!("loading policies from {}", path.display()))?,
                None => {
                    let fresh = scenario.make_policies(&mut rng)?;
                    if has_learners(&fresh) && !allow_untrained {
                        bail!(
                            "scenario '{}' has learning stations; pass --policies FILE \
                             (from `chargesim train`) or --allow-untrained",
                            scenario.name
                        );
                    }
                    fresh
                }
            };
            freeze_policies(&mut bound);
            let outcome = evaluate(&scenario, bound, days, common.seed, logs)
                .with_context(|| format!("evaluating scenario '{}'", scenario.name))?;
            export_outcome(&dir, &outcome)?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
            Ok(())
        }
        Command::Ablation { train_days, eval_days, seeds, seed, rate, out } => {
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir)?;
            let results = run_ablation(train_days, eval_days, seed, seeds, &move |s| {
                if let Some(r) = rate {
                    s.config.arrival_rate_per_hour = r;
                }
            })?;
            std::fs::write(
                dir.join("ablation.json"),
                serde_json::to_string_pretty(&results)?,
            )?;
            for r in &results {
                println!(
                    "{:<14} median {:>10.2} EUR  per-seed {:?}",
                    r.label,
                    r.median_net_revenue,
                    r.per_seed_net_revenue
                        .iter()
                        .map(|v| (v * 100.0).round() / 100.0)
                        .collect::<Vec<_>>()
                );
            }
            Ok(())
        }
        Command::Certify { instances, max_evs, max_stations, exhaustive_max_evs, seed } => {
            let report = chargesim::cssg::certify_sweep(
                instances,
                max_evs,
                max_stations,
                exhaustive_max_evs,
                seed,
            )?;
            println!("{report:#?}");
            if !report.passed() {
                bail!("stability sweep failed: {report:?}");
            }
            Ok(())
        }
    }
}
