//! Scenario descriptions and the training / evaluation drivers built on them.
//!
//! A [`Scenario`] is a serializable market description: the shared
//! [`SimConfig`] plus one [`StationSetup`] per station. Training runs the
//! market in day episodes, carrying each learning policy (its value function,
//! replay memory, and exploration schedule) across days until its daily mean
//! loss settles. Evaluation replays day episodes with frozen policies and
//! aggregates the results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::market::{
    ChargeRecord, OccupancyRow, OfferRow, SimConfig, StationSpec, World, MINUTES_PER_DAY,
};
use crate::pricing::{
    ApproxKind, InfoSet, LearnedPolicy, QLearner, QLearnerConfig, SavedPolicy, StationPolicy,
};

/// Current on-disk layout version for scenario and policy files.
pub const SCHEMA_VERSION: u32 = 1;

/// How one station sets its prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyBinding {
    /// Posts the same public price forever.
    Fixed { price: f64 },
    /// Posts a uniformly random grid price at every refresh.
    RandomPublic,
    /// Undercuts the cheapest rival by `cut`, never below the market floor.
    Bertrand { cut: f64 },
    /// Q-learning over the given observation scope.
    Learn {
        info_set: InfoSet,
        #[serde(default)]
        learner: QLearnerConfig,
    },
}

/// One station: its physical description and pricing behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSetup {
    pub id: u32,
    pub location_km: f64,
    pub slots: u32,
    pub update_period_minutes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_price: Option<f64>,
    pub policy: PolicyBinding,
}

impl StationSetup {
    pub fn spec(&self) -> StationSpec {
        StationSpec {
            id: self.id,
            location_km: self.location_km,
            slots: self.slots,
            update_period_minutes: self.update_period_minutes,
            initial_price: self.initial_price,
        }
    }
}

/// A complete market description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub config: SimConfig,
    pub stations: Vec<StationSetup>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = fs::read_to_string(path)?;
        let scenario: Scenario = toml::from_str(&text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text =
            toml::to_string_pretty(self).map_err(|e| SimError::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SimError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.is_empty() {
            return Err(SimError::Config("scenario name must not be empty".into()));
        }
        self.config.validate()?;
        if self.stations.is_empty() {
            return Err(SimError::Config("scenario needs at least one station".into()));
        }
        // Every entrant must be able to reach some station from the entrance,
        // even with the weakest starting charge, or it could strand.
        let weakest = self.config.ev.initial_soc_min;
        let range = self.config.ev.travel_range_km;
        let reachable_by_weakest = self.stations.iter().any(|s| {
            crate::choice::reachable(
                crate::choice::esoc(weakest, s.location_km, range),
                self.config.reach_margin,
            )
        });
        if !reachable_by_weakest {
            return Err(SimError::Config(format!(
                "an entrant at the minimum starting charge {weakest} cannot reach any station"
            )));
        }
        // After a full charge at any station, the exit must be in range.
        for s in &self.stations {
            let exit_soc =
                self.config.ev.max_soc - (self.config.highway_km - s.location_km) / range;
            if exit_soc < 0.0 {
                return Err(SimError::Config(format!(
                    "a driver charged at station {} (km {}) cannot reach the exit",
                    s.id, s.location_km
                )));
            }
        }
        Ok(())
    }

    /// Instantiate runtime policies for every station.
    pub fn make_policies(
        &self,
        rng: &mut impl Rng,
    ) -> Result<Vec<(StationSpec, StationPolicy)>> {
        let n_stations = self.stations.len();
        let grid = self.config.action_space()?;
        self.stations
            .iter()
            .map(|s| {
                let policy = match &s.policy {
                    PolicyBinding::Fixed { price } => StationPolicy::Fixed { price: *price },
                    PolicyBinding::RandomPublic => StationPolicy::RandomPublic,
                    PolicyBinding::Bertrand { cut } => StationPolicy::Bertrand { cut: *cut },
                    PolicyBinding::Learn { info_set, learner } => {
                        let input_dim = info_set.dim(n_stations);
                        let q = QLearner::new(learner.clone(), input_dim, grid.len(), rng)?;
                        StationPolicy::Learned(Box::new(LearnedPolicy::new(
                            q,
                            *info_set,
                            grid.clone(),
                        )))
                    }
                };
                Ok((s.spec(), policy))
            })
            .collect()
    }
}

/// Per-day training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayStats {
    pub day: u32,
    /// Daily mean training loss per learning station (absent if it never
    /// trained that day).
    pub loss: BTreeMap<u32, f64>,
    pub net_revenue_eur: BTreeMap<u32, f64>,
    pub charged: BTreeMap<u32, u64>,
    pub arrivals: u64,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub policies: Vec<(StationSpec, StationPolicy)>,
    pub days_trained: u32,
    /// Whether every learning station's daily loss settled before the cap.
    pub converged: bool,
    pub trace: Vec<DayStats>,
}

/// Deterministic stream of per-day world seeds derived from one base seed.
fn day_seeds(base: u64, days: u32) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..days).map(|_| rng.gen()).collect()
}

/// Run one market day and hand the policies back with the day's statistics.
fn run_day(
    scenario: &Scenario,
    policies: Vec<(StationSpec, StationPolicy)>,
    seed: u64,
    collect_logs: bool,
) -> Result<(Vec<(StationSpec, StationPolicy)>, World)> {
    let mut world = World::new(scenario.config.clone(), policies, seed)?;
    world.collect_logs = collect_logs;
    world.run(MINUTES_PER_DAY)?;
    // Take the policies back out (they carry learning state across days) but
    // leave the stations in place so the day's books stay readable.
    let out = world
        .stations
        .iter_mut()
        .map(|st| {
            let policy = std::mem::replace(&mut st.policy, StationPolicy::RandomPublic);
            (st.spec.clone(), policy)
        })
        .collect();
    Ok((out, world))
}

/// Train every learning station in `scenario` for up to `max_days` day
/// episodes, stopping early once each station's daily mean loss moves by at
/// most its configured threshold between consecutive days.
pub fn train(scenario: &Scenario, max_days: u32, seed: u64) -> Result<TrainOutcome> {
    scenario.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut policies = scenario.make_policies(&mut init_rng)?;
    let has_learners =
        policies.iter().any(|(_, p)| matches!(p, StationPolicy::Learned(_)));
    if !has_learners || max_days == 0 {
        return Ok(TrainOutcome { policies, days_trained: 0, converged: true, trace: Vec::new() });
    }
    let seeds = day_seeds(seed, max_days);
    let mut trace: Vec<DayStats> = Vec::new();
    let mut prev_loss: BTreeMap<u32, f64> = BTreeMap::new();
    let mut converged = false;
    let mut days_trained = 0;
    for (day, &day_seed) in seeds.iter().enumerate() {
        let day = day as u32;
        for (_, policy) in policies.iter_mut() {
            if let Some(p) = policy.learned_mut() {
                p.learner.begin_day(day);
            }
        }
        let (returned, world) = run_day(scenario, policies, day_seed, false)?;
        policies = returned;
        days_trained = day + 1;

        let mut stats = DayStats {
            day,
            loss: BTreeMap::new(),
            net_revenue_eur: BTreeMap::new(),
            charged: BTreeMap::new(),
            arrivals: world.arrivals_total,
        };
        let mut all_settled = true;
        for (spec, policy) in policies.iter_mut() {
            stats.net_revenue_eur.insert(
                spec.id,
                world.station(spec.id).map_or(0.0, |s| s.net_revenue_eur),
            );
            stats
                .charged
                .insert(spec.id, world.station(spec.id).map_or(0, |s| s.charged_count));
            let Some(p) = policy.learned_mut() else { continue };
            p.clear_offers();
            let lambda = p.learner.config.stop_lambda;
            match p.learner.take_day_loss() {
                Some(loss) => {
                    stats.loss.insert(spec.id, loss);
                    let settled = prev_loss
                        .get(&spec.id)
                        .is_some_and(|prev| (loss - prev).abs() <= lambda);
                    if !settled {
                        all_settled = false;
                    }
                    prev_loss.insert(spec.id, loss);
                }
                None => {
                    all_settled = false;
                    prev_loss.remove(&spec.id);
                }
            }
        }
        trace.push(stats);
        if all_settled {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome { policies, days_trained, converged, trace })
}

/// Freeze every learning policy: greedy prices, no further updates.
pub fn freeze_policies(policies: &mut [(StationSpec, StationPolicy)]) {
    for (_, policy) in policies.iter_mut() {
        if let Some(p) = policy.learned_mut() {
            p.training = false;
            p.learner.freeze();
            p.clear_offers();
        }
    }
}

/// Summary of one station over an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSummary {
    pub id: u32,
    pub gross_revenue_eur: f64,
    pub net_revenue_eur: f64,
    pub charged_count: u64,
    /// Unweighted mean price across its completed charges.
    pub mean_price_paid: Option<f64>,
    pub mean_waited_minutes: Option<f64>,
}

/// Aggregated results of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub days: u32,
    pub seed: u64,
    pub arrivals: u64,
    pub uncharged_exits: u64,
    pub stations: Vec<StationSummary>,
    /// Median over drivers of their total trip cost (electricity plus
    /// waiting, as a negative utility in EUR).
    pub median_driver_utility_eur: Option<f64>,
    pub median_waited_minutes: Option<f64>,
    /// Largest revision count any selection game needed.
    pub max_revisions_seen: u64,
    pub selection_games: u64,
}

/// Full evaluation output: the summary plus every underlying row, with
/// minutes and day stamps shifted onto one continuous multi-day clock.
#[derive(Debug)]
pub struct EvalOutcome {
    pub report: RunReport,
    pub records: Vec<ChargeRecord>,
    pub offer_log: Vec<OfferRow>,
    pub occupancy_log: Vec<OccupancyRow>,
    pub day_stats: Vec<DayStats>,
    pub policies: Vec<(StationSpec, StationPolicy)>,
}

/// Replay `days` day episodes with the given policies (typically frozen) and
/// aggregate the results.
pub fn evaluate(
    scenario: &Scenario,
    mut policies: Vec<(StationSpec, StationPolicy)>,
    days: u32,
    seed: u64,
    collect_logs: bool,
) -> Result<EvalOutcome> {
    scenario.validate()?;
    if days == 0 {
        return Err(SimError::Config("evaluation needs at least one day".into()));
    }
    // Offset the seed stream so evaluation days never reuse training days.
    let seeds = day_seeds(seed ^ 0xC2B2_AE3D_27D4_EB4F, days);
    let mut records: Vec<ChargeRecord> = Vec::new();
    let mut offer_log: Vec<OfferRow> = Vec::new();
    let mut occupancy_log: Vec<OccupancyRow> = Vec::new();
    let mut day_stats: Vec<DayStats> = Vec::new();
    let mut arrivals = 0;
    let mut uncharged_exits = 0;
    let mut max_revisions_seen = 0;
    let mut selection_games = 0;
    let mut totals: BTreeMap<u32, StationSummary> = policies
        .iter()
        .map(|(spec, _)| {
            (
                spec.id,
                StationSummary {
                    id: spec.id,
                    gross_revenue_eur: 0.0,
                    net_revenue_eur: 0.0,
                    charged_count: 0,
                    mean_price_paid: None,
                    mean_waited_minutes: None,
                },
            )
        })
        .collect();

    for (day, &day_seed) in seeds.iter().enumerate() {
        let day = day as u32;
        let (returned, world) = run_day(scenario, policies, day_seed, collect_logs)?;
        policies = returned;
        let minute_offset = day as u64 * MINUTES_PER_DAY;
        records.extend(world.records.iter().cloned().map(|mut r| {
            r.arrival_minute += minute_offset;
            r.charge_start_minute += minute_offset;
            r.charge_end_minute += minute_offset;
            r
        }));
        offer_log.extend(world.offer_log.iter().cloned().map(|mut r| {
            r.day += day as u64;
            r
        }));
        occupancy_log.extend(world.occupancy_log.iter().cloned().map(|mut r| {
            r.day += day as u64;
            r
        }));
        let mut stats = DayStats {
            day,
            loss: BTreeMap::new(),
            net_revenue_eur: BTreeMap::new(),
            charged: BTreeMap::new(),
            arrivals: world.arrivals_total,
        };
        for (spec, policy) in policies.iter_mut() {
            if let Some(p) = policy.learned_mut() {
                p.clear_offers();
            }
            let summary = totals.get_mut(&spec.id).expect("station known");
            if let Some(st) = world.station(spec.id) {
                summary.gross_revenue_eur += st.gross_revenue_eur;
                summary.net_revenue_eur += st.net_revenue_eur;
                summary.charged_count += st.charged_count;
                stats.net_revenue_eur.insert(spec.id, st.net_revenue_eur);
                stats.charged.insert(spec.id, st.charged_count);
            }
        }
        arrivals += world.arrivals_total;
        uncharged_exits += world.uncharged_exits;
        max_revisions_seen = max_revisions_seen.max(world.max_revisions_seen);
        selection_games += world.solves;
        day_stats.push(stats);
    }

    for summary in totals.values_mut() {
        let station_records: Vec<&ChargeRecord> =
            records.iter().filter(|r| r.station == summary.id).collect();
        if !station_records.is_empty() {
            let n = station_records.len() as f64;
            summary.mean_price_paid =
                Some(station_records.iter().map(|r| r.price_eur_kwh).sum::<f64>() / n);
            summary.mean_waited_minutes =
                Some(station_records.iter().map(|r| r.waited_minutes as f64).sum::<f64>() / n);
        }
    }

    let mut utilities: Vec<f64> = records
        .iter()
        .map(|r| r.electricity_utility_eur + r.waiting_utility_eur)
        .collect();
    let mut waits: Vec<f64> = records.iter().map(|r| r.waited_minutes as f64).collect();
    let report = RunReport {
        scenario: scenario.name.clone(),
        days,
        seed,
        arrivals,
        uncharged_exits,
        stations: totals.into_values().collect(),
        median_driver_utility_eur: median_in_place(&mut utilities),
        median_waited_minutes: median_in_place(&mut waits),
        max_revisions_seen,
        selection_games,
    };
    Ok(EvalOutcome { report, records, offer_log, occupancy_log, day_stats, policies })
}

/// Median of the values, reordering the slice. `None` when empty.
pub fn median_in_place(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in medians"));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Mean personal price a station offered to drivers below / at-or-above an
/// effective-charge threshold, from the quote log.
pub fn personal_offer_split(
    offer_log: &[OfferRow],
    station: u32,
    esoc_threshold: f64,
) -> (Option<f64>, Option<f64>) {
    let mut below = (0.0, 0u64);
    let mut above = (0.0, 0u64);
    for row in offer_log {
        if row.station != station || row.ev.is_none() {
            continue;
        }
        let Some(esoc) = row.esoc else { continue };
        let bucket = if esoc < esoc_threshold { &mut below } else { &mut above };
        bucket.0 += row.price_eur_kwh;
        bucket.1 += 1;
    }
    let mean = |(sum, n): (f64, u64)| if n == 0 { None } else { Some(sum / n as f64) };
    (mean(below), mean(above))
}

/// Public prices a station posted, in posting order, from the quote log.
pub fn posted_public_prices(offer_log: &[OfferRow], station: u32) -> Vec<f64> {
    offer_log
        .iter()
        .filter(|r| r.station == station && r.ev.is_none())
        .map(|r| r.price_eur_kwh)
        .collect()
}

/// Saved policies for a scenario's learning stations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub schema_version: u32,
    pub policies: BTreeMap<u32, SavedPolicy>,
}

/// Snapshot every learned policy to a JSON file.
pub fn save_policies(path: &Path, policies: &[(StationSpec, StationPolicy)]) -> Result<()> {
    let mut saved = BTreeMap::new();
    for (spec, policy) in policies {
        if let Some(p) = policy.learned() {
            saved.insert(spec.id, p.to_saved());
        }
    }
    let file = PolicyFile { schema_version: SCHEMA_VERSION, policies: saved };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Rebuild a scenario's policies, loading each learning station's value
/// function from the snapshot file (frozen) and instantiating the rest fresh.
pub fn load_policies(
    scenario: &Scenario,
    path: &Path,
    rng: &mut impl Rng,
) -> Result<Vec<(StationSpec, StationPolicy)>> {
    let text = fs::read_to_string(path)?;
    let file: PolicyFile = serde_json::from_str(&text)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(SimError::Config(format!(
            "unsupported policy file schema_version {} (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    scenario
        .stations
        .iter()
        .map(|s| {
            let policy = match &s.policy {
                PolicyBinding::Fixed { price } => StationPolicy::Fixed { price: *price },
                PolicyBinding::RandomPublic => StationPolicy::RandomPublic,
                PolicyBinding::Bertrand { cut } => StationPolicy::Bertrand { cut: *cut },
                PolicyBinding::Learn { learner, .. } => {
                    let saved = file.policies.get(&s.id).cloned().ok_or_else(|| {
                        SimError::Config(format!(
                            "policy file has no entry for learning station {}",
                            s.id
                        ))
                    })?;
                    StationPolicy::Learned(Box::new(LearnedPolicy::from_saved(
                        saved,
                        learner.clone(),
                        rng,
                    )?))
                }
            };
            Ok((s.spec(), policy))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Canonical scenarios.
// ---------------------------------------------------------------------------

fn station(
    id: u32,
    location_km: f64,
    update_period_minutes: u64,
    initial_price: Option<f64>,
    policy: PolicyBinding,
) -> StationSetup {
    StationSetup { id, location_km, slots: 4, update_period_minutes, initial_price, policy }
}

/// Duopoly at the midpoint undercutting each other from the cap down.
pub fn duopoly_bertrand() -> Scenario {
    let mut config = SimConfig::default();
    config.ev.initial_soc_min = 0.3125;
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "duopoly_bertrand".into(),
        config,
        stations: vec![
            station(1, 250.0, 30, Some(0.55), PolicyBinding::Bertrand { cut: 0.01 }),
            station(2, 250.0, 30, Some(0.55), PolicyBinding::Bertrand { cut: 0.01 }),
        ],
    }
}

fn learn_duopoly_binding(approx: ApproxKind) -> PolicyBinding {
    PolicyBinding::Learn {
        info_set: InfoSet::prices_and_competitor_slots(),
        learner: QLearnerConfig { approx, ..QLearnerConfig::default() },
    }
}

/// Learning duopoly under price-only drivers: waiting costs nothing, so
/// undercutting is the only lever and prices collapse to the floor.
///
/// Uses the tabular value store with one bin per price level. The collapsed
/// market pays exactly zero everywhere, and a fitted network's residual noise
/// around zero leaves its greedy price arbitrary; the table stores exact
/// zeros and greedy ties resolve to the cheapest level.
pub fn duopoly_learning_price_only() -> Scenario {
    let mut config = SimConfig::default();
    config.ev.initial_soc_min = 0.3125;
    config.utility = crate::choice::UtilityParams::price_only();
    let approx = ApproxKind::Table { bins: 21 };
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "duopoly_learning_price_only".into(),
        config,
        stations: vec![
            station(1, 250.0, 1, None, learn_duopoly_binding(approx.clone())),
            station(2, 250.0, 1, None, learn_duopoly_binding(approx)),
        ],
    }
}

/// Learning duopoly under waiting-averse drivers: queued demand divides, so
/// both stations can hold prices high.
pub fn duopoly_learning_waiting() -> Scenario {
    let mut config = SimConfig::default();
    config.ev.initial_soc_min = 0.3125;
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "duopoly_learning_waiting".into(),
        config,
        stations: vec![
            station(1, 250.0, 1, None, learn_duopoly_binding(ApproxKind::Net)),
            station(2, 250.0, 1, None, learn_duopoly_binding(ApproxKind::Net)),
        ],
    }
}

/// Three-station line: a random public pricer, a personalized learner with
/// the full observation, and an undercutting follower.
pub fn oligopoly_mixed() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "oligopoly_mixed".into(),
        config: SimConfig::default(),
        stations: vec![
            station(1, 150.0, 30, Some(0.45), PolicyBinding::RandomPublic),
            station(
                2,
                200.0,
                1,
                None,
                PolicyBinding::Learn {
                    info_set: InfoSet::full(),
                    learner: QLearnerConfig::default(),
                },
            ),
            station(3, 400.0, 30, Some(0.55), PolicyBinding::Bertrand { cut: 0.01 }),
        ],
    }
}

/// Ablation geometry: a learner with the given observation scope co-located
/// with a fixed-price rival. Both stations have the small slot count used
/// throughout the experiments, so queues at the rival are a real force and
/// slot-aware scopes can read them.
///
/// The learner profile is tuned for short observation-scope comparisons: a
/// discretized value table (three bins per observation dimension) holds exact
/// per-cell estimates so scopes differ only in what they condition on, while
/// the optimistic initial value sits above the largest single-driver margin,
/// which forces every visited cell to price out its whole action grid before
/// settling — small random-action rates alone never visit the regimes where
/// priced-up offers win. Arrivals run a little under the two stations'
/// combined service rate so queues build in bursts but drain again.
pub fn colocated_ablation(info_set: InfoSet) -> Scenario {
    let mut config = SimConfig::default();
    config.ev.initial_soc_min = 0.3125;
    config.arrival_rate_per_hour = 20.0;
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "colocated_ablation".into(),
        config,
        stations: vec![
            station(
                1,
                250.0,
                4,
                None,
                PolicyBinding::Learn {
                    info_set,
                    learner: QLearnerConfig {
                        approx: ApproxKind::Table { bins: 3 },
                        alpha: 0.5,
                        epsilon0: 0.05,
                        epsilon_decay: 0.9,
                        replay_capacity: 2000,
                        batch_size: 64,
                        optimistic_init: 150.0,
                        ..QLearnerConfig::default()
                    },
                },
            ),
            station(2, 250.0, 4, Some(0.52), PolicyBinding::Fixed { price: 0.52 }),
        ],
    }
}

/// Split geometry: a personalized learner seeing driver charge states, with
/// the only alternative far downstream. Drivers short on charge are captive.
pub fn split_market_personalized() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "split_market_personalized".into(),
        config: SimConfig::default(),
        stations: vec![
            station(
                1,
                200.0,
                1,
                None,
                PolicyBinding::Learn {
                    info_set: InfoSet::prices_and_esoc(),
                    learner: QLearnerConfig::default(),
                },
            ),
            station(2, 400.0, 30, Some(0.52), PolicyBinding::Fixed { price: 0.52 }),
        ],
    }
}

/// Look up a built-in scenario by name.
pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "duopoly_bertrand" => Some(duopoly_bertrand()),
        "duopoly_learning_price_only" => Some(duopoly_learning_price_only()),
        "duopoly_learning_waiting" => Some(duopoly_learning_waiting()),
        "oligopoly_mixed" => Some(oligopoly_mixed()),
        "colocated_ablation" => Some(colocated_ablation(InfoSet::prices_only())),
        "split_market_personalized" => Some(split_market_personalized()),
        _ => None,
    }
}

pub fn builtin_names() -> &'static [&'static str] {
    &[
        "duopoly_bertrand",
        "duopoly_learning_price_only",
        "duopoly_learning_waiting",
        "oligopoly_mixed",
        "colocated_ablation",
        "split_market_personalized",
    ]
}

// ---------------------------------------------------------------------------
// Observation-scope ablation.
// ---------------------------------------------------------------------------

/// One observation scope in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationVariant {
    pub label: &'static str,
    pub info_set: InfoSet,
}

/// The four canonical observation scopes, narrowest first.
pub fn ablation_variants() -> [AblationVariant; 4] {
    [
        AblationVariant { label: "prices_only", info_set: InfoSet::prices_only() },
        AblationVariant { label: "prices_esoc", info_set: InfoSet::prices_and_esoc() },
        AblationVariant { label: "prices_slots", info_set: InfoSet::prices_and_slots() },
        AblationVariant { label: "full", info_set: InfoSet::full() },
    ]
}

/// Ablation outcome for one observation scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    /// Learning station's net revenue over the evaluation days, one entry
    /// per seed (in seed order).
    pub per_seed_net_revenue: Vec<f64>,
    pub median_net_revenue: f64,
}

/// Train and evaluate the co-located ablation market once per (scope, seed)
/// pair — the same seeds across scopes, so comparisons are paired — and
/// report each scope's per-seed and median net revenue for the learning
/// station. `tweak` may adjust every scenario (e.g. arrival rate) before use.
pub fn run_ablation(
    train_days: u32,
    eval_days: u32,
    base_seed: u64,
    n_seeds: u32,
    tweak: &(dyn Fn(&mut Scenario) + Sync),
) -> Result<Vec<AblationResult>> {
    if n_seeds == 0 {
        return Err(SimError::Config("ablation needs at least one seed".into()));
    }
    let seeds = day_seeds(base_seed, n_seeds);
    let variants = ablation_variants();
    let mut jobs: Vec<(usize, u64)> = Vec::new();
    for v in 0..variants.len() {
        for &seed in &seeds {
            jobs.push((v, seed));
        }
    }
    let outcomes: Vec<Result<(usize, u64, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(v, seed)| {
                let variant = variants[v];
                scope.spawn(move || -> Result<(usize, u64, f64)> {
                    let mut scenario = colocated_ablation(variant.info_set);
                    scenario.name = format!("{}_{}", scenario.name, variant.label);
                    tweak(&mut scenario);
                    let trained = train(&scenario, train_days, seed)?;
                    let mut policies = trained.policies;
                    freeze_policies(&mut policies);
                    let outcome = evaluate(&scenario, policies, eval_days, seed, false)?;
                    let ai_station = scenario.stations[0].id;
                    let net = outcome
                        .report
                        .stations
                        .iter()
                        .find(|s| s.id == ai_station)
                        .map_or(0.0, |s| s.net_revenue_eur);
                    Ok((v, seed, net))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut per_variant: Vec<BTreeMap<u64, f64>> = vec![BTreeMap::new(); variants.len()];
    for outcome in outcomes {
        let (v, seed, net) = outcome?;
        per_variant[v].insert(seed, net);
    }
    Ok(variants
        .iter()
        .zip(per_variant)
        .map(|(variant, by_seed)| {
            // Seed order, not map order, so rows line up across variants.
            let per_seed: Vec<f64> = seeds.iter().map(|s| by_seed[s]).collect();
            let mut sorted = per_seed.clone();
            let median = median_in_place(&mut sorted).expect("at least one seed");
            AblationResult {
                label: variant.label.to_string(),
                per_seed_net_revenue: per_seed,
                median_net_revenue: median,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Exports.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct RevenueRow {
    day: u32,
    station: u32,
    net_revenue_eur: f64,
    charged: u64,
}

#[derive(Debug, Serialize)]
struct LossRow {
    day: u32,
    station: u32,
    mean_loss: f64,
    net_revenue_eur: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        writer.write_record(header)?;
    } else {
        for row in rows {
            writer.serialize(row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Write an evaluation's summary and row-level outputs into `out_dir`.
pub fn export_outcome(out_dir: &Path, outcome: &EvalOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    write_csv(
        &out_dir.join("charge_records.csv"),
        &outcome.records,
        &[
            "ev",
            "station",
            "arrival_minute",
            "arrival_soc",
            "delta_soc",
            "price_eur_kwh",
            "bill_eur",
            "net_revenue_eur",
            "waited_minutes",
            "charge_start_minute",
            "charge_end_minute",
            "electricity_utility_eur",
            "waiting_utility_eur",
        ],
    )?;
    write_csv(
        &out_dir.join("offers.csv"),
        &outcome.offer_log,
        &["day", "minute_of_day", "station", "ev", "esoc", "price_eur_kwh"],
    )?;
    write_csv(
        &out_dir.join("occupancy.csv"),
        &outcome.occupancy_log,
        &["day", "minute_of_day", "station", "public_price", "occupied", "queued"],
    )?;
    let revenue: Vec<RevenueRow> = outcome
        .day_stats
        .iter()
        .flat_map(|d| {
            d.net_revenue_eur.iter().map(|(&station, &net)| RevenueRow {
                day: d.day,
                station,
                net_revenue_eur: net,
                charged: d.charged.get(&station).copied().unwrap_or(0),
            })
        })
        .collect();
    write_csv(
        &out_dir.join("revenue.csv"),
        &revenue,
        &["day", "station", "net_revenue_eur", "charged"],
    )?;
    Ok(())
}

/// Write a training run's per-day loss and revenue trace into `out_dir`.
pub fn export_training(out_dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let rows: Vec<LossRow> = outcome
        .trace
        .iter()
        .flat_map(|d| {
            d.loss.iter().map(|(&station, &loss)| LossRow {
                day: d.day,
                station,
                mean_loss: loss,
                net_revenue_eur: d.net_revenue_eur.get(&station).copied().unwrap_or(0.0),
            })
        })
        .collect();
    write_csv(
        &out_dir.join("training_loss.csv"),
        &rows,
        &["day", "station", "mean_loss", "net_revenue_eur"],
    )?;
    Ok(())
}
