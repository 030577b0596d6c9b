//! Discrete-minute simulation of a highway fast-charging market.
//!
//! A [`World`] advances in fixed steps. Each step: stations refresh their
//! quotes, new drivers enter the highway, every active driver picks a station
//! through the group-stable selection game, everyone moves, chargers serve
//! their queues, and finished drivers leave at the far end.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::choice::{self, UtilityParams};
use crate::cssg::{self, GameInstance, SelectingEv, StationState};
use crate::error::{Result, SimError};
use crate::pricing::{ActionSpace, MarketView, StationPolicy, StationView};

/// Physical and behavioural description of the (homogeneous) EV fleet.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvSpec {
    /// Usable battery capacity in kWh.
    pub battery_kwh: f64,
    /// Distance a full battery covers, in km.
    pub travel_range_km: f64,
    /// Cruise speed in km/h.
    pub speed_kmh: f64,
    /// State-of-charge ceiling drivers charge up to.
    pub max_soc: f64,
    /// State-of-charge gained per minute on a charger.
    pub charge_efficiency_soc_per_min: f64,
    /// Lower bound of the entry state-of-charge draw.
    pub initial_soc_min: f64,
    /// Upper bound of the entry state-of-charge draw.
    pub initial_soc_max: f64,
}

impl Default for EvSpec {
    fn default() -> Self {
        EvSpec {
            battery_kwh: 800.0,
            travel_range_km: 800.0,
            speed_kmh: 100.0,
            max_soc: 0.8,
            charge_efficiency_soc_per_min: 0.0267,
            initial_soc_min: 0.25,
            initial_soc_max: 0.75,
        }
    }
}

impl EvSpec {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("battery_kwh", self.battery_kwh),
            ("travel_range_km", self.travel_range_km),
            ("speed_kmh", self.speed_kmh),
            ("charge_efficiency_soc_per_min", self.charge_efficiency_soc_per_min),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0 < self.max_soc && self.max_soc <= 1.0) {
            return Err(SimError::Config(format!(
                "max_soc must lie in (0, 1], got {}",
                self.max_soc
            )));
        }
        if !(0.0 < self.initial_soc_min
            && self.initial_soc_min <= self.initial_soc_max
            && self.initial_soc_max <= self.max_soc)
        {
            return Err(SimError::Config(format!(
                "initial SOC range ({}, {}) must satisfy 0 < min <= max <= max_soc ({})",
                self.initial_soc_min, self.initial_soc_max, self.max_soc
            )));
        }
        Ok(())
    }
}

/// Market-wide simulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Length of the highway segment in km; drivers exit past this point.
    pub highway_km: f64,
    /// Minutes per simulation step.
    pub step_minutes: u64,
    /// Mean number of EVs entering the highway per hour.
    pub arrival_rate_per_hour: f64,
    /// Lowest price any station may quote (EUR per kWh).
    pub price_min: f64,
    /// Regulated price cap (EUR per kWh).
    pub price_max: f64,
    /// Number of evenly spaced price levels between the bounds.
    pub price_levels: usize,
    /// Wholesale electricity cost to stations (EUR per kWh).
    pub wholesale_eur_kwh: f64,
    /// Minimum effective state of charge required to consider a station.
    pub reach_margin: f64,
    /// Fleet description.
    pub ev: EvSpec,
    /// Driver utility weights.
    pub utility: UtilityParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            highway_km: 500.0,
            step_minutes: 1,
            arrival_rate_per_hour: 24.0,
            price_min: 0.35,
            price_max: 0.55,
            price_levels: 21,
            wholesale_eur_kwh: 0.35,
            reach_margin: 0.0,
            ev: EvSpec::default(),
            utility: UtilityParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.highway_km.is_finite() || self.highway_km <= 0.0 {
            return Err(SimError::Config(format!(
                "highway_km must be positive, got {}",
                self.highway_km
            )));
        }
        if self.step_minutes == 0 {
            return Err(SimError::Config("step_minutes must be at least 1".into()));
        }
        if !self.arrival_rate_per_hour.is_finite() || self.arrival_rate_per_hour < 0.0 {
            return Err(SimError::Config(format!(
                "arrival_rate_per_hour must be non-negative, got {}",
                self.arrival_rate_per_hour
            )));
        }
        if !(self.price_min.is_finite() && self.price_max.is_finite() && self.price_min < self.price_max)
        {
            return Err(SimError::Config(format!(
                "price bounds must satisfy min < max, got ({}, {})",
                self.price_min, self.price_max
            )));
        }
        if self.price_levels < 2 {
            return Err(SimError::Config("price_levels must be at least 2".into()));
        }
        if !self.wholesale_eur_kwh.is_finite() || self.wholesale_eur_kwh < 0.0 {
            return Err(SimError::Config(format!(
                "wholesale_eur_kwh must be non-negative, got {}",
                self.wholesale_eur_kwh
            )));
        }
        if !self.reach_margin.is_finite() || self.reach_margin < 0.0 {
            return Err(SimError::Config(format!(
                "reach_margin must be non-negative, got {}",
                self.reach_margin
            )));
        }
        self.ev.validate()
    }

    /// The shared discrete price grid stations quote from.
    pub fn action_space(&self) -> Result<ActionSpace> {
        ActionSpace::uniform(self.price_min, self.price_max, self.price_levels)
    }
}

/// Static description of one charging station.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub id: u32,
    /// Position along the highway in km.
    pub location_km: f64,
    /// Number of charging slots.
    pub slots: u32,
    /// Minutes between quote refreshes.
    pub update_period_minutes: u64,
    /// Public price posted before the first refresh, for policies that need one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_price: Option<f64>,
}

/// Where a driver currently is in its trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvState {
    Driving,
    Queued { station: u32 },
    Charging { station: u32 },
    Exited,
}

/// The quote a driver accepted when it arrived at its station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockedOffer {
    pub station: u32,
    pub price_eur_kwh: f64,
    /// State of charge the driver buys (up to the fleet ceiling).
    pub delta_soc: f64,
    /// State of charge on arrival at the station.
    pub soc_at_lock: f64,
    /// Minute the driver arrived and the price locked.
    pub minute: u64,
}

/// One driver on the highway.
#[derive(Debug, Clone)]
pub struct EvUser {
    pub id: u32,
    pub position_km: f64,
    pub soc: f64,
    pub state: EvState,
    pub entry_minute: u64,
    /// Station chosen in the most recent selection game, if any.
    pub selected: Option<u32>,
    /// Whether the driver has already completed its one charge.
    pub charged: bool,
    /// Stations whose learning outcome for this driver is still open.
    unresolved: BTreeSet<u32>,
    pub lock: Option<LockedOffer>,
    pub charge_start_minute: Option<u64>,
}

/// Completed charging transaction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChargeRecord {
    pub ev: u32,
    pub station: u32,
    /// Minute the driver arrived at the station.
    pub arrival_minute: u64,
    /// State of charge on arrival.
    pub arrival_soc: f64,
    /// State of charge purchased.
    pub delta_soc: f64,
    pub price_eur_kwh: f64,
    /// What the driver paid.
    pub bill_eur: f64,
    /// Station profit after wholesale cost.
    pub net_revenue_eur: f64,
    pub waited_minutes: u64,
    pub charge_start_minute: u64,
    pub charge_end_minute: u64,
    /// Driver's cost-of-electricity utility component (negative).
    pub electricity_utility_eur: f64,
    /// Driver's cost-of-waiting utility component (negative or zero).
    pub waiting_utility_eur: f64,
}

/// End-of-minute snapshot of one station's load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OccupancyRow {
    pub day: u64,
    pub minute_of_day: u64,
    pub station: u32,
    pub public_price: Option<f64>,
    pub occupied: u32,
    pub queued: u32,
}

/// One quote issued by a station: broadcast (no `ev`) or personal.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OfferRow {
    pub day: u64,
    pub minute_of_day: u64,
    pub station: u32,
    pub ev: Option<u32>,
    /// Driver's effective state of charge at the station, for personal quotes.
    pub esoc: Option<f64>,
    pub price_eur_kwh: f64,
}

/// Runtime state of one station.
#[derive(Debug)]
pub struct Station {
    pub spec: StationSpec,
    pub policy: StationPolicy,
    /// Last broadcast price; `None` for stations quoting per driver.
    pub public_price: Option<f64>,
    /// Outstanding personal quotes by driver id.
    pub offers: BTreeMap<u32, f64>,
    /// Drivers waiting for a slot, in arrival order.
    pub queue: VecDeque<u32>,
    /// Drivers currently on a charger.
    pub charging: Vec<u32>,
    pub gross_revenue_eur: f64,
    pub net_revenue_eur: f64,
    pub charged_count: u64,
}

impl Station {
    pub fn free_slots(&self) -> u32 {
        self.spec.slots - self.charging.len() as u32
    }
}

/// Counts of drivers by trip phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PopulationCounts {
    pub driving: usize,
    pub queued: usize,
    pub charging: usize,
    pub exited: usize,
}

/// Number of highway entries in one step, drawn from a Poisson distribution.
pub fn sample_arrival_count(
    rate_per_hour: f64,
    step_minutes: u64,
    rng: &mut impl Rng,
) -> Result<u32> {
    if !rate_per_hour.is_finite() || rate_per_hour < 0.0 {
        return Err(SimError::Config(format!(
            "arrival rate must be non-negative, got {rate_per_hour}"
        )));
    }
    let lambda = rate_per_hour / 60.0 * step_minutes as f64;
    if lambda == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(lambda)
        .map_err(|e| SimError::Config(format!("invalid arrival rate {rate_per_hour}: {e}")))?;
    Ok(dist.sample(rng) as u32)
}

/// Customer bill and station profit for one completed charge.
/// Returns `(bill, net_revenue)` where the bill is price times energy bought
/// and the net revenue subtracts the station's wholesale cost.
pub fn settle_bill(
    price_eur_kwh: f64,
    delta_soc: f64,
    battery_kwh: f64,
    wholesale_eur_kwh: f64,
) -> (f64, f64) {
    let energy_kwh = delta_soc * battery_kwh;
    let bill = price_eur_kwh * energy_kwh;
    let net = (price_eur_kwh - wholesale_eur_kwh) * energy_kwh;
    (bill, net)
}

/// The simulated market: highway, stations, drivers, and the clock.
#[derive(Debug)]
pub struct World {
    pub config: SimConfig,
    /// Current minute since the start of the run.
    pub minute: u64,
    grid: ActionSpace,
    pub stations: Vec<Station>,
    pub evs: Vec<EvUser>,
    /// Completed transactions in completion order.
    pub records: Vec<ChargeRecord>,
    pub occupancy_log: Vec<OccupancyRow>,
    pub offer_log: Vec<OfferRow>,
    /// Whether to retain per-minute occupancy and quote logs.
    pub collect_logs: bool,
    /// Previous selection-game outcome, reused to warm-start the next solve.
    warm: BTreeMap<u32, u32>,
    rng: ChaCha8Rng,
    /// Largest revision count any single selection game needed.
    pub max_revisions_seen: u64,
    pub total_rounds: u64,
    pub solves: u64,
    pub arrivals_total: u64,
    /// Drivers that left the highway without charging.
    pub uncharged_exits: u64,
    /// Re-verify stability of every selection-game outcome (slow; for tests).
    pub certify_every_solve: bool,
}

impl World {
    pub fn new(
        config: SimConfig,
        stations: Vec<(StationSpec, StationPolicy)>,
        seed: u64,
    ) -> Result<World> {
        config.validate()?;
        let grid = config.action_space()?;
        if stations.is_empty() {
            return Err(SimError::Config("at least one station is required".into()));
        }
        let mut seen = BTreeSet::new();
        for (spec, policy) in &stations {
            if !seen.insert(spec.id) {
                return Err(SimError::Config(format!("duplicate station id {}", spec.id)));
            }
            if !spec.location_km.is_finite()
                || spec.location_km <= 0.0
                || spec.location_km >= config.highway_km
            {
                return Err(SimError::Config(format!(
                    "station {} location {} must lie strictly inside (0, {})",
                    spec.id, spec.location_km, config.highway_km
                )));
            }
            if spec.slots == 0 {
                return Err(SimError::Config(format!("station {} needs at least one slot", spec.id)));
            }
            if spec.update_period_minutes == 0 {
                return Err(SimError::Config(format!(
                    "station {} update period must be at least one minute",
                    spec.id
                )));
            }
            if let Some(p) = spec.initial_price {
                check_price_bounds(&config, spec.id, p)?;
            }
            if let StationPolicy::Fixed { price } = policy {
                check_price_bounds(&config, spec.id, *price)?;
            }
        }
        let mut stations: Vec<Station> = stations
            .into_iter()
            .map(|(spec, policy)| {
                let public_price = if policy.is_personalized() { None } else { spec.initial_price };
                Station {
                    spec,
                    policy,
                    public_price,
                    offers: BTreeMap::new(),
                    queue: VecDeque::new(),
                    charging: Vec::new(),
                    gross_revenue_eur: 0.0,
                    net_revenue_eur: 0.0,
                    charged_count: 0,
                }
            })
            .collect();
        stations.sort_by_key(|s| s.spec.id);
        Ok(World {
            config,
            minute: 0,
            grid,
            stations,
            evs: Vec::new(),
            records: Vec::new(),
            occupancy_log: Vec::new(),
            offer_log: Vec::new(),
            collect_logs: false,
            warm: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_revisions_seen: 0,
            total_rounds: 0,
            solves: 0,
            arrivals_total: 0,
            uncharged_exits: 0,
            certify_every_solve: false,
        })
    }

    /// What every station can observe of the market right now.
    pub fn market_view(&self) -> MarketView {
        MarketView {
            stations: self
                .stations
                .iter()
                .map(|s| StationView {
                    id: s.spec.id,
                    public_price: s.public_price,
                    free_slots: s.free_slots(),
                    slots: s.spec.slots,
                })
                .collect(),
        }
    }

    pub fn station(&self, id: u32) -> Option<&Station> {
        self.stations.iter().find(|s| s.spec.id == id)
    }

    pub fn population_counts(&self) -> PopulationCounts {
        let mut c = PopulationCounts::default();
        for ev in &self.evs {
            match ev.state {
                EvState::Driving => c.driving += 1,
                EvState::Queued { .. } => c.queued += 1,
                EvState::Charging { .. } => c.charging += 1,
                EvState::Exited => c.exited += 1,
            }
        }
        c
    }

    /// Insert one driver at the highway entrance with the given state of
    /// charge and let per-driver stations quote it. Returns the driver id.
    pub fn spawn_ev(&mut self, soc: f64) -> Result<u32> {
        if !(0.0 < soc && soc <= self.config.ev.max_soc) {
            return Err(SimError::Domain(format!(
                "entry SOC {soc} must lie in (0, {}]",
                self.config.ev.max_soc
            )));
        }
        let id = self.evs.len() as u32;
        let unresolved = self.stations.iter().map(|s| s.spec.id).collect();
        self.evs.push(EvUser {
            id,
            position_km: 0.0,
            soc,
            state: EvState::Driving,
            entry_minute: self.minute,
            selected: None,
            charged: false,
            unresolved,
            lock: None,
            charge_start_minute: None,
        });
        self.arrivals_total += 1;
        self.quote_personal_offers(Some(id))?;
        Ok(id)
    }

    /// Advance the world by one step.
    pub fn step(&mut self) -> Result<()> {
        self.refresh_prices()?;
        self.spawn_arrivals()?;
        self.run_selection()?;
        self.advance_motion()?;
        self.service_stations();
        self.process_exits();
        if self.collect_logs {
            self.log_occupancy();
        }
        self.minute += self.config.step_minutes;
        Ok(())
    }

    /// Advance the world by `minutes` of simulated time.
    pub fn run(&mut self, minutes: u64) -> Result<()> {
        let steps = minutes / self.config.step_minutes;
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    fn day_and_minute(&self) -> (u64, u64) {
        (self.minute / MINUTES_PER_DAY, self.minute % MINUTES_PER_DAY)
    }

    /// Stations due this minute refresh their broadcast price or re-quote
    /// every eligible driver personally.
    fn refresh_prices(&mut self) -> Result<()> {
        let view = self.market_view();
        let (day, minute_of_day) = self.day_and_minute();
        let mut due_personal = false;
        {
            let World {
                ref mut stations,
                ref mut rng,
                ref config,
                ref grid,
                ref mut offer_log,
                collect_logs,
                minute,
                ..
            } = *self;
            for st in stations.iter_mut() {
                if minute % st.spec.update_period_minutes != 0 {
                    continue;
                }
                if st.policy.is_personalized() {
                    due_personal = true;
                    continue;
                }
                if let Some(p) = st.policy.refresh_public(&view, st.spec.id, grid, rng)? {
                    let p = check_price_bounds(config, st.spec.id, p)?;
                    st.public_price = Some(p);
                    if collect_logs {
                        offer_log.push(OfferRow {
                            day,
                            minute_of_day,
                            station: st.spec.id,
                            ev: None,
                            esoc: None,
                            price_eur_kwh: p,
                        });
                    }
                }
            }
        }
        // Every station due this minute has now posted. Decisions were made
        // from the pre-reprice snapshot (simultaneous moves), but drivers will
        // compare the *new* prices, so learning broadcast stations re-stamp
        // their outstanding decision with the state now in force.
        let fresh = self.market_view();
        for st in self.stations.iter_mut() {
            if self.minute % st.spec.update_period_minutes != 0 {
                continue;
            }
            st.policy.restate_public(&fresh, st.spec.id)?;
        }
        if due_personal {
            self.quote_personal_offers(None)?;
        }
        Ok(())
    }

    /// Per-driver stations quote every driver that could still use them.
    /// With `only_ev` set, quotes go to that driver alone (used on entry);
    /// otherwise only stations due for a refresh this minute quote.
    fn quote_personal_offers(&mut self, only_ev: Option<u32>) -> Result<()> {
        let view = self.market_view();
        let (day, minute_of_day) = self.day_and_minute();
        let World {
            ref mut stations,
            ref evs,
            ref mut rng,
            ref config,
            ref mut offer_log,
            collect_logs,
            minute,
            ..
        } = *self;
        for st in stations.iter_mut() {
            if !st.policy.is_personalized() {
                continue;
            }
            if only_ev.is_none() && minute % st.spec.update_period_minutes != 0 {
                continue;
            }
            for ev in evs.iter() {
                if let Some(target) = only_ev {
                    if ev.id != target {
                        continue;
                    }
                }
                if ev.state != EvState::Driving || ev.charged {
                    continue;
                }
                let dist = st.spec.location_km - ev.position_km;
                if dist < 0.0 {
                    continue;
                }
                let es = choice::esoc(ev.soc, dist, config.ev.travel_range_km);
                if !choice::reachable(es, config.reach_margin) {
                    continue;
                }
                if config.ev.max_soc - es <= 0.0 {
                    continue;
                }
                if let Some(p) = st.policy.offer_for_ev(&view, st.spec.id, ev.id, es, rng)? {
                    let p = check_price_bounds(config, st.spec.id, p)?;
                    st.offers.insert(ev.id, p);
                    if collect_logs {
                        offer_log.push(OfferRow {
                            day,
                            minute_of_day,
                            station: st.spec.id,
                            ev: Some(ev.id),
                            esoc: Some(es),
                            price_eur_kwh: p,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Draw this minute's highway entries and insert them.
    fn spawn_arrivals(&mut self) -> Result<()> {
        let n = sample_arrival_count(
            self.config.arrival_rate_per_hour,
            self.config.step_minutes,
            &mut self.rng,
        )?;
        for _ in 0..n {
            let lo = self.config.ev.initial_soc_min;
            let hi = self.config.ev.initial_soc_max;
            let soc = if lo == hi { lo } else { self.rng.gen_range(lo..hi) };
            self.spawn_ev(soc)?;
        }
        Ok(())
    }

    /// Game instance over the drivers at `idxs` (indices into `self.evs`).
    fn build_instance(&self, idxs: &[usize]) -> GameInstance {
        let evs: Vec<SelectingEv> = idxs
            .iter()
            .map(|&i| {
                let ev = &self.evs[i];
                SelectingEv { id: ev.id, position_km: ev.position_km, soc: ev.soc }
            })
            .collect();
        let stations: Vec<StationState> = self
            .stations
            .iter()
            .map(|s| StationState {
                id: s.spec.id,
                location_km: s.spec.location_km,
                slots: s.spec.slots,
                charging: s.charging.len() as u32,
                committed: s.queue.len() as u32,
            })
            .collect();
        let prices = idxs
            .iter()
            .map(|&i| {
                let ev = &self.evs[i];
                self.stations
                    .iter()
                    .map(|s| {
                        if s.policy.is_personalized() {
                            s.offers.get(&ev.id).copied()
                        } else {
                            s.public_price
                        }
                    })
                    .collect()
            })
            .collect();
        GameInstance {
            evs,
            stations,
            prices,
            utility: self.config.utility.clone(),
            travel_range_km: self.config.ev.travel_range_km,
            battery_kwh: self.config.ev.battery_kwh,
            max_soc: self.config.ev.max_soc,
            reach_margin: self.config.reach_margin,
        }
    }

    /// All drivers still picking a station play one selection game; drivers
    /// with no usable station are checked for a safe exit instead.
    fn run_selection(&mut self) -> Result<()> {
        let active: Vec<usize> = self
            .evs
            .iter()
            .enumerate()
            .filter(|(_, ev)| ev.state == EvState::Driving && !ev.charged)
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            self.warm.clear();
            return Ok(());
        }
        let instance = self.build_instance(&active);
        let mut in_game: Vec<usize> = Vec::with_capacity(active.len());
        for (k, &idx) in active.iter().enumerate() {
            if cssg::candidate_station_ids(&instance, k)?.is_empty() {
                let ev = &mut self.evs[idx];
                let exit_esoc = choice::esoc(
                    ev.soc,
                    self.config.highway_km - ev.position_km,
                    self.config.ev.travel_range_km,
                );
                if exit_esoc < 0.0 {
                    return Err(SimError::StrandedEv { ev: ev.id, minute: self.minute });
                }
                ev.selected = None;
            } else {
                in_game.push(idx);
            }
        }
        if in_game.is_empty() {
            self.warm.clear();
            return Ok(());
        }
        let instance =
            if in_game.len() == active.len() { instance } else { self.build_instance(&in_game) };
        let outcome = cssg::solve(&instance, Some(&self.warm), &mut self.rng)?;
        if self.certify_every_solve && !cssg::certify_nash_stable(&instance, &outcome.partition)? {
            return Err(SimError::Domain(format!(
                "selection game at minute {} produced an unstable outcome",
                self.minute
            )));
        }
        self.solves += 1;
        self.total_rounds += outcome.rounds;
        self.max_revisions_seen = self.max_revisions_seen.max(outcome.revisions);
        for &idx in &in_game {
            let ev = &mut self.evs[idx];
            ev.selected = outcome.partition.assignment.get(&ev.id).copied();
        }
        self.warm = outcome.partition.assignment;
        Ok(())
    }

    /// Move every driver, locking prices at stations they arrive at and
    /// settling learning outcomes for stations they pass.
    fn advance_motion(&mut self) -> Result<()> {
        let World {
            ref mut evs,
            ref mut stations,
            ref mut rng,
            ref config,
            minute,
            ..
        } = *self;
        let dist_step = config.ev.speed_kmh * config.step_minutes as f64 / 60.0;
        let range = config.ev.travel_range_km;
        let locations: BTreeMap<u32, f64> =
            stations.iter().map(|s| (s.spec.id, s.spec.location_km)).collect();
        for ev in evs.iter_mut() {
            if ev.state != EvState::Driving {
                continue;
            }
            let old_pos = ev.position_km;
            let new_pos = old_pos + dist_step;
            let target = if ev.charged { None } else { ev.selected.map(|s| locations[&s]) };
            match target {
                // The driver reaches its chosen station within this step.
                Some(loc) if loc <= new_pos => {
                    let sid = ev.selected.expect("target implies selection");
                    ev.soc -= (loc - old_pos) / range;
                    ev.position_km = loc;
                    let price = {
                        let st = stations
                            .iter()
                            .find(|s| s.spec.id == sid)
                            .expect("selected station exists");
                        if st.policy.is_personalized() {
                            st.offers.get(&ev.id).copied()
                        } else {
                            st.public_price
                        }
                    }
                    .ok_or_else(|| {
                        SimError::Domain(format!(
                            "driver {} arrived at station {sid} with no binding price",
                            ev.id
                        ))
                    })?;
                    let delta_soc = config.ev.max_soc - ev.soc;
                    if delta_soc <= 0.0 {
                        return Err(SimError::Domain(format!(
                            "driver {} arrived at station {sid} already at the charge ceiling",
                            ev.id
                        )));
                    }
                    ev.lock = Some(LockedOffer {
                        station: sid,
                        price_eur_kwh: price,
                        delta_soc,
                        soc_at_lock: ev.soc,
                        minute,
                    });
                    ev.state = EvState::Queued { station: sid };
                    let reward = (price - config.wholesale_eur_kwh)
                        * delta_soc
                        * config.ev.battery_kwh;
                    for st in stations.iter_mut() {
                        if st.spec.id == sid {
                            st.queue.push_back(ev.id);
                        }
                        if ev.unresolved.contains(&st.spec.id) {
                            let r = if st.spec.id == sid { reward } else { 0.0 };
                            st.policy.resolve(ev.id, r, rng)?;
                            st.offers.remove(&ev.id);
                        }
                    }
                    ev.unresolved.clear();
                }
                // Plain driving; stations left behind learn they lost this driver.
                _ => {
                    ev.position_km = new_pos;
                    ev.soc -= dist_step / range;
                    if !ev.charged && !ev.unresolved.is_empty() {
                        let passed: Vec<u32> = ev
                            .unresolved
                            .iter()
                            .copied()
                            .filter(|sid| locations[sid] <= new_pos)
                            .collect();
                        for sid in passed {
                            let st = stations
                                .iter_mut()
                                .find(|s| s.spec.id == sid)
                                .expect("unresolved station exists");
                            st.policy.resolve(ev.id, 0.0, rng)?;
                            st.offers.remove(&ev.id);
                            ev.unresolved.remove(&sid);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Stations admit queued drivers into free slots and charge, billing
    /// drivers whose batteries reach the ceiling.
    fn service_stations(&mut self) {
        let World {
            ref mut evs,
            ref mut stations,
            ref mut records,
            ref config,
            minute,
            ..
        } = *self;
        let soc_gain = config.ev.charge_efficiency_soc_per_min * config.step_minutes as f64;
        for st in stations.iter_mut() {
            admit_from_queue(st, evs, minute);
            let mut finished: Vec<u32> = Vec::new();
            for &ev_id in &st.charging {
                let ev = &mut evs[ev_id as usize];
                ev.soc = (ev.soc + soc_gain).min(config.ev.max_soc);
                if ev.soc >= config.ev.max_soc {
                    finished.push(ev_id);
                }
            }
            for ev_id in finished {
                let ev = &mut evs[ev_id as usize];
                let lock = ev.lock.expect("charging driver has a locked offer");
                let (bill, net) = settle_bill(
                    lock.price_eur_kwh,
                    lock.delta_soc,
                    config.ev.battery_kwh,
                    config.wholesale_eur_kwh,
                );
                let charge_start = ev.charge_start_minute.expect("charging driver has a start");
                let waited = charge_start - lock.minute;
                let electricity_utility = choice::monetary_utility(
                    lock.price_eur_kwh,
                    lock.delta_soc,
                    0.0,
                    config.ev.battery_kwh,
                    &config.utility,
                )
                .expect("locked offer terms are valid");
                let waiting_utility = if config.utility.waiting_enabled {
                    -config.utility.vtt_euro_per_hour * waited as f64 / 60.0
                } else {
                    0.0
                };
                st.gross_revenue_eur += bill;
                st.net_revenue_eur += net;
                st.charged_count += 1;
                records.push(ChargeRecord {
                    ev: ev_id,
                    station: st.spec.id,
                    arrival_minute: lock.minute,
                    arrival_soc: lock.soc_at_lock,
                    delta_soc: lock.delta_soc,
                    price_eur_kwh: lock.price_eur_kwh,
                    bill_eur: bill,
                    net_revenue_eur: net,
                    waited_minutes: waited,
                    charge_start_minute: charge_start,
                    charge_end_minute: minute,
                    electricity_utility_eur: electricity_utility,
                    waiting_utility_eur: waiting_utility,
                });
                ev.state = EvState::Driving;
                ev.charged = true;
                st.charging.retain(|&e| e != ev_id);
            }
            // Slots freed by completions go straight to waiting drivers, so
            // nobody queues while a charger stands idle. Drivers admitted
            // here draw their first charge next minute.
            admit_from_queue(st, evs, minute);
        }
    }

    /// Drivers past the end of the highway leave the simulation.
    fn process_exits(&mut self) {
        for ev in self.evs.iter_mut() {
            if ev.state == EvState::Driving && ev.position_km >= self.config.highway_km {
                ev.position_km = self.config.highway_km;
                ev.state = EvState::Exited;
                if !ev.charged {
                    self.uncharged_exits += 1;
                }
            }
        }
    }

    fn log_occupancy(&mut self) {
        let (day, minute_of_day) = self.day_and_minute();
        for st in &self.stations {
            self.occupancy_log.push(OccupancyRow {
                day,
                minute_of_day,
                station: st.spec.id,
                public_price: st.public_price,
                occupied: st.charging.len() as u32,
                queued: st.queue.len() as u32,
            });
        }
    }
}

pub const MINUTES_PER_DAY: u64 = 24 * 60;

/// Move drivers from the queue into free slots, first come first served.
fn admit_from_queue(st: &mut Station, evs: &mut [EvUser], minute: u64) {
    while (st.charging.len() as u32) < st.spec.slots {
        let Some(ev_id) = st.queue.pop_front() else { break };
        let ev = &mut evs[ev_id as usize];
        ev.state = EvState::Charging { station: st.spec.id };
        ev.charge_start_minute = Some(minute);
        st.charging.push(ev_id);
    }
}

fn check_price_bounds(config: &SimConfig, station: u32, price: f64) -> Result<f64> {
    if !price.is_finite() || price < config.price_min || price > config.price_max {
        return Err(SimError::Domain(format!(
            "station {station} quoted {price}, outside [{}, {}]",
            config.price_min, config.price_max
        )));
    }
    Ok(price)
}
