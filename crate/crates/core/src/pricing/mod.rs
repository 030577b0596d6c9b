//! Station-side pricing: the discrete price grid, what a station is allowed
//! to observe, replay-based Q-learning, undercutting dynamics, and the
//! runtime policy objects stations carry.

mod learner;
mod policy;
mod replay;

pub use learner::{epsilon_for_day, ApproxKind, QLearner, QLearnerConfig, QTable};
pub use policy::{bertrand_step, LearnedPolicy, PendingOffer, SavedPolicy, StationPolicy};
pub use replay::{ReplayMemory, Transition};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Uniformly spaced price levels over a closed interval; actions index into
/// the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    levels: Vec<f64>,
}

impl ActionSpace {
    /// `n` levels spanning `[p_min, p_max]` inclusive, evenly spaced.
    pub fn uniform(p_min: f64, p_max: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(SimError::Domain(format!(
                "action grid needs at least 2 levels, got {n}"
            )));
        }
        if !(p_min < p_max) || !p_min.is_finite() || !p_max.is_finite() {
            return Err(SimError::Domain(format!(
                "invalid price interval [{p_min}, {p_max}]"
            )));
        }
        let span = p_max - p_min;
        let levels = (0..n)
            .map(|i| (p_min + span * i as f64 / (n - 1) as f64).clamp(p_min, p_max))
            .collect();
        Ok(ActionSpace { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn price(&self, action: usize) -> f64 {
        self.levels[action]
    }

    pub fn min_price(&self) -> f64 {
        self.levels[0]
    }

    pub fn max_price(&self) -> f64 {
        *self.levels.last().expect("non-empty grid")
    }

    /// Spacing between adjacent levels.
    pub fn grid_step(&self) -> f64 {
        (self.max_price() - self.min_price()) / (self.len() - 1) as f64
    }

    /// Index of the level nearest to `price`.
    pub fn nearest(&self, price: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &l) in self.levels.iter().enumerate() {
            let d = (l - price).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Which market facts a pricing policy may condition on. Personalization
/// means conditioning on the individual EV's estimated arrival charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoSet {
    pub competitor_prices: bool,
    pub competitor_free_slots: bool,
    pub own_free_slots: bool,
    pub ev_esoc: bool,
}

impl Default for InfoSet {
    fn default() -> Self {
        InfoSet::prices_only()
    }
}

impl InfoSet {
    /// Competitor public prices only.
    pub fn prices_only() -> Self {
        InfoSet {
            competitor_prices: true,
            competitor_free_slots: false,
            own_free_slots: false,
            ev_esoc: false,
        }
    }

    /// Competitor prices plus the individual EV's estimated arrival charge.
    pub fn prices_and_esoc() -> Self {
        InfoSet {
            ev_esoc: true,
            ..InfoSet::prices_only()
        }
    }

    /// Competitor prices plus slot availability on both sides.
    pub fn prices_and_slots() -> Self {
        InfoSet {
            competitor_free_slots: true,
            own_free_slots: true,
            ..InfoSet::prices_only()
        }
    }

    /// Everything: prices, both-side availability, and per-EV charge.
    pub fn full() -> Self {
        InfoSet {
            competitor_prices: true,
            competitor_free_slots: true,
            own_free_slots: true,
            ev_esoc: true,
        }
    }

    /// Competitor prices and competitor availability (the public duopoly
    /// view: no own-side or per-EV terms).
    pub fn prices_and_competitor_slots() -> Self {
        InfoSet {
            competitor_free_slots: true,
            ..InfoSet::prices_only()
        }
    }

    /// A policy with per-EV inputs must quote per-EV prices.
    pub fn personalized(&self) -> bool {
        self.ev_esoc
    }

    /// Observation length for a market of `n_stations` stations.
    pub fn dim(&self, n_stations: usize) -> usize {
        let competitors = n_stations.saturating_sub(1);
        let mut d = 0;
        if self.competitor_prices {
            d += competitors;
        }
        if self.competitor_free_slots {
            d += competitors;
        }
        if self.own_free_slots {
            d += 1;
        }
        if self.ev_esoc {
            d += 1;
        }
        d
    }
}

/// Per-station market snapshot a policy is allowed to read.
#[derive(Debug, Clone)]
pub struct StationView {
    pub id: u32,
    /// Last broadcast public price, if the station quotes one.
    pub public_price: Option<f64>,
    pub free_slots: u32,
    pub slots: u32,
}

/// Snapshot of the whole market at one instant, ordered by station id.
#[derive(Debug, Clone)]
pub struct MarketView {
    pub stations: Vec<StationView>,
}

impl MarketView {
    pub fn station(&self, id: u32) -> Option<&StationView> {
        self.stations.iter().find(|s| s.id == id)
    }

    /// Cheapest public price among stations other than `own`, if any
    /// competitor quotes one.
    pub fn min_competitor_price(&self, own: u32) -> Option<f64> {
        self.stations
            .iter()
            .filter(|s| s.id != own)
            .filter_map(|s| s.public_price)
            .fold(None, |acc, p| {
                Some(match acc {
                    None => p,
                    Some(a) => a.min(p),
                })
            })
    }
}

/// Assemble a normalized observation vector for station `own` under an
/// information set. Order is fixed: competitor prices (ascending station
/// id), competitor free slots, own free slots, EV charge estimate. Prices
/// normalize to [0,1] over `(p_min, p_max)`; a competitor with no public
/// price reads as the cap. Slot counts normalize by capacity and the charge
/// estimate clamps to [0,1].
pub fn build_observation(
    info: &InfoSet,
    view: &MarketView,
    own: u32,
    ev_esoc: Option<f64>,
    price_bounds: (f64, f64),
) -> Result<Vec<f64>> {
    let (p_min, p_max) = price_bounds;
    if !(p_min < p_max) {
        return Err(SimError::Domain(format!(
            "invalid price bounds [{p_min}, {p_max}]"
        )));
    }
    if view.station(own).is_none() {
        return Err(SimError::Domain(format!("unknown own station {own}")));
    }
    let mut obs = Vec::with_capacity(info.dim(view.stations.len()));
    if info.competitor_prices {
        for s in view.stations.iter().filter(|s| s.id != own) {
            let p = s.public_price.unwrap_or(p_max);
            obs.push(((p - p_min) / (p_max - p_min)).clamp(0.0, 1.0));
        }
    }
    if info.competitor_free_slots {
        for s in view.stations.iter().filter(|s| s.id != own) {
            obs.push(f64::from(s.free_slots) / f64::from(s.slots.max(1)));
        }
    }
    if info.own_free_slots {
        let s = view.station(own).expect("checked above");
        obs.push(f64::from(s.free_slots) / f64::from(s.slots.max(1)));
    }
    if info.ev_esoc {
        let e = ev_esoc.ok_or_else(|| {
            SimError::Domain("personalized observation requires an EV charge estimate".into())
        })?;
        obs.push(e.clamp(0.0, 1.0));
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_grid_hits_both_ends_and_round_trips() {
        let a = ActionSpace::uniform(0.35, 0.55, 21).unwrap();
        assert_eq!(a.len(), 21);
        assert_eq!(a.min_price(), 0.35);
        assert_eq!(a.max_price(), 0.55);
        assert_relative_eq!(a.grid_step(), 0.01, epsilon = 1e-12);
        for i in 0..a.len() {
            assert!(a.price(i) >= 0.35 && a.price(i) <= 0.55);
            assert_eq!(a.nearest(a.price(i)), i, "index {i} must round-trip");
        }
        assert_relative_eq!(a.price(7), 0.42, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(ActionSpace::uniform(0.35, 0.55, 1).is_err());
        assert!(ActionSpace::uniform(0.55, 0.35, 21).is_err());
        assert!(ActionSpace::uniform(0.35, 0.35, 21).is_err());
    }

    fn two_station_view() -> MarketView {
        MarketView {
            stations: vec![
                StationView {
                    id: 0,
                    public_price: Some(0.45),
                    free_slots: 2,
                    slots: 4,
                },
                StationView {
                    id: 1,
                    public_price: Some(0.52),
                    free_slots: 4,
                    slots: 4,
                },
            ],
        }
    }

    #[test]
    fn observation_orders_and_normalizes() {
        let view = two_station_view();
        let obs = build_observation(
            &InfoSet::full(),
            &view,
            0,
            Some(0.42),
            (0.35, 0.55),
        )
        .unwrap();
        // competitor price 0.52 -> 0.85, competitor slots 4/4, own slots 2/4, esoc
        assert_eq!(obs.len(), 4);
        assert_relative_eq!(obs[0], 0.85, epsilon = 1e-12);
        assert_relative_eq!(obs[1], 1.0);
        assert_relative_eq!(obs[2], 0.5);
        assert_relative_eq!(obs[3], 0.42);
    }

    #[test]
    fn esoc_outside_unit_interval_is_clamped() {
        let view = two_station_view();
        let info = InfoSet::prices_and_esoc();
        let low = build_observation(&info, &view, 0, Some(-0.3), (0.35, 0.55)).unwrap();
        let high = build_observation(&info, &view, 0, Some(1.7), (0.35, 0.55)).unwrap();
        assert_eq!(low[1], 0.0);
        assert_eq!(high[1], 1.0);
    }

    #[test]
    fn personalized_info_set_requires_esoc() {
        let view = two_station_view();
        assert!(build_observation(&InfoSet::prices_and_esoc(), &view, 0, None, (0.35, 0.55)).is_err());
        // non-personalized sets ignore the field
        let obs =
            build_observation(&InfoSet::prices_only(), &view, 0, None, (0.35, 0.55)).unwrap();
        assert_eq!(obs.len(), 1);
    }

    #[test]
    fn missing_competitor_price_reads_as_cap() {
        let mut view = two_station_view();
        view.stations[1].public_price = None;
        let obs =
            build_observation(&InfoSet::prices_only(), &view, 0, None, (0.35, 0.55)).unwrap();
        assert_eq!(obs[0], 1.0);
    }

    #[test]
    fn info_set_dims_and_personalization() {
        assert_eq!(InfoSet::prices_only().dim(2), 1);
        assert_eq!(InfoSet::prices_and_esoc().dim(2), 2);
        assert_eq!(InfoSet::prices_and_slots().dim(2), 3);
        assert_eq!(InfoSet::full().dim(2), 4);
        assert_eq!(InfoSet::full().dim(3), 6);
        assert_eq!(InfoSet::prices_and_competitor_slots().dim(2), 2);
        assert!(InfoSet::prices_and_esoc().personalized());
        assert!(InfoSet::full().personalized());
        assert!(!InfoSet::prices_and_slots().personalized());
    }

    #[test]
    fn min_competitor_price_skips_own_and_missing() {
        let mut view = two_station_view();
        assert_relative_eq!(view.min_competitor_price(0).unwrap(), 0.52);
        assert_relative_eq!(view.min_competitor_price(1).unwrap(), 0.45);
        view.stations[1].public_price = None;
        assert!(view.min_competitor_price(0).is_none());
    }
}
