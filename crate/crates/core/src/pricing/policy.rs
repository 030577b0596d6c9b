//! Station pricing strategies: fixed, random, undercutting, and learned.
//!
//! A learned policy keeps the offers it has outstanding — one broadcast
//! decision for public pricing, one per driver for personalized pricing — and
//! turns each settled offer into a terminal experience plus one training
//! update at the moment the driver commits or drives past.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::pricing::learner::{ApproxKind, QLearner, QLearnerConfig, QTable};
use crate::pricing::replay::Transition;
use crate::pricing::{build_observation, ActionSpace, InfoSet, MarketView};

/// One undercutting move: a seller at or above the cheapest rival prices just
/// below it by `cut`, never below `floor`; a seller already strictly cheaper
/// keeps its price. Hitting the floor assigns `floor` itself, so mutual
/// undercutting absorbs exactly there.
pub fn bertrand_step(own: f64, rival: f64, cut: f64, floor: f64) -> f64 {
    if own >= rival {
        let next = rival - cut;
        if next < floor {
            floor
        } else {
            next
        }
    } else {
        own
    }
}

/// An offer awaiting its outcome: the observation and price level it came
/// from, the quoted price, and whether the price was an exploration draw
/// rather than the greedy choice.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingOffer {
    pub state: Vec<f64>,
    pub action: usize,
    pub price: f64,
    pub explored: bool,
}

/// Q-learning pricing policy for one station, in either broadcast mode (one
/// public price for everyone) or personalized mode (a price per driver).
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub learner: QLearner,
    pub info_set: InfoSet,
    pub actions: ActionSpace,
    /// When false the policy is frozen: greedy prices, no learning.
    pub training: bool,
    /// Latest broadcast decision (public mode only).
    current: Option<PendingOffer>,
    /// Latest offer per driver (personalized mode only).
    pending: BTreeMap<u32, PendingOffer>,
}

impl LearnedPolicy {
    pub fn new(learner: QLearner, info_set: InfoSet, actions: ActionSpace) -> Self {
        LearnedPolicy {
            learner,
            info_set,
            actions,
            training: true,
            current: None,
            pending: BTreeMap::new(),
        }
    }

    /// Personalized policies quote per-driver prices and broadcast nothing.
    pub fn is_personalized(&self) -> bool {
        self.info_set.personalized()
    }

    fn epsilon(&self) -> f64 {
        if self.training {
            self.learner.epsilon
        } else {
            0.0
        }
    }

    fn bounds(&self) -> (f64, f64) {
        (self.actions.min_price(), self.actions.max_price())
    }

    /// Pick a new public price from the market snapshot (broadcast mode).
    pub fn refresh_public(
        &mut self,
        view: &MarketView,
        own: u32,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if self.is_personalized() {
            return Err(SimError::Domain(
                "personalized policies quote per-driver prices, not a public one".into(),
            ));
        }
        let state = build_observation(&self.info_set, view, own, None, self.bounds())?;
        let explored = rng.gen::<f64>() < self.epsilon();
        let action = if explored {
            rng.gen_range(0..self.actions.len())
        } else {
            self.learner.greedy_action(&state)?
        };
        let price = self.actions.price(action);
        self.current = Some(PendingOffer {
            state,
            action,
            price,
            explored,
        });
        Ok(price)
    }

    /// Re-stamp the latest broadcast decision with the market state in force
    /// while it can bind. Prices are chosen from the snapshot taken before
    /// anyone repriced, so a decision's recorded observation would otherwise
    /// describe the rival's *previous* price whenever both sides moved in the
    /// same tick — and those are exactly the ticks that decide who wins.
    /// Settlements are experiences about the joint prices drivers actually
    /// compared, so the observation is rewritten once every station due this
    /// tick has posted.
    pub fn restate_public(&mut self, view: &MarketView, own: u32) -> Result<()> {
        if self.is_personalized() || !self.training {
            return Ok(());
        }
        let bounds = self.bounds();
        if let Some(offer) = self.current.as_mut() {
            offer.state = build_observation(&self.info_set, view, own, None, bounds)?;
        }
        Ok(())
    }

    /// Quote one driver a personal price from the market snapshot and the
    /// charge the driver would have left on arrival here. Replaces any
    /// earlier offer to the same driver — only the latest quote binds.
    ///
    /// Whether a driver's quotes explore is decided once, at the first offer
    /// of the driver's episode, and the drawn price then persists until the
    /// driver settles. Greedy episodes re-evaluate the greedy choice against
    /// each fresh snapshot. Re-rolling the exploration dice on every refresh
    /// would let a patient driver wait out high quotes and commit on the
    /// cheapest of dozens of draws, so priced-up offers would almost never
    /// bind and their values could never be learned.
    pub fn offer_for_ev(
        &mut self,
        view: &MarketView,
        own: u32,
        ev: u32,
        ev_esoc: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if !self.is_personalized() {
            return Err(SimError::Domain(
                "broadcast policies quote one public price for all drivers".into(),
            ));
        }
        let state = build_observation(&self.info_set, view, own, Some(ev_esoc), self.bounds())?;
        let (action, explored) = match self.pending.get(&ev) {
            Some(prior) if prior.explored => (prior.action, true),
            Some(_) => (self.learner.greedy_action(&state)?, false),
            None => {
                let explored = rng.gen::<f64>() < self.epsilon();
                let action = if explored {
                    rng.gen_range(0..self.actions.len())
                } else {
                    self.learner.greedy_action(&state)?
                };
                (action, explored)
            }
        };
        let price = self.actions.price(action);
        self.pending.insert(
            ev,
            PendingOffer {
                state,
                action,
                price,
                explored,
            },
        );
        Ok(price)
    }

    /// Settle a driver's outcome against the offer that bound at commitment
    /// time: record it as a terminal experience and run one training update.
    /// Returns the update's loss when one ran. Frozen policies only discard
    /// the offer.
    pub fn resolve(&mut self, ev: u32, reward: f64, rng: &mut impl Rng) -> Result<Option<f64>> {
        let offer = if self.is_personalized() {
            self.pending.remove(&ev)
        } else {
            self.current.clone()
        };
        let Some(offer) = offer else {
            return Ok(None);
        };
        if !self.training {
            return Ok(None);
        }
        self.learner.record(Transition {
            next_state: offer.state.clone(),
            state: offer.state,
            action: offer.action,
            reward,
            terminal: true,
        });
        self.learner.train_step(rng)
    }

    /// Drop every outstanding offer (e.g. when the market resets for a new
    /// day and yesterday's drivers are gone).
    pub fn clear_offers(&mut self) {
        self.current = None;
        self.pending.clear();
    }

    pub fn pending_offer(&self, ev: u32) -> Option<&PendingOffer> {
        self.pending.get(&ev)
    }

    pub fn current_offer(&self) -> Option<&PendingOffer> {
        self.current.as_ref()
    }

    /// Serializable snapshot of the trained value function.
    pub fn to_saved(&self) -> SavedPolicy {
        SavedPolicy {
            info_set: self.info_set.clone(),
            price_min: self.actions.min_price(),
            price_max: self.actions.max_price(),
            n_levels: self.actions.len(),
            network: self.learner.network().cloned(),
            table: self.learner.table().cloned(),
        }
    }

    /// Rebuild a frozen policy from a snapshot.
    pub fn from_saved(
        saved: SavedPolicy,
        config: QLearnerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let actions = ActionSpace::uniform(saved.price_min, saved.price_max, saved.n_levels)?;
        let mut cfg = config;
        let input_dim = match (&saved.network, &saved.table) {
            (Some(net), _) => {
                cfg.approx = ApproxKind::Net;
                net.input_dim
            }
            (None, Some(t)) => {
                cfg.approx = ApproxKind::Table { bins: t.bins };
                1
            }
            (None, None) => {
                return Err(SimError::Config(
                    "saved policy holds neither a network nor a table".into(),
                ))
            }
        };
        let mut learner = QLearner::new(cfg, input_dim, actions.len(), rng)?;
        if let Some(net) = saved.network {
            learner.load_network(net)?;
        } else if let Some(table) = saved.table {
            learner.load_table(table)?;
        }
        learner.freeze();
        let mut policy = LearnedPolicy::new(learner, saved.info_set, actions);
        policy.training = false;
        Ok(policy)
    }
}

/// Portable snapshot of a learned policy: its information set, price grid,
/// and value function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedPolicy {
    pub info_set: InfoSet,
    pub price_min: f64,
    pub price_max: f64,
    pub n_levels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<crate::nn::Network>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<QTable>,
}

/// How a station sets prices.
#[derive(Debug, Clone)]
pub enum StationPolicy {
    /// Constant posted price.
    Fixed { price: f64 },
    /// Uniformly random grid price at every refresh.
    RandomPublic,
    /// Undercut the cheapest rival by `cut`, down to the grid floor.
    Bertrand { cut: f64 },
    /// Q-learning policy, broadcast or personalized.
    Learned(Box<LearnedPolicy>),
}

impl StationPolicy {
    pub fn learned(&self) -> Option<&LearnedPolicy> {
        match self {
            StationPolicy::Learned(p) => Some(p),
            _ => None,
        }
    }

    pub fn learned_mut(&mut self) -> Option<&mut LearnedPolicy> {
        match self {
            StationPolicy::Learned(p) => Some(p),
            _ => None,
        }
    }

    /// Whether this policy quotes per-driver prices instead of a public one.
    pub fn is_personalized(&self) -> bool {
        self.learned().is_some_and(LearnedPolicy::is_personalized)
    }

    /// New public price at a refresh tick; `None` when this policy only
    /// quotes per-driver prices. `grid` supplies the market's price levels
    /// and bounds for the non-learned strategies.
    pub fn refresh_public(
        &mut self,
        view: &MarketView,
        own: u32,
        grid: &ActionSpace,
        rng: &mut impl Rng,
    ) -> Result<Option<f64>> {
        match self {
            StationPolicy::Fixed { price } => Ok(Some(*price)),
            StationPolicy::RandomPublic => {
                let level = rng.gen_range(0..grid.len());
                Ok(Some(grid.price(level)))
            }
            StationPolicy::Bertrand { cut } => {
                let own_view = view.station(own).ok_or_else(|| {
                    SimError::Domain(format!("station {own} missing from market view"))
                })?;
                let own_price = own_view.public_price.unwrap_or_else(|| grid.max_price());
                Ok(Some(match view.min_competitor_price(own) {
                    Some(rival) => bertrand_step(own_price, rival, *cut, grid.min_price()),
                    None => own_price,
                }))
            }
            StationPolicy::Learned(p) => {
                if p.is_personalized() {
                    Ok(None)
                } else {
                    p.refresh_public(view, own, rng).map(Some)
                }
            }
        }
    }

    /// Personal offer for one driver; `None` for public-price policies.
    pub fn offer_for_ev(
        &mut self,
        view: &MarketView,
        own: u32,
        ev: u32,
        ev_esoc: f64,
        rng: &mut impl Rng,
    ) -> Result<Option<f64>> {
        match self {
            StationPolicy::Learned(p) if p.is_personalized() => {
                p.offer_for_ev(view, own, ev, ev_esoc, rng).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Re-stamp a learning broadcast decision with the post-reprice market
    /// state (no-op for every other kind of policy).
    pub fn restate_public(&mut self, view: &MarketView, own: u32) -> Result<()> {
        if let StationPolicy::Learned(p) = self {
            p.restate_public(view, own)?;
        }
        Ok(())
    }

    /// Settle a driver's outcome (no-op for non-learning policies).
    pub fn resolve(&mut self, ev: u32, reward: f64, rng: &mut impl Rng) -> Result<()> {
        if let StationPolicy::Learned(p) = self {
            p.resolve(ev, reward, rng)?;
        }
        Ok(())
    }

    /// Drop outstanding offers (no-op for non-learning policies).
    pub fn clear_offers(&mut self) {
        if let StationPolicy::Learned(p) = self {
            p.clear_offers();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::StationView;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn undercutting_beats_the_cheapest_rival_by_one_cut() {
        assert_relative_eq!(bertrand_step(0.50, 0.40, 0.01, 0.35), 0.39);
        // Already strictly cheaper: hold.
        assert_eq!(bertrand_step(0.38, 0.45, 0.01, 0.35), 0.38);
        // Tie counts as undercut territory.
        assert_relative_eq!(bertrand_step(0.45, 0.45, 0.01, 0.35), 0.44);
        // Floor is assigned exactly, not approached.
        assert_eq!(bertrand_step(0.355, 0.355, 0.01, 0.35), 0.35);
        assert_eq!(bertrand_step(0.35, 0.35, 0.01, 0.35), 0.35);
    }

    #[test]
    fn alternating_undercutting_collapses_exactly_to_the_floor_and_stays() {
        let (mut a, mut b) = (0.55_f64, 0.55_f64);
        for _ in 0..60 {
            a = bertrand_step(a, b, 0.01, 0.35);
            b = bertrand_step(b, a, 0.01, 0.35);
        }
        assert_eq!(a, 0.35);
        assert_eq!(b, 0.35);
        // Absorbing: further rounds do not move either price.
        a = bertrand_step(a, b, 0.01, 0.35);
        b = bertrand_step(b, a, 0.01, 0.35);
        assert_eq!((a, b), (0.35, 0.35));
    }

    fn duopoly_view(own_price: Option<f64>, rival_price: Option<f64>) -> MarketView {
        MarketView {
            stations: vec![
                StationView {
                    id: 0,
                    public_price: own_price,
                    free_slots: 4,
                    slots: 4,
                },
                StationView {
                    id: 1,
                    public_price: rival_price,
                    free_slots: 4,
                    slots: 4,
                },
            ],
        }
    }

    fn grid() -> ActionSpace {
        ActionSpace::uniform(0.35, 0.55, 21).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn fixed_and_bertrand_policies_post_expected_prices() {
        let mut fixed = StationPolicy::Fixed { price: 0.52 };
        let view = duopoly_view(Some(0.52), Some(0.40));
        let p = fixed
            .refresh_public(&view, 0, &grid(), &mut rng())
            .unwrap()
            .unwrap();
        assert_eq!(p, 0.52);

        let mut bert = StationPolicy::Bertrand { cut: 0.01 };
        let p = bert
            .refresh_public(&view, 0, &grid(), &mut rng())
            .unwrap()
            .unwrap();
        assert_relative_eq!(p, 0.39);
        // No rival posts a price: hold the current one.
        let solo = duopoly_view(Some(0.52), None);
        let p = bert
            .refresh_public(&solo, 0, &grid(), &mut rng())
            .unwrap()
            .unwrap();
        assert_eq!(p, 0.52);
    }

    #[test]
    fn random_public_prices_stay_on_the_grid_and_in_bounds() {
        let mut policy = StationPolicy::RandomPublic;
        let g = grid();
        let view = duopoly_view(None, None);
        let mut r = rng();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..300 {
            let p = policy
                .refresh_public(&view, 0, &g, &mut r)
                .unwrap()
                .unwrap();
            let level = g.nearest(p);
            assert_eq!(g.price(level), p, "price must sit exactly on the grid");
            seen.insert(level);
        }
        assert!(seen.len() > 15, "draws should cover most of the grid");
    }

    fn learned(info_set: InfoSet) -> LearnedPolicy {
        let cfg = QLearnerConfig {
            approx: ApproxKind::Table { bins: 4 },
            batch_size: 1,
            alpha: 1.0,
            gamma: 0.0,
            ..QLearnerConfig::default()
        };
        let learner = QLearner::new(cfg, 1, 21, &mut rng()).unwrap();
        LearnedPolicy::new(learner, info_set, grid())
    }

    #[test]
    fn broadcast_policy_credits_every_settlement_to_its_latest_decision() {
        let mut p = learned(InfoSet::prices_only());
        let view = duopoly_view(None, Some(0.45));
        let mut r = rng();
        let price = p.refresh_public(&view, 0, &mut r).unwrap();
        let offer = p.current_offer().unwrap().clone();
        assert_eq!(offer.price, price);

        // Two different drivers settle against the same broadcast decision.
        p.resolve(3, 30.4, &mut r).unwrap();
        p.resolve(9, 0.0, &mut r).unwrap();
        assert_eq!(p.learner.replay_len(), 2);
        assert_eq!(p.learner.updates(), 2);
        assert!(p.current_offer().is_some(), "broadcast offers persist");
    }

    #[test]
    fn restating_a_broadcast_decision_records_the_prices_in_force() {
        let mut p = learned(InfoSet::prices_only());
        let stale = duopoly_view(None, Some(0.45));
        let mut r = rng();
        let price = p.refresh_public(&stale, 0, &mut r).unwrap();
        let before = p.current_offer().unwrap().state.clone();
        // The rival repriced in the same tick: drivers will compare against
        // 0.35, so the experience must be filed under that state.
        let fresh = duopoly_view(Some(price), Some(0.35));
        p.restate_public(&fresh, 0).unwrap();
        let offer = p.current_offer().unwrap();
        assert_eq!(offer.price, price, "the decision itself is unchanged");
        assert_ne!(offer.state, before);
        assert_eq!(offer.state, vec![0.0]);
        // Frozen policies record nothing, so there is nothing to restate.
        p.training = false;
        p.restate_public(&duopoly_view(Some(price), Some(0.55)), 0)
            .unwrap();
        assert_eq!(p.current_offer().unwrap().state, vec![0.0]);
    }

    #[test]
    fn personalized_policy_tracks_one_binding_offer_per_driver() {
        let mut p = learned(InfoSet::prices_and_esoc());
        let view = duopoly_view(None, Some(0.45));
        let mut r = rng();
        p.offer_for_ev(&view, 0, 3, 0.10, &mut r).unwrap();
        let first = p.pending_offer(3).unwrap().clone();
        // A fresh quote replaces the old one; only the latest binds.
        p.offer_for_ev(&view, 0, 3, 0.60, &mut r).unwrap();
        let second = p.pending_offer(3).unwrap().clone();
        assert_ne!(first.state, second.state);

        p.resolve(3, 12.0, &mut r).unwrap();
        assert!(p.pending_offer(3).is_none(), "settled offers are consumed");
        assert_eq!(p.learner.replay_len(), 1);
        // Settling a driver with no outstanding offer is a quiet no-op.
        p.resolve(99, 5.0, &mut r).unwrap();
        assert_eq!(p.learner.replay_len(), 1);
    }

    #[test]
    fn frozen_policies_quote_greedily_and_never_learn() {
        let mut p = learned(InfoSet::prices_and_esoc());
        p.training = false;
        let view = duopoly_view(None, Some(0.45));
        let mut r = rng();
        p.offer_for_ev(&view, 0, 1, 0.5, &mut r).unwrap();
        p.resolve(1, 100.0, &mut r).unwrap();
        assert_eq!(p.learner.replay_len(), 0);
        assert_eq!(p.learner.updates(), 0);
        // Untrained frozen table: greedy tie resolves to the cheapest level.
        let offer = p.offer_for_ev(&view, 0, 2, 0.5, &mut r).unwrap();
        assert_eq!(offer, 0.35);
    }

    #[test]
    fn mode_mismatched_quoting_is_rejected() {
        let mut public = learned(InfoSet::prices_only());
        let mut personal = learned(InfoSet::prices_and_esoc());
        let view = duopoly_view(None, Some(0.45));
        let mut r = rng();
        assert!(public.offer_for_ev(&view, 0, 1, 0.5, &mut r).is_err());
        assert!(personal.refresh_public(&view, 0, &mut r).is_err());
        // The facade maps personalized "refresh" to no public price.
        let mut facade = StationPolicy::Learned(Box::new(learned(InfoSet::prices_and_esoc())));
        assert!(facade
            .refresh_public(&view, 0, &grid(), &mut r)
            .unwrap()
            .is_none());
        assert!(facade.is_personalized());
    }

    #[test]
    fn saved_policies_round_trip_and_come_back_frozen() {
        let mut p = learned(InfoSet::prices_and_esoc());
        let view = duopoly_view(None, Some(0.45));
        let mut r = rng();
        // Teach one state so the round trip carries real values.
        p.offer_for_ev(&view, 0, 1, 0.9, &mut r).unwrap();
        p.resolve(1, 24.0, &mut r).unwrap();

        let saved = p.to_saved();
        let json = serde_json::to_string(&saved).unwrap();
        let back: SavedPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, saved);

        let restored =
            LearnedPolicy::from_saved(back, QLearnerConfig::default(), &mut rng()).unwrap();
        assert!(!restored.training);
        assert_eq!(restored.learner.epsilon, 0.0);
        assert_eq!(
            restored.learner.table().unwrap(),
            p.learner.table().unwrap()
        );
        assert_eq!(restored.actions.len(), 21);
    }
}
