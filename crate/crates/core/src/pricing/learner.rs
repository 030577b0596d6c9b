//! Replay Q-learning over either the neural approximator or a discretized
//! lookup table. The table doubles as a cross-check oracle for the net.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::nn::{Network, QSample};
use crate::pricing::replay::{ReplayMemory, Transition};

/// Value-function representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ApproxKind {
    /// Neural net: observation in, one value per price level out.
    Net,
    /// Lookup table over observations discretized into `bins` per dimension.
    Table { bins: usize },
}

/// Hyperparameters of a learning pricing policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QLearnerConfig {
    /// Learning rate (SGD step for the net, blend factor for the table).
    pub alpha: f64,
    /// Discount factor on future value.
    pub gamma: f64,
    /// Exploration rate on day zero.
    pub epsilon0: f64,
    /// Per-day multiplicative exploration decay.
    pub epsilon_decay: f64,
    /// Exploration never decays below this.
    pub epsilon_floor: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Updates between refreshes of the frozen bootstrap target.
    pub target_clone_period: u64,
    /// Training stops once consecutive daily mean losses differ by at most
    /// this much.
    pub stop_lambda: f64,
    /// Hidden width of the neural approximator.
    pub hidden_dim: usize,
    pub approx: ApproxKind,
    /// Hard cap on training days when the loss plateau never arrives.
    pub max_train_days: u32,
    /// Initial value estimate for every (state, action) pair. Setting this
    /// above the largest reachable return makes the greedy policy itself
    /// sweep through untried prices until their real values are learned,
    /// which explores regimes that small random-action rates never reach.
    pub optimistic_init: f64,
}

impl Default for QLearnerConfig {
    fn default() -> Self {
        QLearnerConfig {
            alpha: 0.01,
            gamma: 0.99,
            epsilon0: 0.2,
            epsilon_decay: 0.99,
            epsilon_floor: 0.01,
            replay_capacity: 10_000,
            batch_size: 32,
            target_clone_period: 500,
            stop_lambda: 0.005,
            hidden_dim: 128,
            approx: ApproxKind::Net,
            max_train_days: 10,
            optimistic_init: 0.0,
        }
    }
}

/// Exploration rate in effect on a given (zero-based) training day.
pub fn epsilon_for_day(cfg: &QLearnerConfig, day: u32) -> f64 {
    (cfg.epsilon0 * cfg.epsilon_decay.powi(day as i32)).max(cfg.epsilon_floor)
}

/// Q-table keyed by the discretized observation; rows default to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub bins: usize,
    pub n_actions: usize,
    /// Value every row starts from before any update touches it.
    #[serde(default)]
    pub init: f64,
    /// Serialized as key/row pairs: JSON maps only take string keys.
    #[serde(with = "table_entries")]
    pub entries: BTreeMap<Vec<u16>, Vec<f64>>,
}

mod table_entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Vec<u16>, Vec<f64>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Vec<u16>, Vec<f64>>, D::Error> {
        let pairs: Vec<(Vec<u16>, Vec<f64>)> = Vec::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

impl QTable {
    pub fn new(bins: usize, n_actions: usize) -> Self {
        QTable {
            bins: bins.max(1),
            n_actions,
            init: 0.0,
            entries: BTreeMap::new(),
        }
    }

    pub fn with_init(mut self, init: f64) -> Self {
        self.init = init;
        self
    }

    /// Discretize a normalized observation into its bin key.
    pub fn key(&self, state: &[f64]) -> Vec<u16> {
        state
            .iter()
            .map(|v| {
                let v = v.clamp(0.0, 1.0);
                let b = (v * self.bins as f64) as usize;
                b.min(self.bins - 1) as u16
            })
            .collect()
    }

    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        self.entries
            .get(&self.key(state))
            .cloned()
            .unwrap_or_else(|| vec![self.init; self.n_actions])
    }

    fn row_mut(&mut self, state: &[f64]) -> &mut Vec<f64> {
        let key = self.key(state);
        let n = self.n_actions;
        let init = self.init;
        self.entries.entry(key).or_insert_with(|| vec![init; n])
    }
}

#[derive(Debug, Clone)]
enum QFunction {
    Net { model: Network, target: Network },
    Table { model: QTable, target: QTable },
}

/// A replay Q-learner: value function, frozen bootstrap target, experience
/// buffer, and exploration state.
#[derive(Debug, Clone)]
pub struct QLearner {
    pub config: QLearnerConfig,
    q: QFunction,
    replay: ReplayMemory,
    /// Current exploration rate; zero once frozen.
    pub epsilon: f64,
    n_actions: usize,
    updates: u64,
    day_loss_sum: f64,
    day_loss_count: u64,
}

impl QLearner {
    /// Fresh learner for observations of length `input_dim` choosing among
    /// `n_actions` price levels. Net weights are drawn from `rng`.
    pub fn new(
        config: QLearnerConfig,
        input_dim: usize,
        n_actions: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_actions == 0 {
            return Err(SimError::Domain("learner needs at least one action".into()));
        }
        let q = match config.approx {
            ApproxKind::Net => {
                let mut model = Network::new(input_dim, config.hidden_dim, n_actions, rng);
                for b in model.b2.iter_mut() {
                    *b += config.optimistic_init;
                }
                let target = model.clone();
                QFunction::Net { model, target }
            }
            ApproxKind::Table { bins } => {
                let model = QTable::new(bins, n_actions).with_init(config.optimistic_init);
                let target = model.clone();
                QFunction::Table { model, target }
            }
        };
        Ok(QLearner {
            epsilon: config.epsilon0,
            replay: ReplayMemory::new(config.replay_capacity),
            config,
            q,
            n_actions,
            updates: 0,
            day_loss_sum: 0.0,
            day_loss_count: 0,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Current value estimates for a state.
    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        match &self.q {
            QFunction::Net { model, .. } => model.forward(state),
            QFunction::Table { model, .. } => Ok(model.q_values(state)),
        }
    }

    fn target_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        match &self.q {
            QFunction::Net { target, .. } => target.forward(state),
            QFunction::Table { target, .. } => Ok(target.q_values(state)),
        }
    }

    /// Snapshot of the frozen target's estimates (stale by design).
    pub fn target_q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.target_values(state)
    }

    /// Highest-value action for a state; ties resolve to the lowest index.
    pub fn greedy_action(&self, state: &[f64]) -> Result<usize> {
        let q = self.q_values(state)?;
        Ok(argmax(&q))
    }

    /// Epsilon-greedy action selection; greedy ties resolve to the lowest
    /// index.
    pub fn select_action(&self, state: &[f64], epsilon: f64, rng: &mut impl Rng) -> Result<usize> {
        if rng.gen::<f64>() < epsilon {
            return Ok(rng.gen_range(0..self.n_actions));
        }
        self.greedy_action(state)
    }

    /// Store an experience.
    pub fn record(&mut self, t: Transition) {
        self.replay.push(t);
    }

    /// One update on an explicit batch: targets are `r` for terminal
    /// transitions and `r + gamma * max_a Q_target(s', a)` otherwise; returns
    /// the pre-update mean squared error on the batch. The frozen target
    /// refreshes every `target_clone_period` updates.
    pub fn q_update(&mut self, batch: &[Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(SimError::Domain("empty transition batch".into()));
        }
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            let tg = if t.terminal {
                t.reward
            } else {
                let next = self.target_values(&t.next_state)?;
                t.reward + self.config.gamma * max_of(&next)
            };
            if !tg.is_finite() {
                return Err(SimError::NumericalDivergence(format!(
                    "non-finite learning target {tg}"
                )));
            }
            targets.push(tg);
        }
        let loss = match &mut self.q {
            QFunction::Net { model, .. } => {
                let samples: Vec<QSample<'_>> = batch
                    .iter()
                    .zip(&targets)
                    .map(|(t, &target)| QSample {
                        input: &t.state,
                        action: t.action,
                        target,
                    })
                    .collect();
                model.grad_step(&samples, self.config.alpha)?
            }
            QFunction::Table { model, .. } => {
                let mut loss = 0.0;
                for (t, &tg) in batch.iter().zip(&targets) {
                    let row = model.row_mut(&t.state);
                    let q = row[t.action];
                    let err = tg - q;
                    loss += err * err;
                    row[t.action] = q + self.config.alpha * err;
                }
                loss / batch.len() as f64
            }
        };
        self.updates += 1;
        self.day_loss_sum += loss;
        self.day_loss_count += 1;
        if self.updates % self.config.target_clone_period == 0 {
            self.clone_target();
        }
        Ok(loss)
    }

    fn clone_target(&mut self) {
        match &mut self.q {
            QFunction::Net { model, target } => *target = model.clone(),
            QFunction::Table { model, target } => *target = model.clone(),
        }
    }

    /// Sample a minibatch from replay and update once. Returns `None` until
    /// the buffer holds a full batch.
    pub fn train_step(&mut self, rng: &mut impl Rng) -> Result<Option<f64>> {
        if self.replay.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.replay.sample(self.config.batch_size, rng);
        self.q_update(&batch).map(Some)
    }

    /// Set the exploration rate for a (zero-based) training day.
    pub fn begin_day(&mut self, day: u32) {
        self.epsilon = epsilon_for_day(&self.config, day);
    }

    /// Mean batch loss accumulated since the last call, if any updates ran.
    pub fn take_day_loss(&mut self) -> Option<f64> {
        let out = if self.day_loss_count > 0 {
            Some(self.day_loss_sum / self.day_loss_count as f64)
        } else {
            None
        };
        self.day_loss_sum = 0.0;
        self.day_loss_count = 0;
        out
    }

    /// Stop exploring; the policy becomes the greedy argmax.
    pub fn freeze(&mut self) {
        self.epsilon = 0.0;
    }

    /// Access the trained net (net mode only), e.g. for serialization.
    pub fn network(&self) -> Option<&Network> {
        match &self.q {
            QFunction::Net { model, .. } => Some(model),
            QFunction::Table { .. } => None,
        }
    }

    /// Access the trained table (table mode only).
    pub fn table(&self) -> Option<&QTable> {
        match &self.q {
            QFunction::Table { model, .. } => Some(model),
            QFunction::Net { .. } => None,
        }
    }

    /// Replace the value function with a previously trained net.
    pub fn load_network(&mut self, net: Network) -> Result<()> {
        if net.output_dim != self.n_actions {
            return Err(SimError::ShapeMismatch(format!(
                "loaded net has {} outputs, learner expects {}",
                net.output_dim, self.n_actions
            )));
        }
        self.q = QFunction::Net {
            target: net.clone(),
            model: net,
        };
        Ok(())
    }

    /// Replace the value function with a previously trained table.
    pub fn load_table(&mut self, table: QTable) -> Result<()> {
        if table.n_actions != self.n_actions {
            return Err(SimError::ShapeMismatch(format!(
                "loaded table has {} actions, learner expects {}",
                table.n_actions, self.n_actions
            )));
        }
        self.q = QFunction::Table {
            target: table.clone(),
            model: table,
        };
        Ok(())
    }
}

/// Index of the maximum value; ties resolve to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_config(alpha: f64, gamma: f64) -> QLearnerConfig {
        QLearnerConfig {
            alpha,
            gamma,
            approx: ApproxKind::Table { bins: 4 },
            batch_size: 1,
            ..QLearnerConfig::default()
        }
    }

    fn terminal(state: Vec<f64>, action: usize, reward: f64) -> Transition {
        Transition {
            next_state: state.clone(),
            state,
            action,
            reward,
            terminal: true,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn tabular_update_matches_blend_arithmetic_exactly() {
        // alpha = 1, gamma = 0: the table adopts the reward outright.
        let mut l = QLearner::new(table_config(1.0, 0.0), 1, 3, &mut rng()).unwrap();
        l.q_update(&[terminal(vec![0.1], 2, 30.4)]).unwrap();
        assert_eq!(l.q_values(&[0.1]).unwrap()[2], 30.4);

        // alpha = 0.01 from zero: exactly alpha * reward.
        let mut l = QLearner::new(table_config(0.01, 0.99), 1, 3, &mut rng()).unwrap();
        l.q_update(&[terminal(vec![0.1], 2, 30.4)]).unwrap();
        assert_eq!(l.q_values(&[0.1]).unwrap()[2], 0.01 * 30.4);
    }

    #[test]
    fn tabular_bootstrap_uses_frozen_target_max() {
        let mut l = QLearner::new(table_config(1.0, 0.5), 1, 2, &mut rng()).unwrap();
        // Teach the target row via two updates and a clone.
        l.q_update(&[terminal(vec![0.9], 0, 10.0)]).unwrap();
        l.q_update(&[terminal(vec![0.9], 1, 4.0)]).unwrap();
        // Force a target refresh.
        let period = l.config.target_clone_period;
        for _ in 2..period {
            l.q_update(&[terminal(vec![0.9], 0, 10.0)]).unwrap();
        }
        assert_eq!(l.updates(), period);
        // Non-terminal transition bootstraps: tg = 2 + 0.5 * max(10, 4) = 7.
        let t = Transition {
            state: vec![0.1],
            action: 1,
            reward: 2.0,
            next_state: vec![0.9],
            terminal: false,
        };
        l.q_update(&[t]).unwrap();
        assert_relative_eq!(l.q_values(&[0.1]).unwrap()[1], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_updates_contract_toward_the_reward() {
        let mut l = QLearner::new(table_config(0.1, 0.0), 1, 1, &mut rng()).unwrap();
        for _ in 0..400 {
            l.q_update(&[terminal(vec![0.5], 0, 30.4)]).unwrap();
        }
        assert_relative_eq!(l.q_values(&[0.5]).unwrap()[0], 30.4, epsilon = 1e-6);
    }

    #[test]
    fn greedy_selection_is_argmax_with_low_index_ties() {
        let mut l = QLearner::new(table_config(1.0, 0.0), 1, 5, &mut rng()).unwrap();
        l.q_update(&[terminal(vec![0.2], 3, 9.0)]).unwrap();
        l.q_update(&[terminal(vec![0.2], 1, 4.0)]).unwrap();
        let mut r = rng();
        for _ in 0..50 {
            assert_eq!(l.select_action(&[0.2], 0.0, &mut r).unwrap(), 3);
        }
        // All-equal values: lowest index wins deterministically.
        let fresh = QLearner::new(table_config(1.0, 0.0), 1, 5, &mut rng()).unwrap();
        assert_eq!(fresh.select_action(&[0.2], 0.0, &mut r).unwrap(), 0);
    }

    #[test]
    fn full_exploration_is_statistically_uniform() {
        let l = QLearner::new(table_config(1.0, 0.0), 1, 21, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(23);
        let n = 10_500u32;
        let mut counts = vec![0u32; 21];
        for _ in 0..n {
            counts[l.select_action(&[0.0], 1.0, &mut r).unwrap()] += 1;
        }
        let expected = f64::from(n) / 21.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = f64::from(c) - expected;
                d * d / expected
            })
            .sum();
        // 20 dof, 0.999 quantile ~ 45.3
        assert!(chi2 < 45.3, "chi-square statistic {chi2}");
    }

    #[test]
    fn epsilon_schedule_decays_to_floor() {
        let cfg = QLearnerConfig::default();
        assert_relative_eq!(epsilon_for_day(&cfg, 0), 0.2);
        assert_relative_eq!(epsilon_for_day(&cfg, 1), 0.2 * 0.99);
        assert_relative_eq!(epsilon_for_day(&cfg, 2), 0.2 * 0.99 * 0.99, epsilon = 1e-12);
        let mut last = 1.0;
        for d in 0..2000 {
            let e = epsilon_for_day(&cfg, d);
            assert!(e <= last + 1e-15);
            assert!(e >= cfg.epsilon_floor);
            last = e;
        }
        assert_relative_eq!(epsilon_for_day(&cfg, 2000), cfg.epsilon_floor);
    }

    #[test]
    fn target_refreshes_only_at_the_clone_period() {
        let mut cfg = table_config(0.5, 0.0);
        cfg.target_clone_period = 5;
        let mut l = QLearner::new(cfg, 1, 2, &mut rng()).unwrap();
        for i in 1..=4 {
            l.q_update(&[terminal(vec![0.3], 0, 8.0)]).unwrap();
            assert_eq!(
                l.target_q_values(&[0.3]).unwrap()[0],
                0.0,
                "target must stay stale after {i} updates"
            );
        }
        l.q_update(&[terminal(vec![0.3], 0, 8.0)]).unwrap();
        let model_q = l.q_values(&[0.3]).unwrap()[0];
        assert_eq!(l.target_q_values(&[0.3]).unwrap()[0], model_q);
    }

    #[test]
    fn train_step_waits_for_a_full_batch() {
        let mut cfg = table_config(1.0, 0.0);
        cfg.batch_size = 4;
        let mut l = QLearner::new(cfg, 1, 2, &mut rng()).unwrap();
        let mut r = rng();
        l.record(terminal(vec![0.1], 0, 1.0));
        assert!(l.train_step(&mut r).unwrap().is_none());
        for _ in 0..3 {
            l.record(terminal(vec![0.1], 0, 1.0));
        }
        assert!(l.train_step(&mut r).unwrap().is_some());
    }

    #[test]
    fn day_loss_is_the_mean_of_batch_losses() {
        let mut l = QLearner::new(table_config(1.0, 0.0), 1, 2, &mut rng()).unwrap();
        assert!(l.take_day_loss().is_none());
        l.q_update(&[terminal(vec![0.1], 0, 2.0)]).unwrap(); // loss 4
        l.q_update(&[terminal(vec![0.1], 0, 2.0)]).unwrap(); // loss 0
        assert_relative_eq!(l.take_day_loss().unwrap(), 2.0);
        assert!(l.take_day_loss().is_none(), "accumulator resets");
    }

    #[test]
    fn net_and_table_agree_on_a_bandit_task() {
        // Deterministic single-state bandit: reward peaks at action 7.
        let reward = |a: usize| 20.0 - (a as f64 - 7.0) * (a as f64 - 7.0);
        let oracle = (0..11).max_by(|&a, &b| reward(a).total_cmp(&reward(b))).unwrap();
        assert_eq!(oracle, 7);

        let state = vec![0.5];
        let mut net_cfg = QLearnerConfig {
            alpha: 0.05,
            gamma: 0.0,
            hidden_dim: 16,
            batch_size: 8,
            ..QLearnerConfig::default()
        };
        net_cfg.replay_capacity = 512;
        let mut table_cfg = table_config(0.2, 0.0);
        table_cfg.batch_size = 8;
        table_cfg.replay_capacity = 512;

        for cfg in [net_cfg, table_cfg] {
            let mut l = QLearner::new(cfg, 1, 11, &mut rng()).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(5);
            for step in 0..4000 {
                let eps = if step < 3000 { 0.5 } else { 0.1 };
                let a = l.select_action(&state, eps, &mut r).unwrap();
                l.record(terminal(state.clone(), a, reward(a)));
                l.train_step(&mut r).unwrap();
            }
            l.freeze();
            let greedy = l.select_action(&state, 0.0, &mut r).unwrap();
            assert_eq!(greedy, oracle, "mode {:?}", l.config.approx);
        }
    }

    #[test]
    fn divergent_targets_are_reported() {
        let mut l = QLearner::new(table_config(1.0, 1.0), 1, 2, &mut rng()).unwrap();
        let t = Transition {
            state: vec![0.1],
            action: 0,
            reward: f64::INFINITY,
            next_state: vec![0.1],
            terminal: true,
        };
        assert!(matches!(
            l.q_update(&[t]),
            Err(SimError::NumericalDivergence(_))
        ));
    }

    #[test]
    fn optimistic_table_prefers_untried_actions_until_real_values_land() {
        let mut cfg = table_config(1.0, 0.0);
        cfg.optimistic_init = 100.0;
        let mut l = QLearner::new(cfg, 1, 3, &mut rng()).unwrap();
        let s = vec![0.5];
        assert_eq!(l.q_values(&s).unwrap(), vec![100.0; 3]);
        // The greedy tie starts at the lowest index; settling it below the
        // initial value hands the greedy choice to the next untried action.
        assert_eq!(l.greedy_action(&s).unwrap(), 0);
        l.q_update(&[Transition {
            state: s.clone(),
            action: 0,
            reward: 40.0,
            next_state: s.clone(),
            terminal: true,
        }])
        .unwrap();
        assert_eq!(l.greedy_action(&s).unwrap(), 1);
        l.q_update(&[Transition {
            state: s.clone(),
            action: 1,
            reward: 70.0,
            next_state: s.clone(),
            terminal: true,
        }])
        .unwrap();
        assert_eq!(l.greedy_action(&s).unwrap(), 2);
        l.q_update(&[Transition {
            state: s.clone(),
            action: 2,
            reward: 10.0,
            next_state: s.clone(),
            terminal: true,
        }])
        .unwrap();
        // Every action tried: the greedy choice is now the best real value.
        assert_eq!(l.greedy_action(&s).unwrap(), 1);
        assert_eq!(l.q_values(&s).unwrap(), vec![40.0, 70.0, 10.0]);
    }
}
