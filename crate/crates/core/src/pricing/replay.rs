//! Bounded experience store with uniform sampling.

use std::collections::VecDeque;

use rand::Rng;

/// One learning experience: the observation and action of an offer, the
/// realized reward, and the observation when the outcome resolved. Terminal
/// transitions (the EV charged or passed) ignore `next_state` when targets
/// are computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// FIFO replay buffer: once full, the oldest experience makes room.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    buf: VecDeque<Transition>,
}

impl ReplayMemory {
    /// Buffer holding at most `capacity` transitions (at least 1).
    pub fn new(capacity: usize) -> Self {
        ReplayMemory {
            capacity: capacity.max(1),
            buf: VecDeque::with_capacity(capacity.max(1).min(16_384)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }

    /// Uniform sample of `n` stored transitions (with replacement).
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Transition> {
        (0..n)
            .filter_map(|_| {
                if self.buf.is_empty() {
                    None
                } else {
                    Some(self.buf[rng.gen_range(0..self.buf.len())].clone())
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(tag: usize) -> Transition {
        Transition {
            state: vec![tag as f64],
            action: tag,
            reward: 0.0,
            next_state: vec![],
            terminal: true,
        }
    }

    #[test]
    fn fifo_eviction_keeps_the_newest() {
        let mut m = ReplayMemory::new(3);
        for i in 0..5 {
            m.push(t(i));
        }
        assert_eq!(m.len(), 3);
        let kept: Vec<usize> = m.iter().map(|t| t.action).collect();
        assert_eq!(kept, vec![2, 3, 4]);
    }

    #[test]
    fn sampling_is_uniform_within_tolerance() {
        let mut m = ReplayMemory::new(100);
        for i in 0..100 {
            m.push(t(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = vec![0u32; 100];
        for _ in 0..320 {
            for s in m.sample(32, &mut rng) {
                counts[s.action] += 1;
            }
        }
        // 10240 draws over 100 slots: expect 102.4 each; chi-square with
        // 99 dof has 0.999 quantile ~ 148.2.
        let expected = 10_240.0 / 100.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = f64::from(c) - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 148.2, "chi-square statistic {chi2}");
    }

    #[test]
    fn sample_from_empty_buffer_is_empty() {
        let m = ReplayMemory::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(m.sample(5, &mut rng).is_empty());
    }
}
