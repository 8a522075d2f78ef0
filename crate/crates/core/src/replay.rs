//! Episode-structured replay with uniform fixed-length subsequence sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::{Error, Result};

/// One stored step. `prev_action` is the action that led here (absent at
/// the start of an episode); `reward` is the task reward received on
/// arrival; `cont` is false exactly on terminal steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<u8>,
    pub prev_action: Option<usize>,
    pub reward: Option<f64>,
    pub cont: bool,
    pub first: bool,
}

impl Transition {
    /// Stored bytes, used for the capacity bound.
    pub fn bytes(&self) -> usize {
        self.obs.len() + std::mem::size_of::<Self>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// Reward-free collection; any reward value is a contract violation.
    Forbidden,
    /// Every transition must carry a reward.
    Required,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    episodes: VecDeque<Vec<Transition>>,
    size: usize,
    capacity: usize,
    mode: RewardMode,
    read_only: bool,
    writes: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, mode: RewardMode) -> Self {
        Self { episodes: VecDeque::new(), size: 0, capacity: capacity.max(1), mode, read_only: false, writes: 0 }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn mode(&self) -> RewardMode {
        self.mode
    }

    /// Total transitions ever written.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn set_read_only(&mut self, read_only: bool) {
        self.read_only = read_only;
    }

    pub fn bytes(&self) -> usize {
        self.episodes.iter().flatten().map(Transition::bytes).sum()
    }

    pub fn append(&mut self, t: Transition) -> Result<()> {
        if self.read_only {
            return Err(Error::Contract("append to a read-only replay buffer".into()));
        }
        match (self.mode, t.reward) {
            (RewardMode::Forbidden, Some(_)) => {
                return Err(Error::Contract("reward-free replay received a task reward".into()));
            }
            (RewardMode::Required, None) => {
                return Err(Error::Contract("task replay received a transition without reward".into()));
            }
            _ => {}
        }
        if t.first || self.episodes.is_empty() {
            self.episodes.push_back(Vec::new());
        }
        self.episodes.back_mut().expect("an episode is open").push(t);
        self.size += 1;
        self.writes += 1;
        while self.size > self.capacity {
            if self.episodes.len() > 1 {
                let old = self.episodes.pop_front().expect("non-empty");
                self.size -= old.len();
            } else {
                // A single episode longer than the capacity loses its oldest steps.
                self.episodes[0].remove(0);
                self.size -= 1;
            }
        }
        Ok(())
    }

    /// `(episode, offset)` pairs drawn uniformly over every valid start.
    pub fn sample_positions<R: Rng + ?Sized>(&self, batch: usize, len: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
        let counts: Vec<usize> = self.episodes.iter().map(|e| (e.len() + 1).saturating_sub(len)).collect();
        let total: usize = counts.iter().sum();
        if total == 0 || len == 0 {
            return Err(Error::InsufficientData(format!(
                "no episode holds {len} steps ({} episodes, {} steps stored)",
                self.episodes.len(),
                self.size
            )));
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut k = rng.gen_range(0..total);
            let mut ep = 0;
            while k >= counts[ep] {
                k -= counts[ep];
                ep += 1;
            }
            out.push((ep, k));
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, len: usize, rng: &mut R) -> Result<Vec<&[Transition]>> {
        let pos = self.sample_positions(batch, len, rng)?;
        Ok(pos.into_iter().map(|(e, o)| &self.episodes[e][o..o + len]).collect())
    }

    pub fn can_sample(&self, len: usize) -> bool {
        self.episodes.iter().any(|e| e.len() >= len)
    }
}
