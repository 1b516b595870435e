//! Episode storage and uniform sampling of contiguous training windows.
//!
//! Alignment: step `i` of an episode is the triple `(o[i+1], a[i], r[i+1])`.
//! The action `a[i]` is executed from `o[i]` and produces both `o[i+1]` and
//! `r[i+1]`, so a reward always pairs with the observation it arrived with.

mod persist;

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use rand::Rng;

use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::seeding::rng_from;

pub use persist::{load_episode, load_episode_dir, save_episode, EPISODE_MAGIC};

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `o[0..=T]`.
    pub observations: Vec<Observation>,
    /// `a[0..T]`.
    pub actions: Vec<Action>,
    /// `r[1..=T]`, stored at index `t - 1`.
    pub rewards: Vec<f64>,
    /// 1.0 until terminal.
    pub discounts: Vec<f64>,
}

impl Episode {
    /// Starts an episode from its reset observation.
    pub fn start(first: Observation) -> Self {
        Self {
            observations: vec![first],
            actions: Vec::new(),
            rewards: Vec::new(),
            discounts: Vec::new(),
        }
    }

    pub fn push(&mut self, action: Action, obs: Observation, reward: f64, terminal: bool) {
        self.actions.push(action);
        self.observations.push(obs);
        self.rewards.push(reward);
        self.discounts.push(if terminal { 0.0 } else { 1.0 });
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn obs_shape(&self) -> Option<[usize; 3]> {
        self.observations.first().map(Observation::shape)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        if self.observations.len() != t + 1 {
            return Err(Error::MalformedEpisode(format!(
                "{} observations for {t} actions",
                self.observations.len()
            )));
        }
        if self.rewards.len() != t || self.discounts.len() != t {
            return Err(Error::MalformedEpisode(format!(
                "{} rewards and {} discounts for {t} actions",
                self.rewards.len(),
                self.discounts.len()
            )));
        }
        let shape = self.observations[0].shape();
        if self.observations.iter().any(|o| o.shape() != shape) {
            return Err(Error::MalformedEpisode(
                "observations differ in shape".into(),
            ));
        }
        Ok(())
    }
}

/// `B` windows of `L` consecutive steps, flattened batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub length: usize,
    pub obs_shape: [usize; 3],
    /// `[B, L, H*W*C]` values in `[0, 1]`.
    pub observations: Vec<f32>,
    /// `[B, L, ACTION_DIM]`, the action that produced each observation.
    pub actions: Vec<f64>,
    /// `[B, L]`.
    pub rewards: Vec<f64>,
    /// `[B, L]`.
    pub discounts: Vec<f64>,
    /// `(episode_id, start_index)` per window.
    pub provenance: Vec<(u64, usize)>,
}

impl SequenceBatch {
    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    /// Builds a batch from explicit windows. Used by tests and evaluation.
    pub fn from_windows(episodes: &[(u64, &Episode, usize)], length: usize) -> Result<Self> {
        let shape = episodes
            .first()
            .and_then(|(_, e, _)| e.obs_shape())
            .ok_or(Error::NoEligibleSequence(length))?;
        let mut out = Self {
            batch: episodes.len(),
            length,
            obs_shape: shape,
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            discounts: Vec::new(),
            provenance: Vec::new(),
        };
        for &(id, ep, start) in episodes {
            if start + length > ep.len() {
                return Err(Error::NoEligibleSequence(length));
            }
            for i in start..start + length {
                ep.observations[i + 1].extend_f32(&mut out.observations);
                out.actions.extend_from_slice(&ep.actions[i].0);
                out.rewards.push(ep.rewards[i]);
                out.discounts.push(ep.discounts[i]);
            }
            out.provenance.push((id, start));
        }
        Ok(out)
    }

    /// Random contents of the right shape, for tests and benchmarks.
    pub fn synthetic(batch: usize, length: usize, image_size: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let n = batch * length;
        let obs_shape = [image_size, image_size, 3];
        let frame: usize = obs_shape.iter().product();
        Self {
            batch,
            length,
            obs_shape,
            observations: (0..n * frame).map(|_| rng.random::<f32>()).collect(),
            actions: (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rewards: (0..n).map(|_| rng.random_range(0.0..4.0)).collect(),
            discounts: vec![1.0; n],
            provenance: (0..batch).map(|b| (b as u64, 0)).collect(),
        }
    }
}

/// FIFO episode store with a capacity measured in transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity_steps: usize,
    episodes: VecDeque<(u64, Arc<Episode>)>,
    total_steps: usize,
    next_id: u64,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize) -> Self {
        Self {
            capacity_steps,
            episodes: VecDeque::new(),
            total_steps: 0,
            next_id: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = (u64, &Episode)> {
        self.episodes.iter().map(|(id, e)| (*id, e.as_ref()))
    }

    /// Stores the episode and evicts the oldest ones while over capacity.
    /// Returns the id assigned to the new episode.
    pub fn add_episode(&mut self, episode: Episode) -> Result<u64> {
        episode.validate()?;
        if let Some((_, first)) = self.episodes.front() {
            if first.obs_shape() != episode.obs_shape() {
                return Err(Error::MalformedEpisode(
                    "observation shape differs from stored episodes".into(),
                ));
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.total_steps += episode.len();
        self.episodes.push_back((id, Arc::new(episode)));
        while self.total_steps > self.capacity_steps && self.episodes.len() > 1 {
            if let Some((_, old)) = self.episodes.pop_front() {
                self.total_steps -= old.len();
            }
        }
        Ok(id)
    }

    /// Cheap consistent view of the current contents.
    pub fn snapshot(&self) -> Vec<(u64, Arc<Episode>)> {
        self.episodes.iter().cloned().collect()
    }

    pub fn sample_sequences(&self, batch: usize, length: usize, seed: u64) -> Result<SequenceBatch> {
        sample_from(&self.snapshot(), batch, length, seed)
    }
}

/// Draws `batch` windows uniformly over every valid `(episode, start)` pair.
pub fn sample_from(
    episodes: &[(u64, Arc<Episode>)],
    batch: usize,
    length: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    if length == 0 {
        return Err(Error::NoEligibleSequence(length));
    }
    let counts: Vec<usize> = episodes
        .iter()
        .map(|(_, e)| (e.len() + 1).saturating_sub(length))
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoEligibleSequence(length));
    }
    let mut rng = rng_from(seed);
    let mut picks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut u = rng.random_range(0..total);
        let mut k = 0;
        while u >= counts[k] {
            u -= counts[k];
            k += 1;
        }
        picks.push((episodes[k].0, episodes[k].1.as_ref(), u));
    }
    SequenceBatch::from_windows(&picks, length)
}

/// Replay shared between one collecting writer and one training reader.
#[derive(Debug, Clone)]
pub struct SharedReplay(Arc<RwLock<ReplayBuffer>>);

impl SharedReplay {
    pub fn new(capacity_steps: usize) -> Self {
        Self(Arc::new(RwLock::new(ReplayBuffer::new(capacity_steps))))
    }

    pub fn add_episode(&self, episode: Episode) -> Result<u64> {
        self.0.write().expect("replay lock").add_episode(episode)
    }

    pub fn sample_sequences(&self, batch: usize, length: usize, seed: u64) -> Result<SequenceBatch> {
        let snapshot = self.0.read().expect("replay lock").snapshot();
        sample_from(&snapshot, batch, length, seed)
    }

    pub fn steps(&self) -> usize {
        self.0.read().expect("replay lock").steps()
    }
}
