//! MiniManyWorld: push a blue block onto a goal disc while visually similar
//! distractor blocks drift around on their own and the background changes
//! from frame to frame.
//!
//! Positions live in the unit square. Distractors follow scripted sinusoidal
//! drift that never reads the target or the action, so the world's dynamics
//! factor into a task part and a distractor part. Reward depends on the
//! target and goal only.

mod render;

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};

pub use render::{background_frame, render, BackgroundSource, FloatImage, Observation, Renderer};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    Plain,
    WhiteNoise,
    TexturePlaylist,
    FrameDirectory,
}

impl std::str::FromStr for BackgroundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "white_noise" => Ok(Self::WhiteNoise),
            "texture_playlist" => Ok(Self::TexturePlaylist),
            "frame_directory" => Ok(Self::FrameDirectory),
            other => Err(Error::Config(format!("unknown background mode `{other}`"))),
        }
    }
}

impl BackgroundMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::WhiteNoise => "white_noise",
            Self::TexturePlaylist => "texture_playlist",
            Self::FrameDirectory => "frame_directory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub image_size: usize,
    pub n_distractors: usize,
    pub background_mode: BackgroundMode,
    pub texture_seed: u64,
    /// Directory of background frames, used by `frame_directory` mode.
    pub frame_directory: Option<PathBuf>,
    /// Episode length in environment sub-steps.
    pub episode_length: usize,
    pub action_repeat: usize,
    pub move_speed: f64,
    pub goal_radius: f64,
    pub object_half_extent: f64,
    pub goal_alpha: f64,
    pub distractor_amplitude: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_distractors: 1,
            background_mode: BackgroundMode::Plain,
            texture_seed: 0,
            frame_directory: None,
            episode_length: 250,
            action_repeat: 2,
            move_speed: 0.05,
            goal_radius: 0.1,
            object_half_extent: 0.06,
            goal_alpha: 0.5,
            distractor_amplitude: 0.3,
        }
    }
}

impl EnvConfig {
    pub const FIELDS: &'static [&'static str] = &[
        "image_size",
        "n_distractors",
        "background_mode",
        "texture_seed",
        "frame_directory",
        "episode_length",
        "action_repeat",
        "move_speed",
        "goal_radius",
        "object_half_extent",
        "goal_alpha",
        "distractor_amplitude",
    ];

    pub fn validate(&self) -> Result<()> {
        if ![16, 32, 64].contains(&self.image_size) {
            return Err(Error::Config(format!(
                "image_size must be one of 16, 32, 64 (got {})",
                self.image_size
            )));
        }
        if self.n_distractors > 8 {
            return Err(Error::Config(format!(
                "n_distractors must be in [0, 8] (got {})",
                self.n_distractors
            )));
        }
        if self.episode_length == 0 || self.action_repeat == 0 {
            return Err(Error::Config(
                "episode_length and action_repeat must be at least 1".into(),
            ));
        }
        let geometric = [
            ("move_speed", self.move_speed),
            ("goal_radius", self.goal_radius),
            ("object_half_extent", self.object_half_extent),
            ("distractor_amplitude", self.distractor_amplitude),
        ];
        for (name, v) in geometric {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive (got {v})")));
            }
        }
        if self.goal_radius >= 0.5 {
            return Err(Error::Config(format!(
                "goal_radius must be below 0.5 (got {})",
                self.goal_radius
            )));
        }
        if !(0.0..=1.0).contains(&self.goal_alpha) {
            return Err(Error::Config(format!(
                "goal_alpha must be in [0, 1] (got {})",
                self.goal_alpha
            )));
        }
        if self.background_mode == BackgroundMode::FrameDirectory && self.frame_directory.is_none()
        {
            return Err(Error::Config(
                "frame_directory mode needs a frame_directory path".into(),
            ));
        }
        Ok(())
    }

    /// Agent steps per episode once action repeat is applied.
    pub fn agent_steps_per_episode(&self) -> usize {
        self.episode_length.div_ceil(self.action_repeat)
    }
}

/// Velocity command for the target block. Components outside `[-1, 1]` are
/// clipped when applied.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn new(x: f64, y: f64) -> Self {
        Self([x, y])
    }

    pub fn clipped(&self) -> [f64; ACTION_DIM] {
        self.0.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) })
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub target_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub distractor_pos: Vec<[f64; 2]>,
    /// Drift centre of each distractor (its reset position).
    pub distractor_anchor: Vec<[f64; 2]>,
    pub distractor_phase: Vec<f64>,
    /// Phase increment per sub-step, per distractor.
    pub distractor_freq: Vec<f64>,
    pub step_index: usize,
    pub background_frame_index: u64,
    pub rng_state: ChaCha8Rng,
}

impl EnvState {
    pub fn is_done(&self, config: &EnvConfig) -> bool {
        self.step_index >= config.episode_length
    }
}

const Y_FREQ_RATIO: f64 = 1.37;
const BACKGROUND_START_RANGE: u64 = 10_000;

/// Per-object drift frequency and phase offset, derived from the texture seed.
fn distractor_motion(texture_seed: u64, index: usize) -> (f64, f64) {
    let mut rng = rng_from(derive_seed(texture_seed, 0xd15c, index as u64));
    let freq = rng.random_range(0.02..0.08);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (freq, phase)
}

fn drift_position(anchor: [f64; 2], phase: f64, amplitude: f64) -> [f64; 2] {
    [
        (anchor[0] + amplitude * phase.sin()).clamp(0.0, 1.0),
        (anchor[1] + amplitude * (Y_FREQ_RATIO * phase).cos()).clamp(0.0, 1.0),
    ]
}

fn uniform_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

/// Draws a fresh episode start and renders its first frame.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Observation)> {
    let state = reset_state(config, seed);
    let obs = render(&state, config)?;
    Ok((state, obs))
}

/// Draws the initial state without rendering.
pub fn reset_state(config: &EnvConfig, seed: u64) -> EnvState {
    let mut rng = rng_from(seed);
    let target_pos = uniform_point(&mut rng);
    let goal_pos = uniform_point(&mut rng);
    let mut distractor_anchor = Vec::with_capacity(config.n_distractors);
    for _ in 0..config.n_distractors {
        distractor_anchor.push(uniform_point(&mut rng));
    }
    let background_frame_index = rng.random_range(0..BACKGROUND_START_RANGE);
    let (distractor_freq, distractor_phase): (Vec<f64>, Vec<f64>) = (0..config.n_distractors)
        .map(|i| distractor_motion(config.texture_seed, i))
        .unzip();
    // Distractors start exactly at their drawn position; the drift is a
    // displacement relative to the phase at reset.
    let distractor_pos = distractor_anchor.clone();
    let distractor_anchor = distractor_anchor
        .iter()
        .zip(&distractor_phase)
        .map(|(p, &phi)| {
            [
                p[0] - config.distractor_amplitude * phi.sin(),
                p[1] - config.distractor_amplitude * (Y_FREQ_RATIO * phi).cos(),
            ]
        })
        .collect();
    EnvState {
        target_pos,
        goal_pos,
        distractor_pos,
        distractor_anchor,
        distractor_phase,
        distractor_freq,
        step_index: 0,
        background_frame_index,
        rng_state: rng,
    }
}

/// Per-sub-step reward: shaped distance term plus a bonus inside the goal.
pub fn substep_reward(target: [f64; 2], goal: [f64; 2], goal_radius: f64) -> f64 {
    let d = ((target[0] - goal[0]).powi(2) + (target[1] - goal[1]).powi(2)).sqrt();
    let shaped = 1.0 - d / std::f64::consts::SQRT_2;
    let bonus = if d < goal_radius { 1.0 } else { 0.0 };
    shaped + bonus
}

/// Advances the world by one agent step (`action_repeat` sub-steps) without
/// rendering. Returns the summed reward and the done flag.
pub fn advance(config: &EnvConfig, state: &mut EnvState, action: Action) -> Result<(f64, bool)> {
    if state.is_done(config) {
        return Err(Error::EpisodeFinished);
    }
    let a = action.clipped();
    let mut reward = 0.0;
    for _ in 0..config.action_repeat {
        for k in 0..2 {
            state.target_pos[k] = (state.target_pos[k] + config.move_speed * a[k]).clamp(0.0, 1.0);
        }
        for i in 0..state.distractor_pos.len() {
            state.distractor_phase[i] += state.distractor_freq[i];
            state.distractor_pos[i] = drift_position(
                state.distractor_anchor[i],
                state.distractor_phase[i],
                config.distractor_amplitude,
            );
        }
        state.step_index += 1;
        state.background_frame_index += 1;
        reward += substep_reward(state.target_pos, state.goal_pos, config.goal_radius);
        if state.is_done(config) {
            break;
        }
    }
    Ok((reward, state.is_done(config)))
}

/// Applies one agent step and renders the resulting observation.
pub fn step(
    config: &EnvConfig,
    state: &EnvState,
    action: Action,
) -> Result<(EnvState, Observation, f64, bool)> {
    let mut next = state.clone();
    let (reward, done) = advance(config, &mut next, action)?;
    let obs = render(&next, config)?;
    Ok((next, obs, reward, done))
}

/// Stateful wrapper that keeps the background frames loaded between steps.
#[derive(Debug, Clone)]
pub struct MiniManyWorld {
    config: EnvConfig,
    renderer: Renderer,
    state: Option<EnvState>,
}

impl MiniManyWorld {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let renderer = Renderer::new(&config)?;
        Ok(Self {
            config,
            renderer,
            state: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let state = reset_state(&self.config, seed);
        let obs = self.renderer.render(&state)?;
        self.state = Some(state);
        Ok(obs)
    }

    pub fn step(&mut self, action: Action) -> Result<(Observation, f64, bool)> {
        let state = self.state.as_mut().ok_or(Error::EpisodeFinished)?;
        let (reward, done) = advance(&self.config, state, action)?;
        let obs = self.renderer.render(state)?;
        Ok((obs, reward, done))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfig {
            action_repeat: 1,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let c = cfg();
        let (s1, o1) = reset(&c, 7).unwrap();
        let (s2, o2) = reset(&c, 7).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
    }

    #[test]
    fn reset_without_distractors_has_empty_arrays() {
        let c = EnvConfig {
            n_distractors: 0,
            ..cfg()
        };
        let (s, _) = reset(&c, 11).unwrap();
        assert!(s.distractor_pos.is_empty());
        assert!(s.distractor_phase.is_empty());
    }

    #[test]
    fn reset_positions_lie_in_inner_square() {
        let c = EnvConfig {
            n_distractors: 8,
            ..cfg()
        };
        for seed in 0..50 {
            let s = reset_state(&c, seed);
            for p in std::iter::once(s.target_pos)
                .chain(std::iter::once(s.goal_pos))
                .chain(s.distractor_pos.iter().copied())
            {
                assert!((0.1..0.9).contains(&p[0]) && (0.1..0.9).contains(&p[1]));
            }
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_targets() {
        let c = cfg();
        let mut seen: Vec<[u64; 2]> = (0..100)
            .map(|seed| {
                let s = reset_state(&c, seed);
                [s.target_pos[0].to_bits(), s.target_pos[1].to_bits()]
            })
            .collect();
        seen.sort();
        seen.dedup();
        assert!(seen.len() >= 99, "only {} distinct positions", seen.len());
    }

    #[test]
    fn kinematic_update() {
        let c = cfg();
        let mut s = reset_state(&c, 1);
        s.target_pos = [0.5, 0.5];
        advance(&c, &mut s, Action::new(1.0, 0.0)).unwrap();
        assert!((s.target_pos[0] - 0.55).abs() < 1e-12);
        assert_eq!(s.target_pos[1], 0.5);
    }

    #[test]
    fn actions_are_clipped_not_rejected() {
        let c = cfg();
        let mut s = reset_state(&c, 1);
        s.target_pos = [0.5, 0.5];
        advance(&c, &mut s, Action::new(10.0, -3.0)).unwrap();
        assert!((s.target_pos[0] - 0.55).abs() < 1e-12);
        assert!((s.target_pos[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn reward_extremes() {
        assert_eq!(substep_reward([0.3, 0.3], [0.3, 0.3], 0.05), 2.0);
        assert!(substep_reward([0.0, 0.0], [1.0, 1.0], 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_action_at_goal_earns_two_per_substep() {
        let c = EnvConfig {
            goal_radius: 0.05,
            action_repeat: 2,
            ..EnvConfig::default()
        };
        let mut s = reset_state(&c, 2);
        s.target_pos = [0.3, 0.3];
        s.goal_pos = [0.3, 0.3];
        let (r, _) = advance(&c, &mut s, Action::default()).unwrap();
        assert_eq!(r, 4.0);
    }

    #[test]
    fn stepping_a_finished_episode_errors() {
        let c = EnvConfig {
            episode_length: 4,
            action_repeat: 2,
            ..EnvConfig::default()
        };
        let mut s = reset_state(&c, 3);
        assert!(!advance(&c, &mut s, Action::default()).unwrap().1);
        assert!(advance(&c, &mut s, Action::default()).unwrap().1);
        assert!(matches!(
            advance(&c, &mut s, Action::default()),
            Err(Error::EpisodeFinished)
        ));
    }

    #[test]
    fn distractors_ignore_target_and_action() {
        let c = EnvConfig {
            n_distractors: 3,
            ..cfg()
        };
        let mut a = reset_state(&c, 5);
        let mut b = a.clone();
        b.target_pos = [0.9, 0.1];
        advance(&c, &mut a, Action::new(1.0, 1.0)).unwrap();
        advance(&c, &mut b, Action::new(-1.0, 0.3)).unwrap();
        assert_eq!(a.distractor_pos, b.distractor_pos);
    }

    #[test]
    fn config_validation() {
        assert!(EnvConfig::default().validate().is_ok());
        let bad = [
            EnvConfig {
                image_size: 24,
                ..EnvConfig::default()
            },
            EnvConfig {
                n_distractors: 9,
                ..EnvConfig::default()
            },
            EnvConfig {
                goal_radius: 0.5,
                ..EnvConfig::default()
            },
            EnvConfig {
                move_speed: 0.0,
                ..EnvConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
