use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{build_model, build_policy, filter_step, mean_std, parallel_map, Controller};
use crate::agent::{act, PolicyParams};
use crate::env::{Action, EnvConfig, MiniManyWorld};
use crate::error::{Error, Result};
use crate::nn::{flat_f64, Checkpoint};
use crate::seeding::{derive_seed, STREAM_EVAL};
use crate::worldmodel::{mix, WorldModel};

/// Model, policy and config restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedAgent {
    pub config: TrainConfig,
    pub model: WorldModel,
    pub policy: PolicyParams,
}

impl LoadedAgent {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&ckpt.config)?;
        let model = build_model(&config)?;
        let policy = build_policy(&config, &model)?;
        model.params().load(ckpt, "")?;
        policy.params.load(ckpt, "")?;
        Ok(Self { config, model, policy })
    }

    fn check_env(&self, env: &EnvConfig) -> Result<()> {
        if env.image_size != self.config.env.image_size {
            return Err(Error::Config(format!(
                "checkpoint was trained on {0}x{0} images, environment renders {1}x{1}",
                self.config.env.image_size, env.image_size
            )));
        }
        env.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
}

impl EvalSummary {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let (mean_return, std_return) = mean_std(&returns);
        Self {
            episodes: returns.len(),
            mean_return,
            std_return,
            returns,
        }
    }
}

fn episode_seeds(seed: u64, i: usize) -> (u64, u64) {
    (derive_seed(seed, STREAM_EVAL, 2 * i as u64), derive_seed(seed, STREAM_EVAL, 2 * i as u64 + 1))
}

fn policy_episode(agent: &LoadedAgent, env: &EnvConfig, seed: u64, i: usize) -> Result<f64> {
    let (env_seed, noise) = episode_seeds(seed, i);
    let mut world = MiniManyWorld::new(env.clone())?;
    let mut ctl = Controller::new();
    ctl.reset(&agent.model, &world.reset(env_seed)?, derive_seed(noise, 0, 0))?;
    let mut total = 0.0;
    for t in 1.. {
        let a = ctl.act(&agent.policy, false, 0.0, 0)?;
        let (obs, r, done) = world.step(a)?;
        total += r;
        if done {
            break;
        }
        ctl.observe(&agent.model, a, &obs, derive_seed(noise, t, 0))?;
    }
    Ok(total)
}

/// Runs `episodes` greedy episodes of the checkpointed policy. `env` may
/// differ from the training environment in background settings.
pub fn evaluate(ckpt: &Checkpoint, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::NoEpisodesRequested);
    }
    let agent = LoadedAgent::from_checkpoint(ckpt)?;
    agent.check_env(env)?;
    let threads = agent.config.parallel_envs;
    let returns = parallel_map(episodes, threads, |i| policy_episode(&agent, env, seed, i))?;
    Ok(EvalSummary::from_returns(returns))
}

/// Returns of a uniformly random actor on the same episode seeds that
/// [`evaluate`] uses.
pub fn random_policy_returns(env: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::NoEpisodesRequested);
    }
    (0..episodes)
        .map(|i| {
            let (env_seed, noise) = episode_seeds(seed, i);
            let mut world = MiniManyWorld::new(env.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise);
            world.reset(env_seed)?;
            let mut total = 0.0;
            loop {
                let (_, r, done) = world.step(Action::random(&mut rng))?;
                total += r;
                if done {
                    return Ok(total);
                }
            }
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blit_rgb(strip: &mut RgbImage, panel: usize, size: usize, values: &[f64]) {
    for y in 0..size {
        for x in 0..size {
            let i = (y * size + x) * 3;
            let px = image::Rgb([quantize(values[i]), quantize(values[i + 1]), quantize(values[i + 2])]);
            strip.put_pixel((panel * size + x) as u32, y as u32, px);
        }
    }
}

fn blit_gray(strip: &mut RgbImage, panel: usize, size: usize, values: &[f64]) {
    for (x, y, px) in mask_image(size, values).enumerate_pixels() {
        let v = px.0[0];
        strip.put_pixel(panel as u32 * size as u32 + x, y, image::Rgb([v, v, v]));
    }
}

/// Mask of one frame as an 8-bit grayscale image.
pub fn mask_image(size: usize, mask: &[f64]) -> GrayImage {
    GrayImage::from_fn(size as u32, size as u32, |x, y| Luma([quantize(mask[y as usize * size + x as usize])]))
}

/// One strip per frame: raw, joint, task, distractor and mask panels for the
/// paired model; raw and reconstruction for the baseline; raw only for the
/// inverse-dynamics variant.
pub fn report_strips(ckpt: &Checkpoint, env: &EnvConfig, frames: usize, seed: u64) -> Result<Vec<RgbImage>> {
    let agent = LoadedAgent::from_checkpoint(ckpt)?;
    agent.check_env(env)?;
    let size = env.image_size;
    let panels = match &agent.model {
        WorldModel::Tia(_) => 5,
        WorldModel::Dreamer(_) => 2,
        WorldModel::Inverse(_) => 1,
    };
    let (env_seed, noise) = episode_seeds(seed, 0);
    let mut world = MiniManyWorld::new(env.clone())?;
    let mut obs = world.reset(env_seed)?;
    let task = agent.model.task();
    let mut action = Action::new(0.0, 0.0);
    let mut s_task = task.initial(1)?;
    let mut s_dist = agent.model.bundle().map(|b| b.distractor.initial(1)).transpose()?;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames as u64 {
        s_task = filter_step(task, &s_task, action, &obs, derive_seed(noise, t, 0))?;
        let mut strip = RgbImage::new((panels * size) as u32, size as u32);
        blit_rgb(&mut strip, 0, size, &obs.to_f32().iter().map(|&v| v as f64).collect::<Vec<_>>());
        match &agent.model {
            WorldModel::Tia(bundle) => {
                let sd = filter_step(
                    &bundle.distractor,
                    s_dist.as_ref().expect("paired model"),
                    action,
                    &obs,
                    derive_seed(noise, t, 1),
                )?;
                let to = task.decode_obs(&s_task)?;
                let dout = bundle.distractor.decode_obs(&sd)?;
                let (mask, joint) = mix(&to, &dout, &bundle.mixer)?;
                blit_rgb(&mut strip, 1, size, &flat_f64(&joint)?);
                blit_rgb(&mut strip, 2, size, &flat_f64(&to.image_mean)?);
                blit_rgb(&mut strip, 3, size, &flat_f64(&dout.image_mean)?);
                blit_gray(&mut strip, 4, size, &flat_f64(&mask)?);
                s_dist = Some(sd);
            }
            WorldModel::Dreamer(_) => {
                blit_rgb(&mut strip, 1, size, &flat_f64(&task.decode_obs(&s_task)?.image_mean)?);
            }
            WorldModel::Inverse(_) => {}
        }
        out.push(strip);
        action = act(&agent.policy, &s_task, false, 0.0, 0)?[0];
        let (next, _, done) = world.step(action)?;
        obs = next;
        if done {
            break;
        }
    }
    Ok(out)
}

/// Writes [`report_strips`] as `frame_0000.png`, ... into `out_dir`.
pub fn render_report(ckpt: &Checkpoint, env: &EnvConfig, frames: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    report_strips(ckpt, env, frames, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            let path = out_dir.join(format!("frame_{i:04}.png"));
            img.save(&path).map_err(|e| Error::ImageRead {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{AgentVariant, Trainer};
    use crate::worldmodel::SizePreset;

    fn config(variant: AgentVariant) -> TrainConfig {
        let mut c = TrainConfig {
            agent_variant: variant,
            size_preset: SizePreset::Tiny,
            seq_len: 8,
            ..TrainConfig::default()
        };
        c.env.image_size = 16;
        c.env.episode_length = 30;
        c
    }

    fn untrained(variant: AgentVariant) -> Checkpoint {
        Trainer::new(config(variant), None).unwrap().checkpoint().unwrap()
    }

    #[test]
    fn evaluation_is_deterministic_and_rejects_zero_episodes() {
        let ckpt = untrained(AgentVariant::Tia);
        let env = config(AgentVariant::Tia).env;
        let a = evaluate(&ckpt, &env, 3, 5).unwrap();
        assert_eq!(a, evaluate(&ckpt, &env, 3, 5).unwrap());
        assert_eq!(a.episodes, 3);
        assert!(matches!(evaluate(&ckpt, &env, 0, 5), Err(Error::NoEpisodesRequested)));
    }

    #[test]
    fn mismatched_checkpoint_names_the_block() {
        let mut ckpt = untrained(AgentVariant::Dreamer);
        let i = ckpt.blocks.iter().position(|b| b.name.starts_with("task/gru")).unwrap();
        let name = ckpt.blocks[i].name.clone();
        ckpt.blocks[i].dims.push(1);
        let err = evaluate(&ckpt, &config(AgentVariant::Dreamer).env, 1, 0).unwrap_err();
        assert!(err.to_string().contains(&name), "{err}");
    }

    #[test]
    fn strip_widths_follow_the_variant() {
        let env = config(AgentVariant::Tia).env;
        for (variant, panels) in [(AgentVariant::Tia, 5), (AgentVariant::Dreamer, 2), (AgentVariant::DreamerInverse, 1)] {
            let strips = report_strips(&untrained(variant), &env, 3, 1).unwrap();
            assert_eq!(strips.len(), 3);
            assert_eq!(strips[0].width() as usize, panels * 16);
            assert_eq!(strips[0].height(), 16);
        }
        let ckpt = untrained(AgentVariant::Tia);
        assert_eq!(report_strips(&ckpt, &env, 2, 7).unwrap(), report_strips(&ckpt, &env, 2, 7).unwrap());
    }

    #[test]
    fn mask_quantization_spans_the_byte_range() {
        let img = mask_image(2, &[0.0, 0.25, 0.999, 1.0]);
        assert_eq!(img.as_raw(), &vec![0, 64, 255, 255]);
    }
}
