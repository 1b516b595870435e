use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AgentVariant, TrainConfig};
use super::metrics::{append_record, read_log, truncate_log, MeanPredictor, MetricsRecord};
use crate::agent::{act, imagine, policy_update, PolicyParams};
use crate::env::{Action, EnvConfig, MiniManyWorld, Observation, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{tensor_from, Adam, Block, Checkpoint, HALF_LN_2PI};
use crate::replay::{load_episode, save_episode, Episode, ReplayBuffer, SequenceBatch};
use crate::seeding::{
    derive_seed, NoiseSource, STREAM_ACT, STREAM_ENV, STREAM_EVAL, STREAM_IMAGINE, STREAM_MODEL_NOISE,
    STREAM_PREFILL, STREAM_SAMPLE,
};
use crate::worldmodel::{
    adversarial_head_update, batch_tensors, compute_losses, dreamer_baseline_loss, inverse_model_loss, matched_scale,
    DreamerModel, InverseModel, LatentModel, LatentState, LossConfig, LossOutput, ModelBundle, ModelDims, SizePreset, WorldModel,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.tia1";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EPISODE_DIR: &str = "episodes";

/// Model dimensions for a config. Paired models are shrunk to the
/// baseline's parameter budget when `match_param_budget` is set.
pub fn model_dims(config: &TrainConfig) -> Result<ModelDims> {
    let size = config.env.image_size;
    let w = config.width_multiplier;
    let scale = if config.agent_variant == AgentVariant::Tia
        && config.match_param_budget
        && config.size_preset == SizePreset::Standard
    {
        matched_scale(size, w)?
    } else {
        w
    };
    Ok(ModelDims::preset(config.size_preset, size, scale))
}

pub fn build_model(config: &TrainConfig) -> Result<WorldModel> {
    let dims = model_dims(config)?;
    let dtype = config.precision.dtype();
    let (min_std, seed) = (config.min_std, config.seed);
    Ok(match config.agent_variant {
        AgentVariant::Tia => WorldModel::Tia(ModelBundle::new(dims, dims, min_std, dtype, seed)?),
        AgentVariant::Dreamer => WorldModel::Dreamer(DreamerModel::new(dims, min_std, dtype, seed)?),
        AgentVariant::DreamerInverse => WorldModel::Inverse(InverseModel::new(dims, min_std, dtype, seed)?),
    })
}

pub fn build_policy(config: &TrainConfig, model: &WorldModel) -> Result<PolicyParams> {
    let d = model.task().dims();
    PolicyParams::new(d.features(), d.hidden, config.precision.dtype(), config.seed)
}

/// Objective of whichever variant `model` is.
pub fn model_losses(model: &WorldModel, batch: &SequenceBatch, config: &LossConfig, noise_seed: u64) -> Result<LossOutput> {
    match model {
        WorldModel::Tia(b) => compute_losses(b, batch, config, noise_seed),
        WorldModel::Dreamer(d) => dreamer_baseline_loss(d, batch, config, noise_seed),
        WorldModel::Inverse(m) => inverse_model_loss(m, batch, config, noise_seed),
    }
}

/// Filtered task latent of a running episode. Parameters are passed per
/// call, so the state survives in-place model updates.
#[derive(Debug, Clone, Default)]
pub struct Controller {
    latent: Option<LatentState>,
}

impl Controller {
    pub fn new() -> Self {
        Self::default()
    }

    /// Conditions on the first frame of an episode.
    pub fn reset(&mut self, model: &WorldModel, obs: &Observation, noise_seed: u64) -> Result<()> {
        let start = model.task().initial(1)?;
        self.latent = Some(filter_step(model.task(), &start, Action::new(0.0, 0.0), obs, noise_seed)?);
        Ok(())
    }

    pub fn observe(&mut self, model: &WorldModel, action: Action, obs: &Observation, noise_seed: u64) -> Result<()> {
        let prev = self.latent.take().ok_or(Error::EpisodeFinished)?;
        self.latent = Some(filter_step(model.task(), &prev, action, obs, noise_seed)?);
        Ok(())
    }

    pub fn latent(&self) -> Option<&LatentState> {
        self.latent.as_ref()
    }

    pub fn act(&self, policy: &PolicyParams, explore: bool, expl_noise: f64, noise_seed: u64) -> Result<Action> {
        let latent = self.latent.as_ref().ok_or(Error::EpisodeFinished)?;
        Ok(act(policy, latent, explore, expl_noise, noise_seed)?[0])
    }
}

/// One posterior step on a single frame; the result is detached.
pub(crate) fn filter_step(
    model: &LatentModel,
    prev: &LatentState,
    action: Action,
    obs: &Observation,
    noise_seed: u64,
) -> Result<LatentState> {
    let dtype = model.dtype();
    let a = tensor_from(&action.0, &[1, ACTION_DIM], dtype)?;
    let o = Tensor::from_vec(obs.to_f32(), (1, obs.len()), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
    let eps = model.noise(1, &mut NoiseSource::new(noise_seed))?;
    Ok(model.posterior_step(prev, &a, &o, &eps)?.detach())
}

/// Episode with uniformly random actions.
pub fn random_episode(env: &EnvConfig, env_seed: u64, action_seed: u64) -> Result<Episode> {
    let mut world = MiniManyWorld::new(env.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut ep = Episode::start(world.reset(env_seed)?);
    loop {
        let a = Action::random(&mut rng);
        let (obs, r, done) = world.step(a)?;
        ep.push(a, obs, r, done);
        if done {
            return Ok(ep);
        }
    }
}

/// Runs `jobs` on up to `threads` scoped threads, keeping the input order.
pub fn parallel_map<T: Send>(
    jobs: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if threads <= 1 || jobs <= 1 {
        return (0..jobs).map(&f).collect();
    }
    let chunk = jobs.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .step_by(chunk)
            .map(|lo| s.spawn(move || (lo..(lo + chunk).min(jobs)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(jobs);
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// Sample mean and sample standard deviation (zero for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Counters and statistics that make a run resumable.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub env_step: u64,
    pub agent_step: u64,
    pub updates: u64,
    pub episodes: u64,
    pub last_return: f64,
    pub rewards: MeanPredictor,
    pub random_returns: Vec<f64>,
    pub last_checkpoint_update: u64,
}

impl RunState {
    fn blocks(&self) -> Vec<Block> {
        let u = |n: &str, v| Block::from_u64(format!("state/{n}"), v);
        vec![
            u("env_step", self.env_step),
            u("agent_step", self.agent_step),
            u("updates", self.updates),
            u("episodes", self.episodes),
            u("reward_count", self.rewards.count),
            u("last_checkpoint_update", self.last_checkpoint_update),
            Block::from_f64s("state/last_return".into(), vec![self.last_return]),
            Block::from_f64s("state/reward_sum".into(), vec![self.rewards.sum]),
            Block::from_f64s("state/random_returns".into(), self.random_returns.clone()),
        ]
    }

    fn load(ckpt: &Checkpoint) -> Result<Self> {
        let u = |n: &str| ckpt.block(&format!("state/{n}"))?.to_u64();
        let f = |n: &str| ckpt.block(&format!("state/{n}"))?.to_f64s();
        let one = |n: &str| -> Result<f64> {
            f(n)?.first().copied().ok_or_else(|| Error::ParameterBlock {
                name: format!("state/{n}"),
                reason: "empty".into(),
            })
        };
        Ok(Self {
            env_step: u("env_step")?,
            agent_step: u("agent_step")?,
            updates: u("updates")?,
            episodes: u("episodes")?,
            last_return: one("last_return")?,
            rewards: MeanPredictor {
                sum: one("reward_sum")?,
                count: u("reward_count")?,
            },
            random_returns: f("random_returns")?,
            last_checkpoint_update: u("last_checkpoint_update")?,
        })
    }
}

fn batch_blocks(batch: &SequenceBatch) -> Vec<Block> {
    vec![
        Block::from_u64("state/eval/batch".into(), batch.batch as u64),
        Block::from_u64("state/eval/length".into(), batch.length as u64),
        Block::from_f64s(
            "state/eval/observations".into(),
            batch.observations.iter().map(|&x| x as f64).collect(),
        ),
        Block::from_f64s("state/eval/actions".into(), batch.actions.clone()),
        Block::from_f64s("state/eval/rewards".into(), batch.rewards.clone()),
        Block::from_f64s("state/eval/discounts".into(), batch.discounts.clone()),
    ]
}

fn load_batch(ckpt: &Checkpoint, image_size: usize) -> Result<SequenceBatch> {
    let f = |n: &str| ckpt.block(&format!("state/eval/{n}"))?.to_f64s();
    let batch = ckpt.block("state/eval/batch")?.to_u64()? as usize;
    Ok(SequenceBatch {
        batch,
        length: ckpt.block("state/eval/length")?.to_u64()? as usize,
        obs_shape: [image_size, image_size, 3],
        observations: f("observations")?.into_iter().map(|x| x as f32).collect(),
        actions: f("actions")?,
        rewards: f("rewards")?,
        discounts: f("discounts")?,
        provenance: Vec::new(),
    })
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

pub struct Trainer {
    config: TrainConfig,
    model: WorldModel,
    policy: PolicyParams,
    model_opts: Vec<(&'static str, Adam)>,
    adv_opt: Option<Adam>,
    actor_opt: Adam,
    value_opt: Adam,
    replay: ReplayBuffer,
    eval_batch: Option<SequenceBatch>,
    state: RunState,
    records: Vec<MetricsRecord>,
    out_dir: Option<PathBuf>,
    started: Instant,
}

impl Trainer {
    /// Fresh run. With `out_dir` set, metrics, checkpoints and (optionally)
    /// episodes are written there.
    pub fn new(config: TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config)?;
        let policy = build_policy(&config, &model)?;
        let mut model_opts = Vec::new();
        let mut adv_opt = None;
        for (name, group) in model.groups() {
            let opt = Adam::new(group, config.model_lr, config.adam_eps, config.grad_clip)?;
            if name == "adversarial" {
                adv_opt = Some(opt);
            } else {
                model_opts.push((name, opt));
            }
        }
        let actor_opt = Adam::new(policy.actor_group(), config.actor_lr, config.adam_eps, config.grad_clip)?;
        let value_opt = Adam::new(policy.value_group(), config.value_lr, config.adam_eps, config.grad_clip)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let log = dir.join(METRICS_FILE);
            if log.exists() {
                std::fs::remove_file(log)?;
            }
        }
        Ok(Self {
            replay: ReplayBuffer::new(config.replay_capacity),
            config,
            model,
            policy,
            model_opts,
            adv_opt,
            actor_opt,
            value_opt,
            eval_batch: None,
            state: RunState {
                env_step: 0,
                agent_step: 0,
                updates: 0,
                episodes: 0,
                last_return: 0.0,
                rewards: MeanPredictor::default(),
                random_returns: Vec::new(),
                last_checkpoint_update: 0,
            },
            records: Vec::new(),
            out_dir: out_dir.map(Path::to_path_buf),
            started: Instant::now(),
        })
    }

    /// Continues the run saved in `out_dir`. Records written after the
    /// checkpoint are dropped and regenerated. The replay buffer is rebuilt
    /// from persisted episodes when they exist and starts empty otherwise.
    pub fn resume(out_dir: &Path, total_env_steps: Option<u64>) -> Result<Self> {
        let ckpt = Checkpoint::load(&out_dir.join(CHECKPOINT_FILE))?;
        let mut config = TrainConfig::from_toml(&ckpt.config)?;
        if let Some(t) = total_env_steps {
            config.total_env_steps = t;
        }
        let log = out_dir.join(METRICS_FILE);
        let saved_log = if log.exists() { Some(std::fs::read(&log)?) } else { None };
        let mut t = Self::new(config, Some(out_dir))?;
        if let Some(bytes) = saved_log {
            std::fs::write(&log, bytes)?;
        }
        t.load_checkpoint(&ckpt)?;
        truncate_log(&log, t.state.env_step)?;
        t.records = if log.exists() { read_log(&log)? } else { Vec::new() };
        let dir = out_dir.join(EPISODE_DIR);
        for i in 0..t.state.episodes {
            let path = dir.join(format!("{i:08}.tiae"));
            if path.exists() {
                t.replay.add_episode(load_episode(&path)?)?;
            }
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut blocks = self.model.params().blocks("")?;
        blocks.extend(self.policy.params.blocks("")?);
        for (name, opt) in &self.model_opts {
            blocks.extend(opt.blocks(name)?);
        }
        if let Some(opt) = &self.adv_opt {
            blocks.extend(opt.blocks("adversarial")?);
        }
        blocks.extend(self.actor_opt.blocks("actor")?);
        blocks.extend(self.value_opt.blocks("value")?);
        blocks.extend(self.state.blocks());
        if let Some(b) = &self.eval_batch {
            blocks.extend(batch_blocks(b));
        }
        Ok(Checkpoint {
            config: self.config.to_toml()?,
            blocks,
        })
    }

    fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.model.params().load(ckpt, "")?;
        self.policy.params.load(ckpt, "")?;
        for (name, opt) in &mut self.model_opts {
            opt.load(ckpt, name)?;
        }
        if let Some(opt) = &mut self.adv_opt {
            opt.load(ckpt, "adversarial")?;
        }
        self.actor_opt.load(ckpt, "actor")?;
        self.value_opt.load(ckpt, "value")?;
        self.state = RunState::load(ckpt)?;
        if ckpt.has_prefix("state/eval/") {
            self.eval_batch = Some(load_batch(ckpt, self.config.env.image_size)?);
        }
        Ok(())
    }

    fn save_checkpoint(&mut self) -> Result<()> {
        self.state.last_checkpoint_update = self.state.updates;
        if let Some(dir) = &self.out_dir {
            self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }

    fn store_episode(&mut self, episode: Episode) -> Result<()> {
        if let Some(dir) = self.out_dir.as_ref().filter(|_| self.config.persist_episodes) {
            let dir = dir.join(EPISODE_DIR);
            std::fs::create_dir_all(&dir)?;
            save_episode(&dir.join(format!("{:08}.tiae", self.state.episodes)), &episode)?;
        }
        for &r in &episode.rewards {
            self.state.rewards.observe(r);
        }
        self.state.last_return = episode.total_reward();
        self.state.agent_step += episode.len() as u64;
        self.state.env_step += self.config.env.episode_length as u64;
        self.state.episodes += 1;
        self.replay.add_episode(episode)?;
        Ok(())
    }

    fn prefill(&mut self) -> Result<()> {
        let c = &self.config;
        let episodes = parallel_map(c.prefill_episodes, c.parallel_envs, |e| {
            random_episode(
                &c.env,
                derive_seed(c.seed, STREAM_ENV, e as u64),
                derive_seed(c.seed, STREAM_PREFILL, e as u64),
            )
        })?;
        for ep in episodes {
            self.state.random_returns.push(ep.total_reward());
            self.store_episode(ep)?;
        }
        self.eval_batch = Some(self.replay.sample_sequences(
            self.config.eval_batch_size,
            self.config.seq_len,
            derive_seed(self.config.seed, STREAM_EVAL, 0),
        )?);
        self.save_checkpoint()
    }

    /// Runs until `total_env_steps` is reached, finishing the episode in
    /// progress. `progress` sees every new record.
    pub fn run_with(&mut self, mut progress: impl FnMut(&MetricsRecord)) -> Result<TrainOutput> {
        if self.state.episodes == 0 {
            self.prefill()?;
        }
        while self.state.env_step < self.config.total_env_steps {
            self.collect_episode(&mut progress)?;
            if self.state.updates - self.state.last_checkpoint_update >= self.config.checkpoint_every {
                self.save_checkpoint()?;
            }
        }
        self.save_checkpoint()?;
        Ok(TrainOutput {
            checkpoint: self.checkpoint()?,
            metrics: self.records.clone(),
        })
    }

    pub fn run(&mut self) -> Result<TrainOutput> {
        self.run_with(|_| {})
    }

    fn collect_episode(&mut self, progress: &mut impl FnMut(&MetricsRecord)) -> Result<()> {
        let seed = self.config.seed;
        let mut world = MiniManyWorld::new(self.config.env.clone())?;
        let first = world.reset(derive_seed(seed, STREAM_ENV, self.state.episodes))?;
        let mut episode = Episode::start(first.clone());
        let mut step = self.state.agent_step;
        let mut sub_steps = 0usize;
        let mut ctl = Controller::new();
        ctl.reset(&self.model, &first, derive_seed(seed, STREAM_ACT, 2 * step + 1))?;
        loop {
            let a = ctl.act(&self.policy, true, self.config.expl_noise, derive_seed(seed, STREAM_ACT, 2 * step))?;
            let before = world.state().map_or(0, |s| s.step_index);
            let (obs, r, done) = world.step(a)?;
            sub_steps += world.state().map_or(0, |s| s.step_index) - before;
            episode.push(a, obs.clone(), r, done);
            step += 1;
            if step % self.config.train_every as u64 == 0 && self.replay.num_episodes() > 0 {
                if let Some(record) = self.update(self.state.env_step + sub_steps as u64)? {
                    progress(&record);
                }
            }
            if done {
                break;
            }
            ctl.observe(&self.model, a, &obs, derive_seed(seed, STREAM_ACT, 2 * step + 1))?;
        }
        self.store_episode(episode)
    }

    /// One world-model, adversarial and actor-critic update. Returns the
    /// metrics record when one is due.
    fn update(&mut self, env_step: u64) -> Result<Option<MetricsRecord>> {
        let c = &self.config;
        let u = self.state.updates;
        let dtype = c.precision.dtype();
        let batch = self
            .replay
            .sample_sequences(c.batch_size, c.seq_len, derive_seed(c.seed, STREAM_SAMPLE, u))?;
        let out = model_losses(
            &self.model,
            &batch,
            &c.loss_config(env_step),
            derive_seed(c.seed, STREAM_MODEL_NOISE, u),
        )?;
        for (name, t) in out.terms.named() {
            if !crate::nn::scalar_f64(t)?.is_finite() {
                return Err(Error::Diverged {
                    step: env_step,
                    term: name.to_string(),
                });
            }
        }
        let grads = out.objective.backward()?;
        for (_, opt) in &mut self.model_opts {
            opt.step(&grads)?;
        }
        drop(grads);
        if let (WorldModel::Tia(bundle), Some(adv)) = (&self.model, &mut self.adv_opt) {
            let (_, _, rewards) = batch_tensors(&batch, dtype)?;
            let features = out
                .distractor_features
                .as_ref()
                .ok_or_else(|| Error::Shape("paired model produced no distractor features".into()))?;
            adversarial_head_update(bundle, features, &rewards, c.adversarial_iters, adv)?;
        }
        let start = out.task_states.detach();
        let breakdown = out.breakdown;
        let stats = out.stats;
        drop(out);
        let traj = imagine(
            self.model.task(),
            &start,
            &self.policy,
            c.horizon,
            c.gamma,
            derive_seed(c.seed, STREAM_IMAGINE, u),
        )?;
        let pl = policy_update(&self.policy, &traj, c.return_lambda, &mut self.actor_opt, &mut self.value_opt)?;
        for (name, v) in [("actor_loss", pl.actor_loss), ("critic_loss", pl.critic_loss)] {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step: env_step,
                    term: name.into(),
                });
            }
        }
        self.state.updates += 1;
        if self.state.updates % c.log_every != 0 {
            return Ok(None);
        }

        let mask_coverage = match (&self.model, &self.eval_batch) {
            (WorldModel::Tia(_), Some(eval)) => {
                let out = model_losses(&self.model, eval, &c.loss_config(env_step), derive_seed(c.seed, STREAM_EVAL, 1))?;
                out.stats.mask_coverage
            }
            _ => None,
        };
        let (random_mean, random_std) = mean_std(&self.state.random_returns);
        let record = MetricsRecord {
            env_step,
            episodic_return: self.state.last_return,
            losses: breakdown,
            task_reward_nll: stats.task_reward_nll,
            distractor_reward_nll: stats.distractor_reward_nll,
            mean_predictor_nll: self.state.rewards.mean_nll(&batch.rewards),
            mask_coverage,
            joint_recon_nll: stats.joint_recon_nll,
            distractor_recon_nll: stats.distractor_recon_nll,
            recon_floor: c.env.image_size.pow(2) as f64 * 3.0 * HALF_LN_2PI,
            random_return_mean: random_mean,
            random_return_std: random_std,
            actor_loss: pl.actor_loss,
            critic_loss: pl.critic_loss,
            config_tag: c.config_tag(),
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        if let Some(field) = record.non_finite_field() {
            return Err(Error::Diverged {
                step: env_step,
                term: field.into(),
            });
        }
        if let Some(dir) = &self.out_dir {
            append_record(&dir.join(METRICS_FILE), &record)?;
        }
        self.records.push(record.clone());
        Ok(Some(record))
    }
}

/// Trains from scratch; see [`Trainer`].
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    Trainer::new(config.clone(), out_dir)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn smoke_config() -> TrainConfig {
        let mut c = TrainConfig {
            size_preset: SizePreset::Tiny,
            batch_size: 3,
            seq_len: 6,
            horizon: 3,
            prefill_episodes: 1,
            total_env_steps: 200,
            eval_batch_size: 2,
            log_every: 1,
            ..TrainConfig::default()
        };
        c.env.image_size = 16;
        c.env.episode_length = 40;
        c
    }

    #[test]
    fn smoke_run_emits_finite_records() {
        let out = train(&smoke_config(), None).unwrap();
        assert!(!out.metrics.is_empty());
        for r in &out.metrics {
            assert_eq!(r.non_finite_field(), None);
            let m = r.mask_coverage.unwrap();
            assert!(m > 0.0 && m < 1.0);
        }
        assert!(out.metrics.windows(2).all(|w| w[0].env_step < w[1].env_step));
    }

    #[test]
    fn identical_runs_match_and_checkpoints_round_trip() {
        let a = train(&smoke_config(), None).unwrap();
        let b = train(&smoke_config(), None).unwrap();
        let strip = |m: &[MetricsRecord]| m.iter().map(MetricsRecord::without_wall_time).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.checkpoint, b.checkpoint);
        let bytes = a.checkpoint.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), a.checkpoint);
    }

    #[test]
    fn baseline_checkpoint_has_no_distractor_blocks() {
        let c = TrainConfig {
            agent_variant: AgentVariant::Dreamer,
            ..smoke_config()
        };
        let out = train(&c, None).unwrap();
        assert!(!out.checkpoint.has_prefix("distractor/"));
        assert!(out.checkpoint.has_prefix("task/"));
        assert!(out.metrics.iter().all(|r| r.mask_coverage.is_none()));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let mut c = smoke_config();
        c.persist_episodes = true;
        c.checkpoint_every = 1;
        c.total_env_steps = 240;
        let full_dir = tempfile::tempdir().unwrap();
        let full = train(&c, Some(full_dir.path())).unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let mut half = c.clone();
        half.total_env_steps = 120;
        train(&half, Some(part_dir.path())).unwrap();
        // a record past the checkpoint, as left by a crash, is discarded
        let mut stray = full.metrics.last().unwrap().clone();
        stray.env_step = 10_000;
        append_record(&part_dir.path().join(METRICS_FILE), &stray).unwrap();
        let resumed = Trainer::resume(part_dir.path(), Some(240)).unwrap().run().unwrap();

        let strip = |m: &[MetricsRecord]| m.iter().map(MetricsRecord::without_wall_time).collect::<Vec<_>>();
        assert_eq!(strip(&resumed.metrics), strip(&full.metrics));
        let on_disk = read_log(&part_dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(strip(&on_disk), strip(&full.metrics));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v = parallel_map(7, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36]);
    }
}
