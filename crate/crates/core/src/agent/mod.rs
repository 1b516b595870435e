//! Actor-critic trained on imagined rollouts of the task model only.

use candle_core::{DType, Tensor};
use rand_distr::{Distribution, Normal};

use crate::env::{Action, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{flat_f64, scalar_f64, softplus, tensor_from, Adam, Mlp, ParamSet};
use crate::seeding::{derive_seed, rng_from, NoiseSource, STREAM_INIT};
use crate::worldmodel::{Branch, LatentModel, LatentState};

const MEAN_SCALE: f64 = 5.0;
const INIT_STD: f64 = 5.0;
const MIN_STD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub return_lambda: f64,
    pub expl_noise: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            return_lambda: 0.95,
            expl_noise: 0.3,
        }
    }
}

/// Tanh-squashed Gaussian actor and a scalar value model over task features.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub params: ParamSet,
    actor: Mlp,
    value: Mlp,
}

impl PolicyParams {
    pub fn new(features: usize, hidden: usize, dtype: DType, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new(dtype);
        let mut rng = rng_from(derive_seed(seed, STREAM_INIT, 10));
        let actor = Mlp::new(&mut params, "actor", &[features, hidden, hidden, 2 * ACTION_DIM], &mut rng)?;
        let value = Mlp::new(&mut params, "value", &[features, hidden, hidden, 1], &mut rng)?;
        Ok(Self { params, actor, value })
    }

    pub fn actor_group(&self) -> Vec<(String, candle_core::Var)> {
        self.params.select(|n| n.starts_with("actor/"))
    }

    pub fn value_group(&self) -> Vec<(String, candle_core::Var)> {
        self.params.select(|n| n.starts_with("value/"))
    }

    /// Pre-squash mean and std `[N, 2]`.
    pub fn action_dist(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let raw = self.actor.forward(features)?;
        let mean = raw
            .narrow(1, 0, ACTION_DIM)?
            .affine(1.0 / MEAN_SCALE, 0.0)?
            .tanh()?
            .affine(MEAN_SCALE, 0.0)?;
        let shift = INIT_STD.exp_m1().ln();
        let std = softplus(&raw.narrow(1, ACTION_DIM, ACTION_DIM)?.affine(1.0, shift)?)?.affine(1.0, MIN_STD)?;
        Ok((mean, std))
    }

    /// Reparameterized squashed sample `tanh(mean + std·ε)`.
    pub fn sample(&self, features: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let (mean, std) = self.action_dist(features)?;
        Ok((mean + (std * eps)?)?.tanh()?)
    }

    pub fn value(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.value.forward(features)?.squeeze(1)?)
    }
}

/// States `s_0..s_H`, actions `a_0..a_{H-1}` and rewards `r_i = r̂(s_{i+1})`.
#[derive(Debug, Clone)]
pub struct ImaginedTrajectory {
    pub states: Vec<LatentState>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub gamma: f64,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Rolls the task prior forward `horizon` steps under sampled policy
/// actions. Model parameters are constants here; gradients reach only the
/// actor, through the sampled actions.
pub fn imagine(
    task_model: &LatentModel,
    start: &LatentState,
    policy: &PolicyParams,
    horizon: usize,
    gamma: f64,
    noise_seed: u64,
) -> Result<ImaginedTrajectory> {
    if start.branch != Branch::Task || task_model.branch() != Branch::Task {
        return Err(Error::WrongBranch {
            expected: Branch::Task.as_str(),
            got: if start.branch != Branch::Task {
                start.branch.as_str()
            } else {
                task_model.branch().as_str()
            },
        });
    }
    let model = task_model.detached();
    let n = start.len();
    let mut noise = NoiseSource::new(noise_seed);
    let mut states = vec![start.detach()];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let s = states.last().expect("non-empty");
        let eps = tensor_from(&noise.normal_vec(n * ACTION_DIM), &[n, ACTION_DIM], model.dtype())?;
        let a = policy.sample(&s.features()?, &eps)?;
        let next = model.prior_step(s, &a, &model.noise(n, &mut noise)?)?;
        rewards.push(model.reward(&next)?);
        actions.push(a);
        states.push(next);
    }
    Ok(ImaginedTrajectory {
        states,
        actions,
        rewards,
        gamma,
    })
}

/// `G_t = r_t + γ[(1−λ)v_{t+1} + λG_{t+1}]` with `v_{H} = bootstrap` and
/// `G_H = bootstrap`. `values[t]` is the value of the state `r_t` is
/// collected from; `values[0]` does not enter the targets.
pub fn lambda_return(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = bootstrap;
    for t in (0..h).rev() {
        let v_next = if t + 1 < h { values[t + 1] } else { bootstrap };
        next = rewards[t] + gamma * ((1.0 - lambda) * v_next + lambda * next);
        out[t] = next;
    }
    out
}

/// Batched [`lambda_return`] over `[N]` tensors.
pub fn lambda_return_tensors(
    rewards: &[Tensor],
    values: &[Tensor],
    bootstrap: &Tensor,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Tensor>> {
    let h = rewards.len();
    let mut out = Vec::with_capacity(h);
    let mut next = bootstrap.clone();
    for t in (0..h).rev() {
        let v_next = if t + 1 < h { &values[t + 1] } else { bootstrap };
        let mixed = (v_next.affine(1.0 - lambda, 0.0)? + next.affine(lambda, 0.0)?)?;
        next = (&rewards[t] + mixed.affine(gamma, 0.0)?)?;
        out.push(next.clone());
    }
    out.reverse();
    Ok(out)
}

/// Losses and targets of one actor-critic step.
#[derive(Debug, Clone)]
pub struct PolicyLosses {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub targets: Vec<Tensor>,
}

/// Actor loss `−mean(G)` through the imagined graph, using a frozen copy of
/// the value model for the targets.
pub fn actor_objective(policy: &PolicyParams, traj: &ImaginedTrajectory, lambda: f64) -> Result<(Tensor, Vec<Tensor>)> {
    let frozen = policy.value.detached();
    let values = traj
        .states
        .iter()
        .map(|s| Ok(frozen.forward(&s.features()?)?.squeeze(1)?))
        .collect::<Result<Vec<_>>>()?;
    let h = traj.horizon();
    let targets = lambda_return_tensors(&traj.rewards, &values[..h], &values[h], traj.gamma, lambda)?;
    let loss = Tensor::stack(&targets, 0)?.mean_all()?.neg()?;
    Ok((loss, targets))
}

/// `mean((v(sg s_t) − sg G_t)²)` over the first `H` states.
pub fn critic_objective(policy: &PolicyParams, traj: &ImaginedTrajectory, targets: &[Tensor]) -> Result<Tensor> {
    let mut sq = Vec::with_capacity(targets.len());
    for (s, g) in traj.states.iter().zip(targets) {
        let v = policy.value(&s.features()?.detach())?;
        sq.push((v - g.detach())?.sqr()?);
    }
    Ok(Tensor::stack(&sq, 0)?.mean_all()?)
}

/// One optimizer step each for actor and critic.
pub fn policy_update(
    policy: &PolicyParams,
    traj: &ImaginedTrajectory,
    lambda: f64,
    actor_opt: &mut Adam,
    value_opt: &mut Adam,
) -> Result<PolicyLosses> {
    if traj.horizon() == 0 {
        return Ok(PolicyLosses {
            actor_loss: 0.0,
            critic_loss: 0.0,
            targets: Vec::new(),
        });
    }
    let (actor_loss, targets) = actor_objective(policy, traj, lambda)?;
    let critic_loss = critic_objective(policy, traj, &targets)?;
    let actor_value = scalar_f64(&actor_loss)?;
    let critic_value = scalar_f64(&critic_loss)?;
    actor_opt.step(&actor_loss.backward()?)?;
    value_opt.step(&critic_loss.backward()?)?;
    Ok(PolicyLosses {
        actor_loss: actor_value,
        critic_loss: critic_value,
        targets,
    })
}

/// Picks actions for a batch of task latents. With `explore` the squashed
/// sample gets additive Gaussian noise of scale `expl_noise`; otherwise the
/// action is `tanh(mean)`. Outputs are clipped to the action box.
pub fn act(policy: &PolicyParams, s_plus: &LatentState, explore: bool, expl_noise: f64, noise_seed: u64) -> Result<Vec<Action>> {
    if s_plus.branch != Branch::Task {
        return Err(Error::WrongBranch {
            expected: Branch::Task.as_str(),
            got: s_plus.branch.as_str(),
        });
    }
    let features = s_plus.features()?.detach();
    let n = s_plus.len();
    let a = if explore {
        let mut noise = NoiseSource::new(noise_seed);
        let eps = tensor_from(&noise.normal_vec(n * ACTION_DIM), &[n, ACTION_DIM], features.dtype())?;
        let mut a = flat_f64(&policy.sample(&features, &eps)?)?;
        if expl_noise > 0.0 {
            let normal = Normal::new(0.0, expl_noise).expect("positive scale");
            let mut rng = rng_from(derive_seed(noise_seed, 1, 0));
            for v in &mut a {
                *v += normal.sample(&mut rng);
            }
        }
        a
    } else {
        let (mean, _) = policy.action_dist(&features)?;
        flat_f64(&mean.tanh()?)?
    };
    Ok(a
        .chunks_exact(ACTION_DIM)
        .map(|c| Action([c[0].clamp(-1.0, 1.0), c[1].clamp(-1.0, 1.0)]))
        .collect())
}
