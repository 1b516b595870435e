//! Recurrent latent world models: the task/distractor pair with a learned
//! mask mixer, the single-model baseline and the inverse-dynamics variant.

mod bundle;
mod losses;

pub use bundle::{
    dreamer_param_count, matched_scale, DreamerModel, InverseModel, Mixer, ModelBundle, ModelDims, SizePreset, WorldModel,
    ADV_HEAD_PREFIX, DISTRACTOR_PREFIX, TASK_PREFIX,
};
pub use losses::{
    adversarial_head_update, batch_tensors, compute_losses, dreamer_baseline_loss, gaussian_image_nll,
    inverse_model_loss, kl_divergence, kl_regularizer, mix, reward_nll, LossBreakdown, LossConfig, LossOutput,
    LossStats, LossTerms,
};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::env::ACTION_DIM;
use crate::error::{Error, Result};
use crate::nn::{softplus, split_channels, GruCell, Linear, Mlp, ParamSet, PatchDecoder, PatchEncoder};
use crate::seeding::NoiseSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Task,
    Distractor,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Task => "task",
            Branch::Distractor => "distractor",
        }
    }
}

/// Diagonal Gaussian over the stochastic latent, batched as `[N, stoch]`.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: Tensor,
    pub std: Tensor,
}

impl GaussianBelief {
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (&self.std * eps)?)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            std: self.std.detach(),
        }
    }

    fn stack(items: &[GaussianBelief]) -> Result<Self> {
        let means: Vec<_> = items.iter().map(|b| b.mean.clone()).collect();
        let stds: Vec<_> = items.iter().map(|b| b.std.clone()).collect();
        Ok(Self {
            mean: flatten_time(&means)?,
            std: flatten_time(&stds)?,
        })
    }
}

/// Batched latent `[N, ·]` of one branch.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub deter: Tensor,
    pub stoch: Tensor,
    pub belief: GaussianBelief,
    pub branch: Branch,
}

impl LatentState {
    pub fn zeros(branch: Branch, dims: &ModelDims, n: usize, dtype: DType) -> Result<Self> {
        let z = |d: usize| Tensor::zeros((n, d), dtype, &Device::Cpu);
        let std = z(dims.stoch)?.affine(1.0, 1.0)?;
        Ok(Self {
            deter: z(dims.deter)?,
            stoch: z(dims.stoch)?,
            belief: GaussianBelief {
                mean: z(dims.stoch)?,
                std,
            },
            branch,
        })
    }

    pub fn len(&self) -> usize {
        self.deter.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[deter, stoch]`, the input to every head.
    pub fn features(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.deter, &self.stoch], 1)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            deter: self.deter.detach(),
            stoch: self.stoch.detach(),
            belief: self.belief.detach(),
            branch: self.branch,
        }
    }

    fn stack(items: &[LatentState]) -> Result<Self> {
        let deter: Vec<_> = items.iter().map(|s| s.deter.clone()).collect();
        let stoch: Vec<_> = items.iter().map(|s| s.stoch.clone()).collect();
        let beliefs: Vec<_> = items.iter().map(|s| s.belief.clone()).collect();
        Ok(Self {
            deter: flatten_time(&deter)?,
            stoch: flatten_time(&stoch)?,
            belief: GaussianBelief::stack(&beliefs)?,
            branch: items[0].branch,
        })
    }
}

/// Stacks per-step `[B, d]` tensors into batch-major `[B*L, d]`.
fn flatten_time(steps: &[Tensor]) -> Result<Tensor> {
    let b = steps[0].dim(0)?;
    let d = steps[0].dim(1)?;
    Ok(Tensor::stack(steps, 1)?.reshape((b * steps.len(), d))?)
}

/// Decoded image mean and, for the paired models, mask features. Both are
/// `[N, H*W*3]` in HWC order.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub image_mean: Tensor,
    pub mask_features: Option<Tensor>,
}

/// Posterior unroll over a window, flattened batch-major to `[B*L, ·]`.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub posterior: LatentState,
    pub prior: GaussianBelief,
    pub batch: usize,
    pub length: usize,
}

/// One recurrent state-space model: encoder, recurrent cell, prior and
/// posterior heads, optional image decoder and a reward head.
#[derive(Debug, Clone)]
pub struct LatentModel {
    branch: Branch,
    dims: ModelDims,
    min_std: f64,
    dtype: DType,
    encoder: PatchEncoder,
    cell_in: Linear,
    gru: GruCell,
    prior: Mlp,
    posterior: Mlp,
    decoder: Option<PatchDecoder>,
    reward: Mlp,
}

impl LatentModel {
    /// Registers parameters under `prefix/`. `decoder_channels` is 6 for the
    /// paired models (image and mask features), 3 for the baseline and
    /// `None` for models without reconstruction.
    pub fn new(
        params: &mut ParamSet,
        branch: Branch,
        prefix: &str,
        reward_name: &str,
        dims: ModelDims,
        decoder_channels: Option<usize>,
        min_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = dims;
        let f = d.features();
        let p = |n: &str| format!("{prefix}/{n}");
        let encoder = PatchEncoder::new(params, &p("encoder"), d.image_size, (d.c1, d.c2, d.embed), rng)?;
        let cell_in = Linear::new(params, &p("cell_in"), d.stoch + ACTION_DIM, d.hidden, rng)?;
        let gru = GruCell::new(params, &p("gru"), d.hidden, d.deter, rng)?;
        let prior = Mlp::new(params, &p("prior"), &[d.deter, d.hidden, 2 * d.stoch], rng)?;
        let posterior = Mlp::new(params, &p("posterior"), &[d.deter + d.embed, d.hidden, 2 * d.stoch], rng)?;
        let decoder = decoder_channels
            .map(|c| PatchDecoder::new(params, &p("decoder"), d.image_size, (f, d.c1, d.c2), c, rng))
            .transpose()?;
        let reward = Mlp::new(params, &p(reward_name), &[f, d.hidden, d.hidden, 1], rng)?;
        Ok(Self {
            branch,
            dims,
            min_std,
            dtype: params.dtype(),
            encoder,
            cell_in,
            gru,
            prior,
            posterior,
            decoder,
            reward,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Copy whose parameters are constants: gradients still flow through
    /// the inputs but never reach this model's weights.
    pub fn detached(&self) -> Self {
        Self {
            encoder: self.encoder.detached(),
            cell_in: self.cell_in.detached(),
            gru: self.gru.detached(),
            prior: self.prior.detached(),
            posterior: self.posterior.detached(),
            decoder: self.decoder.as_ref().map(PatchDecoder::detached),
            reward: self.reward.detached(),
            ..self.clone()
        }
    }

    /// Same model with the decoder cut down to its first `channels` outputs.
    pub fn with_decoder_channels(&self, channels: usize) -> Result<Self> {
        Ok(Self {
            decoder: self.decoder.as_ref().map(|d| d.truncated(channels)).transpose()?,
            ..self.clone()
        })
    }

    pub fn initial(&self, n: usize) -> Result<LatentState> {
        LatentState::zeros(self.branch, &self.dims, n, self.dtype)
    }

    fn check_branch(&self, s: &LatentState) -> Result<()> {
        if s.branch != self.branch {
            return Err(Error::WrongBranch {
                expected: self.branch.as_str(),
                got: s.branch.as_str(),
            });
        }
        Ok(())
    }

    fn check_obs(&self, obs: &Tensor) -> Result<()> {
        if obs.rank() != 2 || obs.dim(1)? != self.dims.obs_len() {
            return Err(Error::Shape(format!(
                "observation {:?} does not match {}x{}x3",
                obs.dims(),
                self.dims.image_size,
                self.dims.image_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, obs: &Tensor) -> Result<Tensor> {
        self.check_obs(obs)?;
        self.encoder.forward(&obs.affine(1.0, -0.5)?)
    }

    fn deter_step(&self, prev: &LatentState, action: &Tensor) -> Result<Tensor> {
        let x = self
            .cell_in
            .forward(&Tensor::cat(&[&prev.stoch, action], 1)?)?
            .elu(1.0)?;
        self.gru.forward(&x, &prev.deter)
    }

    fn belief(&self, raw: &Tensor) -> Result<GaussianBelief> {
        let s = self.dims.stoch;
        Ok(GaussianBelief {
            mean: raw.narrow(1, 0, s)?,
            std: softplus(&raw.narrow(1, s, s)?)?.affine(1.0, self.min_std)?,
        })
    }

    fn prior_belief(&self, deter: &Tensor) -> Result<GaussianBelief> {
        self.belief(&self.prior.forward(deter)?)
    }

    fn posterior_belief(&self, deter: &Tensor, embed: &Tensor) -> Result<GaussianBelief> {
        self.belief(&self.posterior.forward(&Tensor::cat(&[deter, embed], 1)?)?)
    }

    /// Advances with `action` and conditions on an already encoded frame.
    /// Also returns the prior belief from the same recurrent state.
    pub fn posterior_from_embed(
        &self,
        prev: &LatentState,
        action: &Tensor,
        embed: &Tensor,
        eps: &Tensor,
    ) -> Result<(LatentState, GaussianBelief)> {
        self.check_branch(prev)?;
        let deter = self.deter_step(prev, action)?;
        let prior = self.prior_belief(&deter)?;
        let belief = self.posterior_belief(&deter, embed)?;
        let stoch = belief.sample(eps)?;
        Ok((
            LatentState {
                deter,
                stoch,
                belief,
                branch: self.branch,
            },
            prior,
        ))
    }

    /// Filtering step on observation `[N, H*W*3]` in `[0, 1]`.
    pub fn posterior_step(&self, prev: &LatentState, action: &Tensor, obs: &Tensor, eps: &Tensor) -> Result<LatentState> {
        let embed = self.encode(obs)?;
        Ok(self.posterior_from_embed(prev, action, &embed, eps)?.0)
    }

    /// Open-loop step from the transition prior.
    pub fn prior_step(&self, prev: &LatentState, action: &Tensor, eps: &Tensor) -> Result<LatentState> {
        self.check_branch(prev)?;
        let deter = self.deter_step(prev, action)?;
        let belief = self.prior_belief(&deter)?;
        let stoch = belief.sample(eps)?;
        Ok(LatentState {
            deter,
            stoch,
            belief,
            branch: self.branch,
        })
    }

    pub fn noise(&self, n: usize, source: &mut NoiseSource) -> Result<Tensor> {
        let data = source.normal_vec(n * self.dims.stoch);
        crate::nn::tensor_from(&data, &[n, self.dims.stoch], self.dtype)
    }

    pub fn decode_features(&self, features: &Tensor) -> Result<DecodeOutput> {
        let decoder = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{} model has no image decoder", self.branch.as_str())))?;
        let out = decoder.forward(features)?;
        if decoder.channels() == 6 {
            let (image_mean, mask) = split_channels(&out, 6, 3)?;
            Ok(DecodeOutput {
                image_mean,
                mask_features: Some(mask),
            })
        } else {
            Ok(DecodeOutput {
                image_mean: out,
                mask_features: None,
            })
        }
    }

    pub fn decode_obs(&self, s: &LatentState) -> Result<DecodeOutput> {
        self.check_branch(s)?;
        self.decode_features(&s.features()?)
    }

    /// Reward mean `[N]` from features.
    pub fn reward_features(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.reward.forward(features)?.squeeze(1)?)
    }

    pub fn reward(&self, s: &LatentState) -> Result<Tensor> {
        self.check_branch(s)?;
        self.reward_features(&s.features()?)
    }

    pub(crate) fn reward_head(&self) -> &Mlp {
        &self.reward
    }

    /// Posterior unroll over `obs [B*L, D]` and `actions [B*L, 2]`, starting
    /// from the zero state. Step `t` consumes the action stored with frame `t`.
    pub fn observe(
        &self,
        obs: &Tensor,
        actions: &Tensor,
        batch: usize,
        length: usize,
        noise: &mut NoiseSource,
    ) -> Result<Rollout> {
        let embed = self.encode(obs)?;
        let embed = embed.reshape((batch, length, self.dims.embed))?;
        let actions = actions.reshape((batch, length, ACTION_DIM))?;
        let mut state = self.initial(batch)?;
        let mut posts = Vec::with_capacity(length);
        let mut priors = Vec::with_capacity(length);
        for t in 0..length {
            let eps = self.noise(batch, noise)?;
            let (next, prior) = self.posterior_from_embed(
                &state,
                &actions.narrow(1, t, 1)?.squeeze(1)?,
                &embed.narrow(1, t, 1)?.squeeze(1)?,
                &eps,
            )?;
            posts.push(next.clone());
            priors.push(prior);
            state = next;
        }
        Ok(Rollout {
            posterior: LatentState::stack(&posts)?,
            prior: GaussianBelief::stack(&priors)?,
            batch,
            length,
        })
    }
}

#[cfg(test)]
mod tests;
