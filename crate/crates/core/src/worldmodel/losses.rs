//! Objectives. Every `J_*` value is a quantity to maximize; the tensor
//! handed to the optimizer is the negated sum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{DecodeOutput, DreamerModel, GaussianBelief, InverseModel, LatentState, Mixer, ModelBundle};
use crate::env::ACTION_DIM;
use crate::error::{Error, Result};
use crate::nn::{gaussian_nll, scalar_f64, tensor_from, Adam};
use crate::replay::SequenceBatch;
use crate::seeding::{derive_seed, NoiseSource, STREAM_MODEL_NOISE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_radv: f64,
    pub lambda_os: f64,
    pub beta: f64,
    pub free_nats: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_radv: 600.0,
            lambda_os: 2.0,
            beta: 1.0,
            free_nats: 3.0,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub J_Oj: f64,
    pub J_Os: f64,
    pub J_R: f64,
    pub J_Radv: f64,
    pub J_D: f64,
    pub J_Ds: f64,
    pub total_task: f64,
    pub total_distractor: f64,
}

impl LossBreakdown {
    #[allow(non_snake_case)]
    pub fn new(J_Oj: f64, J_Os: f64, J_R: f64, J_Radv: f64, J_D: f64, J_Ds: f64) -> Self {
        Self {
            J_Oj,
            J_Os,
            J_R,
            J_Radv,
            J_D,
            J_Ds,
            total_task: J_Oj + J_R + J_D,
            total_distractor: J_Oj + J_Os + J_Radv + J_Ds,
        }
    }
}

/// Scalar tensors of every term, still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub j_oj: Tensor,
    pub j_os: Tensor,
    pub j_r: Tensor,
    pub j_radv: Tensor,
    pub j_d: Tensor,
    pub j_ds: Tensor,
    /// Inverse-dynamics log-likelihood, only for that variant.
    pub j_inv: Option<Tensor>,
}

impl LossTerms {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("J_Oj", &self.j_oj),
            ("J_Os", &self.j_os),
            ("J_R", &self.j_r),
            ("J_Radv", &self.j_radv),
            ("J_D", &self.j_d),
            ("J_Ds", &self.j_ds),
        ];
        if let Some(t) = &self.j_inv {
            out.push(("J_inv", t));
        }
        out
    }

    /// Negated sum of all terms, the quantity to minimize.
    pub fn objective(&self) -> Result<Tensor> {
        let mut sum = (&self.j_oj + &self.j_os)?;
        for t in [&self.j_r, &self.j_radv, &self.j_d, &self.j_ds] {
            sum = (sum + t)?;
        }
        if let Some(t) = &self.j_inv {
            sum = (sum + t)?;
        }
        Ok(sum.neg()?)
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown::new(
            scalar_f64(&self.j_oj)?,
            scalar_f64(&self.j_os)?,
            scalar_f64(&self.j_r)?,
            scalar_f64(&self.j_radv)?,
            scalar_f64(&self.j_d)?,
            scalar_f64(&self.j_ds)?,
        ))
    }
}

/// Diagnostics gathered alongside the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub task_reward_nll: f64,
    pub distractor_reward_nll: Option<f64>,
    pub joint_recon_nll: Option<f64>,
    pub distractor_recon_nll: Option<f64>,
    pub mask_coverage: Option<f64>,
    pub inverse_nll: Option<f64>,
    pub kl_task: f64,
    pub kl_distractor: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub terms: LossTerms,
    pub objective: Tensor,
    pub stats: LossStats,
    /// Task posteriors `[B*L]`, attached to the graph.
    pub task_states: LatentState,
    /// Distractor features `[B*L, F]`, attached to the graph.
    pub distractor_features: Option<Tensor>,
}

/// Observations `[N, D]`, actions `[N, 2]` and rewards `[N]` of a batch.
pub fn batch_tensors(batch: &SequenceBatch, dtype: DType) -> Result<(Tensor, Tensor, Tensor)> {
    let n = batch.batch * batch.length;
    let obs = Tensor::from_slice(&batch.observations, (n, batch.obs_len()), &candle_core::Device::Cpu)?
        .to_dtype(dtype)?;
    let actions = tensor_from(&batch.actions, &[n, ACTION_DIM], dtype)?;
    let rewards = tensor_from(&batch.rewards, &[n], dtype)?;
    Ok((obs, actions, rewards))
}

/// `Σ_pixels [½ln2π + ½(pred − target)²]`, averaged over rows.
pub fn gaussian_image_nll(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    gaussian_nll(pred, target)
}

/// Mean NLL of rewards `[N]` under unit-variance Gaussians at `pred [N]`.
pub fn reward_nll(pred: &Tensor, reward: &Tensor) -> Result<Tensor> {
    let n = pred.dim(0)?;
    gaussian_nll(&pred.reshape((n, 1))?, &reward.reshape((n, 1))?)
}

/// Closed-form `KL(posterior ‖ prior)` per row, summed over dimensions.
pub fn kl_divergence(posterior: &GaussianBelief, prior: &GaussianBelief) -> Result<Tensor> {
    let var_q = posterior.std.sqr()?;
    let var_p = prior.std.sqr()?;
    let log_ratio = (prior.std.log()? - posterior.std.log()?)?;
    let diff = (&posterior.mean - &prior.mean)?.sqr()?;
    let quad = ((var_q + diff)? / var_p.affine(2.0, 0.0)?)?;
    Ok((log_ratio + quad)?.affine(1.0, -0.5)?.sum(1)?)
}

fn check_std(belief: &GaussianBelief, what: &str) -> Result<()> {
    let min = scalar_f64(&belief.std.flatten_all()?.min(0)?)?;
    if min.is_nan() || min <= 0.0 {
        return Err(Error::InvalidBelief(format!("{what} std has non-positive entry {min}")));
    }
    Ok(())
}

/// `−β · max(mean KL − free_nats, 0)`. Also returns the mean KL.
pub fn kl_regularizer(
    posterior: &GaussianBelief,
    prior: &GaussianBelief,
    beta: f64,
    free_nats: f64,
) -> Result<(Tensor, f64)> {
    check_std(posterior, "posterior")?;
    check_std(prior, "prior")?;
    let kl = kl_divergence(posterior, prior)?.mean_all()?;
    let value = scalar_f64(&kl)?;
    Ok((kl.affine(1.0, -free_nats)?.relu()?.affine(-beta, 0.0)?, value))
}

/// Blends the two decoded images with the learned mask. Returns the mask
/// `[N, P]` and the joint image `[N, P*3]`.
pub fn mix(task: &DecodeOutput, distractor: &DecodeOutput, mixer: &Mixer) -> Result<(Tensor, Tensor)> {
    let missing = || Error::Shape("decoder output has no mask features".into());
    let tf = task.mask_features.as_ref().ok_or_else(missing)?;
    let df = distractor.mask_features.as_ref().ok_or_else(missing)?;
    if task.image_mean.dims() != distractor.image_mean.dims() || tf.dims() != df.dims() {
        return Err(Error::Shape(format!(
            "task output {:?} vs distractor output {:?}",
            task.image_mean.dims(),
            distractor.image_mean.dims()
        )));
    }
    let mask = mixer.mask(tf, df)?;
    let n = mask.dim(0)?;
    let pixels = mask.dim(1)?;
    let m = mask.reshape((n, pixels, 1))?;
    let ti = task.image_mean.reshape((n, pixels, 3))?;
    let di = distractor.image_mean.reshape((n, pixels, 3))?;
    let joint = (ti.broadcast_mul(&m)? + di.broadcast_mul(&m.affine(-1.0, 1.0)?)?)?;
    Ok((mask, joint.reshape((n, pixels * 3))?))
}

fn noise_sources(seed: u64) -> (NoiseSource, NoiseSource) {
    (
        NoiseSource::new(derive_seed(seed, STREAM_MODEL_NOISE, 0)),
        NoiseSource::new(derive_seed(seed, STREAM_MODEL_NOISE, 1)),
    )
}

fn require_length(batch: &SequenceBatch) -> Result<()> {
    if batch.length < 2 {
        return Err(Error::Shape(format!("sequence length {} is below 2", batch.length)));
    }
    Ok(())
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &candle_core::Device::Cpu)?)
}

/// All six terms of the paired objective on one batch. One backward pass on
/// `objective` routes each term only to the parameters it depends on; the
/// adversarial head enters as a constant.
pub fn compute_losses(bundle: &ModelBundle, batch: &SequenceBatch, config: &LossConfig, noise_seed: u64) -> Result<LossOutput> {
    require_length(batch)?;
    let dtype = bundle.params.dtype();
    let (obs, actions, rewards) = batch_tensors(batch, dtype)?;
    let (mut task_noise, mut dist_noise) = noise_sources(noise_seed);
    let (b, l) = (batch.batch, batch.length);
    let task_roll = bundle.task.observe(&obs, &actions, b, l, &mut task_noise)?;
    let dist_roll = bundle.distractor.observe(&obs, &actions, b, l, &mut dist_noise)?;
    let ft = task_roll.posterior.features()?;
    let fd = dist_roll.posterior.features()?;

    let (mask, joint) = mix(
        &bundle.task.decode_features(&ft)?,
        &bundle.distractor.decode_features(&fd)?,
        &bundle.mixer,
    )?;
    let joint_nll = gaussian_image_nll(&joint, &obs)?;
    let solo_nll = gaussian_image_nll(&bundle.solo_decoder.forward(&fd)?, &obs)?;
    let task_r_nll = reward_nll(&bundle.task.reward_features(&ft)?, &rewards)?;
    let frozen_head = bundle.distractor.reward_head().detached();
    let adv_nll = reward_nll(&frozen_head.forward(&fd)?.squeeze(1)?, &rewards)?;
    let (j_d, kl_task) = kl_regularizer(&task_roll.posterior.belief, &task_roll.prior, config.beta, config.free_nats)?;
    let (j_ds, kl_dist) = kl_regularizer(&dist_roll.posterior.belief, &dist_roll.prior, config.beta, config.free_nats)?;

    let terms = LossTerms {
        j_oj: joint_nll.neg()?,
        j_os: solo_nll.affine(-config.lambda_os, 0.0)?,
        j_r: task_r_nll.neg()?,
        j_radv: adv_nll.affine(config.lambda_radv, 0.0)?,
        j_d,
        j_ds,
        j_inv: None,
    };
    let stats = LossStats {
        task_reward_nll: scalar_f64(&task_r_nll)?,
        distractor_reward_nll: Some(scalar_f64(&adv_nll)?),
        joint_recon_nll: Some(scalar_f64(&joint_nll)?),
        distractor_recon_nll: Some(scalar_f64(&solo_nll)?),
        mask_coverage: Some(scalar_f64(&mask.mean_all()?)?),
        inverse_nll: None,
        kl_task,
        kl_distractor: Some(kl_dist),
    };
    Ok(LossOutput {
        breakdown: terms.breakdown()?,
        objective: terms.objective()?,
        terms,
        stats,
        task_states: task_roll.posterior,
        distractor_features: Some(fd),
    })
}

/// Single-model objective: reconstruction, reward and KL of one model.
pub fn dreamer_baseline_loss(
    model: &DreamerModel,
    batch: &SequenceBatch,
    config: &LossConfig,
    noise_seed: u64,
) -> Result<LossOutput> {
    require_length(batch)?;
    let m = &model.model;
    let dtype = m.dtype();
    let (obs, actions, rewards) = batch_tensors(batch, dtype)?;
    let (mut noise, _) = noise_sources(noise_seed);
    let roll = m.observe(&obs, &actions, batch.batch, batch.length, &mut noise)?;
    let ft = roll.posterior.features()?;
    let recon_nll = gaussian_image_nll(&m.decode_features(&ft)?.image_mean, &obs)?;
    let r_nll = reward_nll(&m.reward_features(&ft)?, &rewards)?;
    let (j_d, kl_task) = kl_regularizer(&roll.posterior.belief, &roll.prior, config.beta, config.free_nats)?;
    let terms = LossTerms {
        j_oj: recon_nll.neg()?,
        j_os: zero(dtype)?,
        j_r: r_nll.neg()?,
        j_radv: zero(dtype)?,
        j_d,
        j_ds: zero(dtype)?,
        j_inv: None,
    };
    let stats = LossStats {
        task_reward_nll: scalar_f64(&r_nll)?,
        joint_recon_nll: Some(scalar_f64(&recon_nll)?),
        kl_task,
        ..Default::default()
    };
    Ok(LossOutput {
        breakdown: terms.breakdown()?,
        objective: terms.objective()?,
        terms,
        stats,
        task_states: roll.posterior,
        distractor_features: None,
    })
}

/// Inverse-dynamics objective: action likelihood from consecutive latent
/// pairs plus reward and KL. No reconstruction term.
pub fn inverse_model_loss(
    model: &InverseModel,
    batch: &SequenceBatch,
    config: &LossConfig,
    noise_seed: u64,
) -> Result<LossOutput> {
    require_length(batch)?;
    let m = &model.model;
    let dtype = m.dtype();
    let (obs, actions, rewards) = batch_tensors(batch, dtype)?;
    let (mut noise, _) = noise_sources(noise_seed);
    let (b, l) = (batch.batch, batch.length);
    let roll = m.observe(&obs, &actions, b, l, &mut noise)?;
    let ft = roll.posterior.features()?;
    let f = ft.dim(1)?;
    let seq = ft.reshape((b, l, f))?;
    let pairs = Tensor::cat(&[seq.narrow(1, 0, l - 1)?, seq.narrow(1, 1, l - 1)?], 2)?
        .reshape((b * (l - 1), 2 * f))?;
    // the action stored with frame t+1 is the one taken between t and t+1
    let target = actions
        .reshape((b, l, ACTION_DIM))?
        .narrow(1, 1, l - 1)?
        .reshape((b * (l - 1), ACTION_DIM))?;
    let inv_nll = gaussian_nll(&model.inverse.forward(&pairs)?, &target)?;
    let r_nll = reward_nll(&m.reward_features(&ft)?, &rewards)?;
    let (j_d, kl_task) = kl_regularizer(&roll.posterior.belief, &roll.prior, config.beta, config.free_nats)?;
    let terms = LossTerms {
        j_oj: zero(dtype)?,
        j_os: zero(dtype)?,
        j_r: r_nll.neg()?,
        j_radv: zero(dtype)?,
        j_d,
        j_ds: zero(dtype)?,
        j_inv: Some(inv_nll.neg()?),
    };
    let stats = LossStats {
        task_reward_nll: scalar_f64(&r_nll)?,
        inverse_nll: Some(scalar_f64(&inv_nll)?),
        kl_task,
        ..Default::default()
    };
    Ok(LossOutput {
        breakdown: terms.breakdown()?,
        objective: terms.objective()?,
        terms,
        stats,
        task_states: roll.posterior,
        distractor_features: None,
    })
}

/// `k` optimizer steps of the adversarial head on fixed distractor features.
/// Returns the head's reward NLL before each step and after the last one.
pub fn adversarial_head_update(
    bundle: &ModelBundle,
    features: &Tensor,
    rewards: &Tensor,
    iterations: usize,
    optimizer: &mut Adam,
) -> Result<Vec<f64>> {
    let features = features.detach();
    let head = bundle.distractor.reward_head();
    let mut history = Vec::with_capacity(iterations + 1);
    for i in 0..=iterations {
        let nll = reward_nll(&head.forward(&features)?.squeeze(1)?, rewards)?;
        history.push(scalar_f64(&nll)?);
        if i < iterations {
            optimizer.step(&nll.backward()?)?;
        }
    }
    if iterations == 0 {
        history.clear();
    }
    Ok(history)
}
