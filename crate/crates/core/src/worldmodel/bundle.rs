use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{Branch, LatentModel};
use crate::error::Result;
use crate::nn::{sigmoid, Linear, Mlp, ParamSet, PatchDecoder};
use crate::seeding::{derive_seed, rng_from, STREAM_INIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePreset {
    Standard,
    Tiny,
}

/// Layer widths of one latent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub image_size: usize,
    pub stoch: usize,
    pub deter: usize,
    pub hidden: usize,
    pub embed: usize,
    pub c1: usize,
    pub c2: usize,
}

fn scaled(base: f64, scale: f64, lo: usize, hi: usize) -> usize {
    ((base * scale).round() as usize).clamp(lo, hi)
}

impl ModelDims {
    /// Base widths scaled by `scale`; the stochastic and recurrent sizes are
    /// kept within 8..=32 and 32..=200.
    pub fn standard(image_size: usize, scale: f64) -> Self {
        Self {
            image_size,
            stoch: scaled(16.0, scale, 8, 32),
            deter: scaled(100.0, scale, 32, 200),
            hidden: scaled(100.0, scale, 16, 400),
            embed: scaled(128.0, scale, 16, 512),
            c1: scaled(16.0, scale, 4, 64),
            c2: scaled(32.0, scale, 4, 128),
        }
    }

    /// Minimal widths for analytic and gradient tests.
    pub fn tiny(image_size: usize) -> Self {
        Self {
            image_size,
            stoch: 4,
            deter: 4,
            hidden: 8,
            embed: 8,
            c1: 4,
            c2: 4,
        }
    }

    pub fn preset(preset: SizePreset, image_size: usize, scale: f64) -> Self {
        match preset {
            SizePreset::Standard => Self::standard(image_size, scale),
            SizePreset::Tiny => Self::tiny(image_size),
        }
    }

    pub fn features(&self) -> usize {
        self.deter + self.stoch
    }

    pub fn obs_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }
}

/// Per-pixel 1×1 convolution over the six stacked mask-feature channels.
#[derive(Debug, Clone)]
pub struct Mixer {
    lin: Linear,
}

impl Mixer {
    pub fn new(params: &mut ParamSet, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        Ok(Self {
            lin: Linear::new(params, "mixer", 6, 1, &mut rng)?,
        })
    }

    /// Mask `[N, P]` from task and distractor mask features `[N, P*3]`.
    pub fn mask(&self, task: &Tensor, distractor: &Tensor) -> Result<Tensor> {
        let n = task.dim(0)?;
        let pixels = task.dim(1)? / 3;
        let t = task.reshape((n * pixels, 3))?;
        let d = distractor.reshape((n * pixels, 3))?;
        let logits = self.lin.forward(&Tensor::cat(&[&t, &d], 1)?)?;
        sigmoid(&logits.reshape((n, pixels))?)
    }
}

/// The paired task and distractor models with the mixer, the distractor's
/// solo decoder and its adversarial reward head (the distractor model's
/// reward head).
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub params: ParamSet,
    pub task: LatentModel,
    pub distractor: LatentModel,
    pub solo_decoder: PatchDecoder,
    pub mixer: Mixer,
}

pub const TASK_PREFIX: &str = "task/";
pub const DISTRACTOR_PREFIX: &str = "distractor/";
pub const ADV_HEAD_PREFIX: &str = "distractor/adv_reward/";

impl ModelBundle {
    pub fn new(task_dims: ModelDims, distractor_dims: ModelDims, min_std: f64, dtype: DType, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new(dtype);
        let mut rng = rng_from(derive_seed(seed, STREAM_INIT, 0));
        let task = LatentModel::new(&mut params, Branch::Task, "task", "reward", task_dims, Some(6), min_std, &mut rng)?;
        let mut rng = rng_from(derive_seed(seed, STREAM_INIT, 1));
        let distractor = LatentModel::new(
            &mut params,
            Branch::Distractor,
            "distractor",
            "adv_reward",
            distractor_dims,
            Some(6),
            min_std,
            &mut rng,
        )?;
        let d = distractor_dims;
        let solo_decoder = PatchDecoder::new(
            &mut params,
            "distractor/solo_decoder",
            d.image_size,
            (d.features(), d.c1, d.c2),
            3,
            &mut rng,
        )?;
        let mixer = Mixer::new(&mut params, derive_seed(seed, STREAM_INIT, 2))?;
        Ok(Self {
            params,
            task,
            distractor,
            solo_decoder,
            mixer,
        })
    }

    /// Parameters updated from the task objective: the task model and mixer.
    pub fn task_group(&self) -> Vec<(String, candle_core::Var)> {
        self.params
            .select(|n| n.starts_with(TASK_PREFIX) || n.starts_with("mixer/"))
    }

    /// Distractor model parameters other than the adversarial head.
    pub fn distractor_group(&self) -> Vec<(String, candle_core::Var)> {
        self.params
            .select(|n| n.starts_with(DISTRACTOR_PREFIX) && !n.starts_with(ADV_HEAD_PREFIX))
    }

    pub fn adversarial_group(&self) -> Vec<(String, candle_core::Var)> {
        self.params.select(|n| n.starts_with(ADV_HEAD_PREFIX))
    }

    pub fn task_param_count(&self) -> usize {
        self.params.count(TASK_PREFIX)
    }

    pub fn distractor_param_count(&self) -> usize {
        self.params.count(DISTRACTOR_PREFIX)
    }
}

/// Single-model baseline with one image decoder.
#[derive(Debug, Clone)]
pub struct DreamerModel {
    pub params: ParamSet,
    pub model: LatentModel,
}

impl DreamerModel {
    pub fn new(dims: ModelDims, min_std: f64, dtype: DType, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new(dtype);
        let mut rng = rng_from(derive_seed(seed, STREAM_INIT, 0));
        let model = LatentModel::new(&mut params, Branch::Task, "task", "reward", dims, Some(3), min_std, &mut rng)?;
        Ok(Self { params, model })
    }

    /// Shares the task branch of `bundle`, keeping only the image channels
    /// of its decoder.
    pub fn from_task_branch(bundle: &ModelBundle) -> Result<Self> {
        Ok(Self {
            params: ParamSet::from_entries(
                bundle.params.dtype(),
                bundle.params.select(|n| n.starts_with(TASK_PREFIX)),
            ),
            model: bundle.task.with_decoder_channels(3)?,
        })
    }
}

/// Baseline that replaces reconstruction with an inverse-dynamics head
/// predicting `a` from consecutive latents.
#[derive(Debug, Clone)]
pub struct InverseModel {
    pub params: ParamSet,
    pub model: LatentModel,
    pub inverse: Mlp,
}

impl InverseModel {
    pub fn new(dims: ModelDims, min_std: f64, dtype: DType, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new(dtype);
        let mut rng = rng_from(derive_seed(seed, STREAM_INIT, 0));
        let model = LatentModel::new(&mut params, Branch::Task, "task", "reward", dims, None, min_std, &mut rng)?;
        let f = dims.features();
        let inverse = Mlp::new(
            &mut params,
            "task/inverse",
            &[2 * f, dims.hidden, dims.hidden, crate::env::ACTION_DIM],
            &mut rng,
        )?;
        Ok(Self {
            params,
            model,
            inverse,
        })
    }
}

#[derive(Debug, Clone)]
pub enum WorldModel {
    Tia(ModelBundle),
    Dreamer(DreamerModel),
    Inverse(InverseModel),
}

impl WorldModel {
    pub fn params(&self) -> &ParamSet {
        match self {
            WorldModel::Tia(b) => &b.params,
            WorldModel::Dreamer(d) => &d.params,
            WorldModel::Inverse(m) => &m.params,
        }
    }

    /// The model the policy reads from.
    pub fn task(&self) -> &LatentModel {
        match self {
            WorldModel::Tia(b) => &b.task,
            WorldModel::Dreamer(d) => &d.model,
            WorldModel::Inverse(m) => &m.model,
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            WorldModel::Tia(_) => "tia",
            WorldModel::Dreamer(_) => "dreamer",
            WorldModel::Inverse(_) => "dreamer_inverse",
        }
    }

    pub fn bundle(&self) -> Option<&ModelBundle> {
        match self {
            WorldModel::Tia(b) => Some(b),
            _ => None,
        }
    }

    /// Parameter groups stepped by separate optimizers.
    pub fn groups(&self) -> Vec<(&'static str, Vec<(String, candle_core::Var)>)> {
        match self {
            WorldModel::Tia(b) => vec![
                ("task", b.task_group()),
                ("distractor", b.distractor_group()),
                ("adversarial", b.adversarial_group()),
            ],
            other => vec![("task", other.params().select(|_| true))],
        }
    }
}

/// Dreamer parameter count at `scale`.
pub fn dreamer_param_count(image_size: usize, scale: f64) -> Result<usize> {
    let m = DreamerModel::new(ModelDims::standard(image_size, scale), 0.1, DType::F32, 0)?;
    Ok(m.params.count(""))
}

/// Per-model scale at which the paired models together roughly match the
/// baseline's parameter count at `scale`.
pub fn matched_scale(image_size: usize, scale: f64) -> Result<f64> {
    let target = dreamer_param_count(image_size, scale)? as f64;
    let mut best = (f64::INFINITY, scale);
    let mut s = 0.3 * scale;
    while s <= scale + 1e-9 {
        let dims = ModelDims::standard(image_size, s);
        let n = ModelBundle::new(dims, dims, 0.1, DType::F32, 0)?.params.count("") as f64;
        let gap = (n - target).abs();
        if gap < best.0 {
            best = (gap, s);
        }
        s += 0.02 * scale;
    }
    Ok(best.1)
}
