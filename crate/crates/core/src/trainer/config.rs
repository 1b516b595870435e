use std::path::Path;

use serde::{Deserialize, Serialize};

use super::diagnose::DiagnoseThresholds;
use crate::agent::AgentConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::worldmodel::{LossConfig, SizePreset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentVariant {
    Tia,
    Dreamer,
    DreamerInverse,
}

impl AgentVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Tia => "tia",
            Self::Dreamer => "dreamer",
            Self::DreamerInverse => "dreamer_inverse",
        }
    }
}

impl std::str::FromStr for AgentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tia" => Ok(Self::Tia),
            "dreamer" => Ok(Self::Dreamer),
            "dreamer_inverse" => Ok(Self::DreamerInverse),
            other => Err(Error::Config(format!("unknown agent_variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> candle_core::DType {
        match self {
            Self::F32 => candle_core::DType::F32,
            Self::F64 => candle_core::DType::F64,
        }
    }
}

/// Every tunable of a run. Environment keys sit in the same flat file and
/// are split off into [`EnvConfig`] when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(skip)]
    pub env: EnvConfig,
    pub seed: u64,
    pub agent_variant: AgentVariant,
    /// Label grouping runs in plots; derived from the settings when unset.
    pub tag: Option<String>,
    #[serde(rename = "lambda_Radv")]
    pub lambda_radv: f64,
    #[serde(rename = "lambda_Os")]
    pub lambda_os: f64,
    /// Optional linear schedules from the start values to these end values
    /// over `lambda_schedule_steps` env steps.
    #[serde(rename = "lambda_Radv_end")]
    pub lambda_radv_end: Option<f64>,
    #[serde(rename = "lambda_Os_end")]
    pub lambda_os_end: Option<f64>,
    pub lambda_schedule_steps: u64,
    pub beta: f64,
    pub free_nats: f64,
    pub gamma: f64,
    pub return_lambda: f64,
    pub horizon: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub width_multiplier: f64,
    pub size_preset: SizePreset,
    /// Shrink each paired model so both together match the baseline's size.
    pub match_param_budget: bool,
    pub adversarial_iters: usize,
    pub total_env_steps: u64,
    /// Agent steps between training updates.
    pub train_every: usize,
    pub prefill_episodes: usize,
    pub replay_capacity: usize,
    pub model_lr: f64,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub min_std: f64,
    pub expl_noise: f64,
    /// Updates between metrics records.
    pub log_every: u64,
    pub eval_batch_size: usize,
    /// Updates between checkpoints (written at the next episode boundary).
    pub checkpoint_every: u64,
    pub persist_episodes: bool,
    pub parallel_envs: usize,
    pub precision: Precision,
    pub type1_coverage: f64,
    pub type2_coverage: f64,
    pub type2_excess_ratio: f64,
    pub random_band_sigmas: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            seed: 0,
            agent_variant: AgentVariant::Tia,
            tag: None,
            lambda_radv: 600.0,
            lambda_os: 2.0,
            lambda_radv_end: None,
            lambda_os_end: None,
            lambda_schedule_steps: 0,
            beta: 1.0,
            free_nats: 3.0,
            gamma: 0.99,
            return_lambda: 0.95,
            horizon: 15,
            batch_size: 16,
            seq_len: 32,
            width_multiplier: 1.0,
            size_preset: SizePreset::Standard,
            match_param_budget: true,
            adversarial_iters: 4,
            total_env_steps: 50_000,
            train_every: 5,
            prefill_episodes: 5,
            replay_capacity: 100_000,
            model_lr: 3e-3,
            actor_lr: 8e-5,
            value_lr: 8e-5,
            adam_eps: 1e-7,
            grad_clip: 100.0,
            min_std: 0.1,
            expl_noise: 0.3,
            log_every: 1,
            eval_batch_size: 8,
            checkpoint_every: 1000,
            persist_episodes: false,
            parallel_envs: 1,
            precision: Precision::F32,
            type1_coverage: 0.05,
            type2_coverage: 0.95,
            type2_excess_ratio: 2.0,
            random_band_sigmas: 3.0,
        }
    }
}

impl TrainConfig {
    /// Parses the flat key-value file; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let (env_table, rest): (toml::Table, toml::Table) = table
            .into_iter()
            .partition(|(k, _)| EnvConfig::FIELDS.contains(&k.as_str()));
        let env: EnvConfig = toml::Value::Table(env_table)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        let mut config: TrainConfig = toml::Value::Table(rest)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        config.env = env;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Flat text that [`TrainConfig::from_toml`] reads back to an equal value.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(format!("{e}")))?;
        let env = toml::Table::try_from(&self.env).map_err(|e| Error::Config(format!("{e}")))?;
        table.extend(env);
        toml::to_string(&table).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let scalars = [
            ("lambda_Radv", self.lambda_radv),
            ("lambda_Os", self.lambda_os),
            ("beta", self.beta),
            ("free_nats", self.free_nats),
            ("gamma", self.gamma),
            ("return_lambda", self.return_lambda),
            ("model_lr", self.model_lr),
            ("actor_lr", self.actor_lr),
            ("value_lr", self.value_lr),
            ("adam_eps", self.adam_eps),
            ("grad_clip", self.grad_clip),
            ("min_std", self.min_std),
            ("expl_noise", self.expl_noise),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        for (name, v) in [("lambda_Radv", self.lambda_radv), ("lambda_Os", self.lambda_os)]
            .into_iter()
            .chain(self.lambda_radv_end.map(|v| ("lambda_Radv_end", v)))
            .chain(self.lambda_os_end.map(|v| ("lambda_Os_end", v)))
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.return_lambda) {
            return Err(Error::Config("return_lambda must lie in [0, 1]".into()));
        }
        if ![0.5, 1.0, 2.0].contains(&self.width_multiplier) {
            return Err(Error::Config(format!(
                "width_multiplier must be 0.5, 1 or 2 (got {})",
                self.width_multiplier
            )));
        }
        if self.min_std <= 0.0 {
            return Err(Error::Config("min_std must be positive".into()));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("train_every", self.train_every),
            ("eval_batch_size", self.eval_batch_size),
            ("parallel_envs", self.parallel_envs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.seq_len > self.env.agent_steps_per_episode() {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the {} agent steps of an episode",
                self.seq_len,
                self.env.agent_steps_per_episode()
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if self.prefill_episodes == 0 {
            return Err(Error::Config("prefill_episodes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self, env_step: u64) -> LossConfig {
        let frac = if self.lambda_schedule_steps == 0 {
            1.0
        } else {
            (env_step as f64 / self.lambda_schedule_steps as f64).min(1.0)
        };
        let lerp = |a: f64, b: Option<f64>| b.map_or(a, |b| a + (b - a) * frac);
        LossConfig {
            lambda_radv: lerp(self.lambda_radv, self.lambda_radv_end),
            lambda_os: lerp(self.lambda_os, self.lambda_os_end),
            beta: self.beta,
            free_nats: self.free_nats,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            horizon: self.horizon,
            gamma: self.gamma,
            return_lambda: self.return_lambda,
            expl_noise: self.expl_noise,
        }
    }

    pub fn thresholds(&self) -> DiagnoseThresholds {
        DiagnoseThresholds {
            type1_coverage: self.type1_coverage,
            type2_coverage: self.type2_coverage,
            type2_excess_ratio: self.type2_excess_ratio,
            band_sigmas: self.random_band_sigmas,
        }
    }

    pub fn config_tag(&self) -> String {
        if let Some(tag) = &self.tag {
            return tag.clone();
        }
        let mut tag = format!(
            "{}-d{}-{}-w{}",
            self.agent_variant.as_str(),
            self.env.n_distractors,
            self.env.background_mode.as_str(),
            self.width_multiplier
        );
        if self.agent_variant == AgentVariant::Tia {
            tag.push_str(&format!("-radv{}-os{}", self.lambda_radv, self.lambda_os));
        }
        tag
    }
}
