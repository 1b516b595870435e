use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::HALF_LN_2PI;
use crate::worldmodel::LossBreakdown;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub env_step: u64,
    /// Return of the most recently finished episode.
    pub episodic_return: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub task_reward_nll: f64,
    pub distractor_reward_nll: Option<f64>,
    pub mean_predictor_nll: f64,
    /// Mean blend mask over the fixed evaluation batch.
    pub mask_coverage: Option<f64>,
    pub joint_recon_nll: Option<f64>,
    pub distractor_recon_nll: Option<f64>,
    /// Reconstruction NLL of a perfect unit-variance decoder.
    pub recon_floor: f64,
    pub random_return_mean: f64,
    pub random_return_std: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub config_tag: String,
    pub wall_time: f64,
}

impl MetricsRecord {
    /// Every numeric field by name; absent optional values are skipped.
    pub fn numeric_fields(&self) -> Vec<(&'static str, f64)> {
        let l = &self.losses;
        let mut out = vec![
            ("episodic_return", self.episodic_return),
            ("J_Oj", l.J_Oj),
            ("J_Os", l.J_Os),
            ("J_R", l.J_R),
            ("J_Radv", l.J_Radv),
            ("J_D", l.J_D),
            ("J_Ds", l.J_Ds),
            ("total_task", l.total_task),
            ("total_distractor", l.total_distractor),
            ("task_reward_nll", self.task_reward_nll),
            ("mean_predictor_nll", self.mean_predictor_nll),
            ("recon_floor", self.recon_floor),
            ("random_return_mean", self.random_return_mean),
            ("random_return_std", self.random_return_std),
            ("actor_loss", self.actor_loss),
            ("critic_loss", self.critic_loss),
            ("wall_time", self.wall_time),
        ];
        let optional = [
            ("distractor_reward_nll", self.distractor_reward_nll),
            ("mask_coverage", self.mask_coverage),
            ("joint_recon_nll", self.joint_recon_nll),
            ("distractor_recon_nll", self.distractor_recon_nll),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out
    }

    pub fn non_finite_field(&self) -> Option<&'static str> {
        self.numeric_fields()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k)
    }

    /// The record without its wall-clock time, for reproducibility checks.
    pub fn without_wall_time(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// Per-sample NLL of each reward under `N(running mean of earlier rewards, 1)`.
/// The first reward is scored against a mean of zero.
pub fn mean_predictor_nlls(history: &[f64]) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut predictor = MeanPredictor::default();
    Ok(history
        .iter()
        .map(|&r| {
            let nll = predictor.nll(r);
            predictor.observe(r);
            nll
        })
        .collect())
}

/// Average of [`mean_predictor_nlls`].
pub fn mean_predictor_nll(history: &[f64]) -> Result<f64> {
    let nlls = mean_predictor_nlls(history)?;
    Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

/// Uninformed reward predictor that always guesses the running average.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanPredictor {
    pub sum: f64,
    pub count: u64,
}

impl MeanPredictor {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn observe(&mut self, reward: f64) {
        self.sum += reward;
        self.count += 1;
    }

    pub fn nll(&self, reward: f64) -> f64 {
        HALF_LN_2PI + 0.5 * (reward - self.mean()).powi(2)
    }

    pub fn mean_nll(&self, rewards: &[f64]) -> f64 {
        rewards.iter().map(|&r| self.nll(r)).sum::<f64>() / rewards.len().max(1) as f64
    }
}

pub fn append_record(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Rewrites the log keeping only records up to and including `env_step`.
pub fn truncate_log(path: &Path, env_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<_> = read_log(path)?
        .into_iter()
        .filter(|r| r.env_step <= env_step)
        .collect();
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut file = File::create(&tmp)?;
        for r in &kept {
            writeln!(file, "{}", serde_json::to_string(r)?)?;
        }
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn record(env_step: u64) -> MetricsRecord {
        MetricsRecord {
            env_step,
            episodic_return: 0.0,
            losses: LossBreakdown::default(),
            task_reward_nll: 1.0,
            distractor_reward_nll: Some(1.5),
            mean_predictor_nll: 1.5,
            mask_coverage: Some(0.4),
            joint_recon_nll: Some(3000.0),
            distractor_recon_nll: Some(3000.0),
            recon_floor: 2822.0,
            random_return_mean: 10.0,
            random_return_std: 2.0,
            actor_loss: 0.0,
            critic_loss: 0.0,
            config_tag: "t".into(),
            wall_time: 1.0,
        }
    }

    #[test]
    fn mean_predictor_examples() {
        let nlls = mean_predictor_nlls(&[0.0, 2.0]).unwrap();
        assert!((nlls[0] - 0.918939).abs() < 1e-6);
        assert!((nlls[1] - 2.918939).abs() < 1e-6);
        assert!((mean_predictor_nll(&[0.0; 20]).unwrap() - 0.918939).abs() < 1e-6);
        assert!(matches!(mean_predictor_nll(&[]), Err(Error::EmptyHistory)));
    }

    #[test]
    fn mean_predictor_never_below_floor() {
        use proptest::prelude::*;
        proptest!(|(h in proptest::collection::vec(-10.0f64..10.0, 1..50))| {
            prop_assert!(mean_predictor_nll(&h).unwrap() >= HALF_LN_2PI);
        });
    }

    #[test]
    fn log_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        for s in [10, 20, 30] {
            append_record(&path, &record(s)).unwrap();
        }
        assert_eq!(read_log(&path).unwrap()[1], record(20));
        truncate_log(&path, 20).unwrap();
        let steps: Vec<u64> = read_log(&path).unwrap().iter().map(|r| r.env_step).collect();
        assert_eq!(steps, vec![10, 20]);
    }

    #[test]
    fn detects_non_finite_fields() {
        let mut r = record(1);
        assert_eq!(r.non_finite_field(), None);
        r.mask_coverage = Some(f64::NAN);
        assert_eq!(r.non_finite_field(), Some("mask_coverage"));
    }
}
