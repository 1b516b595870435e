use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use crate::error::{Error, Result};

pub const MIN_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureFlag {
    None,
    /// The distractor model took over reconstruction.
    Type1,
    /// The task model took over reconstruction.
    Type2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseThresholds {
    pub type1_coverage: f64,
    pub type2_coverage: f64,
    /// Type 2 needs the distractor's reconstruction excess over the floor to
    /// be at least this multiple of the joint reconstruction's excess.
    pub type2_excess_ratio: f64,
    pub band_sigmas: f64,
}

impl Default for DiagnoseThresholds {
    fn default() -> Self {
        Self {
            type1_coverage: 0.05,
            type2_coverage: 0.95,
            type2_excess_ratio: 2.0,
            band_sigmas: 3.0,
        }
    }
}

/// Window statistics behind a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub first_env_step: u64,
    pub last_env_step: u64,
    pub records: usize,
    pub mean_mask_coverage: Option<f64>,
    pub mean_return: f64,
    pub random_band: (f64, f64),
    pub distractor_recon_excess: Option<f64>,
    pub joint_recon_excess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub failure_flag: FailureFlag,
    pub evidence: Evidence,
    pub remediation: String,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Classifies the last `window` records of a log.
pub fn diagnose(log: &[MetricsRecord], window: usize, thresholds: &DiagnoseThresholds) -> Result<DiagnosisReport> {
    if window < MIN_WINDOW {
        return Err(Error::WindowTooShort {
            got: window,
            need: MIN_WINDOW,
        });
    }
    if log.len() < window {
        return Err(Error::WindowTooShort {
            got: log.len(),
            need: window,
        });
    }
    let w = &log[log.len() - window..];
    let last = &w[window - 1];
    let coverage = if w.iter().all(|r| r.mask_coverage.is_some()) {
        mean(w.iter().filter_map(|r| r.mask_coverage))
    } else {
        None
    };
    let mean_return = mean(w.iter().map(|r| r.episodic_return)).unwrap_or(0.0);
    let half = thresholds.band_sigmas * last.random_return_std;
    let band = (last.random_return_mean - half, last.random_return_mean + half);
    let excess = |f: fn(&MetricsRecord) -> Option<f64>| {
        if w.iter().all(|r| f(r).is_some()) {
            mean(w.iter().map(|r| f(r).unwrap_or(0.0) - r.recon_floor))
        } else {
            None
        }
    };
    let distractor_excess = excess(|r| r.distractor_recon_nll);
    let joint_excess = excess(|r| r.joint_recon_nll);
    let evidence = Evidence {
        first_env_step: w[0].env_step,
        last_env_step: last.env_step,
        records: window,
        mean_mask_coverage: coverage,
        mean_return,
        random_band: band,
        distractor_recon_excess: distractor_excess,
        joint_recon_excess: joint_excess,
    };

    let in_band = mean_return >= band.0 && mean_return <= band.1;
    let flag = match coverage {
        Some(c) if c < thresholds.type1_coverage && in_band => FailureFlag::Type1,
        Some(c) if c > thresholds.type2_coverage => match (distractor_excess, joint_excess) {
            (Some(d), Some(j)) if d >= thresholds.type2_excess_ratio * j.max(0.0) => FailureFlag::Type2,
            _ => FailureFlag::None,
        },
        _ => FailureFlag::None,
    };
    let remediation = match flag {
        FailureFlag::Type1 => {
            "The distractor model explains almost the whole image and returns stay at the random-policy level. \
             Raise lambda_Radv so reward information is pushed out of the distractor, or lower lambda_Os so the \
             distractor's solo reconstruction matters less."
        }
        FailureFlag::Type2 => {
            "The task model explains almost the whole image and the distractor captures little. Raise lambda_Os \
             so the distractor is made to reconstruct on its own, or start with a large lambda_Radv and increase \
             lambda_Os gradually."
        }
        FailureFlag::None => "No failure pattern detected in this window.",
    }
    .to_string();
    Ok(DiagnosisReport {
        failure_flag: flag,
        evidence,
        remediation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::metrics::tests::record;

    fn log(f: impl Fn(u64, &mut MetricsRecord)) -> Vec<MetricsRecord> {
        (0..10)
            .map(|i| {
                let mut r = record(100 * (i + 1));
                f(i, &mut r);
                r
            })
            .collect()
    }

    #[test]
    fn starved_task_model_is_type1() {
        let l = log(|i, r| {
            r.mask_coverage = Some(0.02);
            r.episodic_return = 10.0 + if i % 2 == 0 { 1.0 } else { -1.0 };
        });
        let rep = diagnose(&l, 8, &DiagnoseThresholds::default()).unwrap();
        assert_eq!(rep.failure_flag, FailureFlag::Type1);
        assert!(rep.remediation.contains("lambda_Radv"));
        assert_eq!(rep.evidence.records, 8);
    }

    #[test]
    fn low_coverage_with_good_returns_is_not_type1() {
        let l = log(|_, r| {
            r.mask_coverage = Some(0.02);
            r.episodic_return = 60.0;
        });
        assert_eq!(diagnose(&l, 5, &DiagnoseThresholds::default()).unwrap().failure_flag, FailureFlag::None);
    }

    #[test]
    fn degenerate_distractor_is_type2() {
        let l = log(|_, r| {
            r.mask_coverage = Some(0.99);
            r.joint_recon_nll = Some(r.recon_floor + 10.0);
            r.distractor_recon_nll = Some(r.recon_floor + 200.0);
        });
        let rep = diagnose(&l, 5, &DiagnoseThresholds::default()).unwrap();
        assert_eq!(rep.failure_flag, FailureFlag::Type2);
        assert!(rep.remediation.contains("lambda_Os"));
    }

    #[test]
    fn healthy_run_is_clean() {
        let l = log(|i, r| {
            r.mask_coverage = Some(0.4);
            r.episodic_return = 10.0 + 10.0 * i as f64;
        });
        assert_eq!(diagnose(&l, 10, &DiagnoseThresholds::default()).unwrap().failure_flag, FailureFlag::None);
    }

    #[test]
    fn short_windows_are_rejected() {
        let l = log(|_, _| {});
        assert!(matches!(
            diagnose(&l, 4, &DiagnoseThresholds::default()),
            Err(Error::WindowTooShort { got: 4, need: 5 })
        ));
        assert!(diagnose(&l[..3], 5, &DiagnoseThresholds::default()).is_err());
    }
}
