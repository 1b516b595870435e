use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use super::metrics::MetricsRecord;
use super::train::mean_std;
use crate::error::{Error, Result};
use crate::nn::HALF_LN_2PI;

/// Mean and sample std of the episodic return of one config tag at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturnPoint {
    pub config_tag: String,
    pub env_step: u64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// The three reward NLL curves of one config tag, averaged over its runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissociationPoint {
    pub config_tag: String,
    pub env_step: u64,
    pub task_reward_nll: f64,
    pub distractor_reward_nll: Option<f64>,
    pub mean_predictor_nll: f64,
    /// NLL of a perfect unit-variance predictor.
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub returns: Vec<ReturnPoint>,
    pub dissociation: Vec<DissociationPoint>,
    pub files: Vec<PathBuf>,
}

/// Reads logs, rejecting any whose records do not all carry the same fields.
pub fn load_logs(paths: &[PathBuf]) -> Result<Vec<Vec<MetricsRecord>>> {
    if paths.is_empty() {
        return Err(Error::Schema("no metrics logs given".into()));
    }
    let mut schema: Option<(BTreeSet<String>, PathBuf)> = None;
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let value: serde_json::Value = serde_json::from_str(line)?;
            let keys: BTreeSet<String> = value
                .as_object()
                .ok_or_else(|| Error::Schema(format!("{} line {} is not an object", path.display(), i + 1)))?
                .keys()
                .cloned()
                .collect();
            match &schema {
                None => schema = Some((keys, path.clone())),
                Some((expected, first)) if *expected != keys => {
                    let diff: Vec<_> = expected.symmetric_difference(&keys).cloned().collect();
                    return Err(Error::Schema(format!(
                        "{} line {} differs from {} in fields {diff:?}",
                        path.display(),
                        i + 1,
                        first.display()
                    )));
                }
                Some(_) => {}
            }
            records.push(
                serde_json::from_value(value)
                    .map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))?,
            );
        }
        out.push(records);
    }
    Ok(out)
}

type Groups<'a> = BTreeMap<(String, u64), Vec<&'a MetricsRecord>>;

fn group(logs: &[Vec<MetricsRecord>]) -> Groups<'_> {
    let mut groups: Groups = BTreeMap::new();
    for r in logs.iter().flatten() {
        groups.entry((r.config_tag.clone(), r.env_step)).or_default().push(r);
    }
    groups
}

pub fn aggregate_returns(logs: &[Vec<MetricsRecord>]) -> Vec<ReturnPoint> {
    group(logs)
        .into_iter()
        .map(|((config_tag, env_step), rs)| {
            let xs: Vec<f64> = rs.iter().map(|r| r.episodic_return).collect();
            let (mean, std) = mean_std(&xs);
            ReturnPoint {
                config_tag,
                env_step,
                mean,
                std,
                runs: xs.len(),
            }
        })
        .collect()
}

pub fn aggregate_dissociation(logs: &[Vec<MetricsRecord>]) -> Vec<DissociationPoint> {
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    group(logs)
        .into_iter()
        .map(|((config_tag, env_step), rs)| {
            let dist: Option<Vec<f64>> = rs.iter().map(|r| r.distractor_reward_nll).collect();
            DissociationPoint {
                config_tag,
                env_step,
                task_reward_nll: avg(&rs.iter().map(|r| r.task_reward_nll).collect::<Vec<_>>()),
                distractor_reward_nll: dist.map(|d| avg(&d)),
                mean_predictor_nll: avg(&rs.iter().map(|r| r.mean_predictor_nll).collect::<Vec<_>>()),
                reference: HALF_LN_2PI,
            }
        })
        .collect()
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Fixed-size raster with data coordinates mapped onto a margin box.
struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    const W: u32 = 640;
    const H: u32 = 400;
    const M: f64 = 30.0;

    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
        let mut c = Self {
            img: RgbImage::from_pixel(Self::W, Self::H, Rgb([255, 255, 255])),
            x: pad(x),
            y: pad(y),
        };
        let (w, h) = (Self::W as f64, Self::H as f64);
        let axis = Rgb([0, 0, 0]);
        c.raw_line((Self::M, h - Self::M), (w - Self::M, h - Self::M), axis);
        c.raw_line((Self::M, Self::M), (Self::M, h - Self::M), axis);
        c
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = (Self::W as f64 - 2.0 * Self::M, Self::H as f64 - 2.0 * Self::M);
        (
            Self::M + (x - self.x.0) / (self.x.1 - self.x.0) * w,
            Self::H as f64 - Self::M - (y - self.y.0) / (self.y.1 - self.y.0) * h,
        )
    }

    fn raw_line(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (px, py) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            if px >= 0.0 && py >= 0.0 && (px as u32) < Self::W && (py as u32) < Self::H {
                self.img.put_pixel(px as u32, py as u32, color);
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: [u8; 3]) {
        for w in pts.windows(2) {
            self.raw_line(self.map(w[0].0, w[0].1), self.map(w[1].0, w[1].1), Rgb(color));
        }
    }

    /// Vertical shading between `lo` and `hi` curves in a lightened color.
    fn band(&mut self, xs: &[f64], lo: &[f64], hi: &[f64], color: [u8; 3]) {
        let light = Rgb(color.map(|c| c / 3 + 170));
        for i in 0..xs.len() {
            let a = self.map(xs[i], lo[i]);
            let b = self.map(xs[i], hi[i]);
            self.raw_line(a, b, light);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::ImageRead {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn tags<T>(points: &[T], tag: impl Fn(&T) -> &str) -> Vec<String> {
    let set: BTreeSet<String> = points.iter().map(|p| tag(p).to_string()).collect();
    set.into_iter().collect()
}

fn plot_returns(points: &[ReturnPoint], path: &Path) -> Result<()> {
    let mut canvas = Canvas::new(
        range(points.iter().map(|p| p.env_step as f64)),
        range(points.iter().flat_map(|p| [p.mean - p.std, p.mean + p.std])),
    );
    for (k, tag) in tags(points, |p| &p.config_tag).iter().enumerate() {
        let ps: Vec<_> = points.iter().filter(|p| &p.config_tag == tag).collect();
        let xs: Vec<f64> = ps.iter().map(|p| p.env_step as f64).collect();
        let color = PALETTE[k % PALETTE.len()];
        canvas.band(
            &xs,
            &ps.iter().map(|p| p.mean - p.std).collect::<Vec<_>>(),
            &ps.iter().map(|p| p.mean + p.std).collect::<Vec<_>>(),
            color,
        );
        canvas.polyline(&ps.iter().map(|p| (p.env_step as f64, p.mean)).collect::<Vec<_>>(), color);
    }
    canvas.save(path)
}

fn plot_dissociation(points: &[DissociationPoint], path: &Path) -> Result<()> {
    let ys = points.iter().flat_map(|p| {
        [Some(p.task_reward_nll), p.distractor_reward_nll, Some(p.mean_predictor_nll), Some(p.reference)]
            .into_iter()
            .flatten()
    });
    let xr = range(points.iter().map(|p| p.env_step as f64));
    let mut canvas = Canvas::new(xr, range(ys));
    canvas.polyline(&[(xr.0, HALF_LN_2PI), (xr.1, HALF_LN_2PI)], [0, 0, 0]);
    for tag in tags(points, |p| &p.config_tag) {
        let ps: Vec<_> = points.iter().filter(|p| p.config_tag == tag).collect();
        let curve = |f: &dyn Fn(&DissociationPoint) -> Option<f64>| {
            ps.iter()
                .filter_map(|p| f(p).map(|y| (p.env_step as f64, y)))
                .collect::<Vec<_>>()
        };
        canvas.polyline(&curve(&|p| Some(p.task_reward_nll)), PALETTE[0]);
        canvas.polyline(&curve(&|p| p.distractor_reward_nll), PALETTE[1]);
        canvas.polyline(&curve(&|p| Some(p.mean_predictor_nll)), PALETTE[2]);
    }
    canvas.save(path)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `returns.csv`, `returns.png`, `dissociation.csv` and
/// `dissociation.png` into `out_dir`.
pub fn plot(paths: &[PathBuf], out_dir: &Path) -> Result<PlotOutput> {
    let logs = load_logs(paths)?;
    let returns = aggregate_returns(&logs);
    let dissociation = aggregate_dissociation(&logs);
    std::fs::create_dir_all(out_dir)?;

    let mut csv = String::from("config_tag,env_step,mean,std,runs\n");
    for p in &returns {
        writeln!(csv, "{},{},{},{},{}", p.config_tag, p.env_step, p.mean, p.std, p.runs).expect("string write");
    }
    let returns_csv = out_dir.join("returns.csv");
    std::fs::write(&returns_csv, csv)?;

    let mut csv = String::from("config_tag,env_step,task_reward_nll,distractor_reward_nll,mean_predictor_nll,reference\n");
    for p in &dissociation {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            p.config_tag,
            p.env_step,
            p.task_reward_nll,
            opt(p.distractor_reward_nll),
            p.mean_predictor_nll,
            p.reference
        )
        .expect("string write");
    }
    let dissociation_csv = out_dir.join("dissociation.csv");
    std::fs::write(&dissociation_csv, csv)?;

    let returns_png = out_dir.join("returns.png");
    let dissociation_png = out_dir.join("dissociation.png");
    if !returns.is_empty() {
        plot_returns(&returns, &returns_png)?;
        plot_dissociation(&dissociation, &dissociation_png)?;
    }
    Ok(PlotOutput {
        returns,
        dissociation,
        files: vec![returns_csv, returns_png, dissociation_csv, dissociation_png],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::metrics::{append_record, tests::record};

    fn write_log(dir: &Path, name: &str, returns: &[f64]) -> PathBuf {
        let path = dir.join(name);
        for (i, &r) in returns.iter().enumerate() {
            let mut rec = record(10 * (i as u64 + 1));
            rec.episodic_return = r;
            append_record(&path, &rec).unwrap();
        }
        path
    }

    #[test]
    fn single_log_has_zero_width_band() {
        let dir = tempfile::tempdir().unwrap();
        let log = write_log(dir.path(), "a.jsonl", &[1.0, 2.0, 3.0]);
        let out = plot(&[log], &dir.path().join("out")).unwrap();
        assert!(out.returns.iter().all(|p| p.std == 0.0 && p.runs == 1));
        assert!(out.dissociation.iter().all(|p| (p.reference - 0.918939).abs() < 1e-6));
        for f in &out.files {
            assert!(f.exists(), "{}", f.display());
        }
        let csv = std::fs::read_to_string(dir.path().join("out/dissociation.csv")).unwrap();
        assert!(csv.contains("0.918938533"));
    }

    #[test]
    fn band_matches_a_direct_sample_std() {
        let dir = tempfile::tempdir().unwrap();
        let runs = [
            [1.0, 5.0],
            [2.0, 3.0],
            [4.0, 4.5],
            [0.5, 7.0],
            [3.0, 1.0],
        ];
        let paths: Vec<_> = runs
            .iter()
            .enumerate()
            .map(|(i, r)| write_log(dir.path(), &format!("{i}.jsonl"), r))
            .collect();
        let out = plot(&paths, &dir.path().join("out")).unwrap();
        for (k, p) in out.returns.iter().enumerate() {
            let xs: Vec<f64> = runs.iter().map(|r| r[k]).collect();
            let mut mean = 0.0;
            for x in &xs {
                mean += x;
            }
            mean /= 5.0;
            let mut ss = 0.0;
            for x in &xs {
                ss += (x - mean) * (x - mean);
            }
            assert!((p.std - (ss / 4.0).sqrt()).abs() < 1e-12);
            assert_eq!(p.runs, 5);
        }
    }

    #[test]
    fn mismatched_schemas_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_log(dir.path(), "a.jsonl", &[1.0]);
        let bad = dir.path().join("b.jsonl");
        let mut v = serde_json::to_value(record(10)).unwrap();
        v.as_object_mut().unwrap().remove("mask_coverage");
        v.as_object_mut().unwrap().insert("extra".into(), 1.into());
        std::fs::write(&bad, format!("{v}\n")).unwrap();
        let err = plot(&[good, bad], &dir.path().join("out")).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
        assert!(plot(&[], dir.path()).is_err());
    }
}
