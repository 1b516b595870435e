//! Central finite-difference checks of autodiff gradients.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{flat_f64, scalar_f64, ParamSet};

/// Worst per-tensor relative error of one scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct TermReport {
    pub term: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Parameters with a non-vanishing gradient for this term.
    pub nonzero_params: usize,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < floor {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the gradient of every named scalar produced by `eval` with
/// central differences of step `h`, over every parameter accepted by
/// `include`. `eval` must be deterministic.
pub fn check_terms(
    params: &ParamSet,
    include: impl Fn(&str) -> bool,
    h: f64,
    mut eval: impl FnMut() -> Result<Vec<(String, Tensor)>>,
) -> Result<Vec<TermReport>> {
    let selected = params.select(|n| include(n));
    let outputs = eval()?;
    let mut analytic = Vec::with_capacity(outputs.len());
    for (_, t) in &outputs {
        let grads = t.backward()?;
        let per_param = selected
            .iter()
            .map(|(_, v)| match grads.get(v.as_tensor()) {
                Some(g) => flat_f64(g),
                None => Ok(vec![0.0; v.elem_count()]),
            })
            .collect::<Result<Vec<_>>>()?;
        analytic.push(per_param);
    }
    let values = |eval: &mut dyn FnMut() -> Result<Vec<(String, Tensor)>>| -> Result<Vec<f64>> {
        eval()?.iter().map(|(_, t)| scalar_f64(t)).collect()
    };
    let mut reports: Vec<TermReport> = outputs
        .iter()
        .map(|(name, _)| TermReport {
            term: name.clone(),
            max_rel_err: 0.0,
            worst_param: String::new(),
            nonzero_params: 0,
        })
        .collect();
    for (pi, (name, var)) in selected.iter().enumerate() {
        let base = flat_f64(var.as_tensor())?;
        let mut fd = vec![vec![0.0; base.len()]; outputs.len()];
        let mut work = base.clone();
        for i in 0..base.len() {
            work[i] = base[i] + h;
            params.assign(name, &work)?;
            let plus = values(&mut eval)?;
            work[i] = base[i] - h;
            params.assign(name, &work)?;
            let minus = values(&mut eval)?;
            work[i] = base[i];
            for k in 0..outputs.len() {
                fd[k][i] = (plus[k] - minus[k]) / (2.0 * h);
            }
        }
        params.assign(name, &base)?;
        for k in 0..outputs.len() {
            let a = &analytic[k][pi];
            let err = relative_error(a, &fd[k], 1e-9);
            if a.iter().chain(&fd[k]).any(|x| x.abs() > 1e-9) {
                reports[k].nonzero_params += 1;
            }
            if err > reports[k].max_rel_err {
                reports[k].max_rel_err = err;
                reports[k].worst_param = name.clone();
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn quadratic_gradient_matches() {
        let mut ps = ParamSet::new(DType::F64);
        ps.glorot("w".into(), 3, 2, &mut crate::seeding::rng_from(4)).unwrap();
        let reports = check_terms(&ps, |_| true, 1e-5, || {
            let w = ps.get("w").unwrap().as_tensor();
            Ok(vec![
                ("sq".into(), w.sqr()?.sum_all()?),
                ("cube".into(), (w.sqr()? * w)?.sum_all()?),
            ])
        })
        .unwrap();
        assert!(reports.iter().all(|r| r.max_rel_err < 1e-8), "{reports:?}");
    }
}
