//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of every backward closure it is used to verify.

use super::{Graph, ParamStore, Precision, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` per checked parameter.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub n_coords: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per parameter (evenly spread).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords_per_param: None,
        }
    }
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both are negligible.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Compare backward-pass gradients of the scalar built by `f` against
/// central differences, for every non-frozen parameter of `store`.
pub fn check_gradients<F>(store: &ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if store.precision() != Precision::F64 {
        return Err(Error::invalid("gradient checks need an F64 parameter store"));
    }
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss, &mut work)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut per_param = Vec::new();
    let mut n_coords = 0;
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        if work.get(id).frozen {
            continue;
        }
        let len = work.get(id).value.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        let analytic: Vec<f64> = coords.iter().map(|&c| work.get(id).grad[c]).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        let mut probe = work.clone();
        for &c in &coords {
            let orig = probe.get(id).value.data()[c];
            probe.value_mut(id)[c] = orig + opts.step;
            let up = eval(&probe)?;
            probe.value_mut(id)[c] = orig - opts.step;
            let down = eval(&probe)?;
            probe.value_mut(id)[c] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
        }
        n_coords += coords.len();
        per_param.push((work.get(id).name.clone(), relative_error(&analytic, &numeric)));
    }
    let max_rel_error = per_param.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        n_coords,
    })
}
