//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward implementations it checks.

use super::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Entries whose true gradient is
/// below this are effectively compared with an absolute tolerance of
/// `floor · threshold`.
pub const FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(e);
            self.worst = Some(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

fn central(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let plus = f(x + h)?;
    let minus = f(x - h)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares `analytic` against central differences of `loss` for every
/// scalar in `store` (parameters absent from `analytic` are expected to have
/// zero gradient). `stride` > 1 samples every `stride`-th entry.
pub fn check_params<F>(
    store: &mut ParamStore,
    analytic: &Gradients,
    mut loss: F,
    h: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    let mut counter = 0usize;
    for id in ids {
        let name = store.name(id).to_string();
        for i in 0..store.get(id).len() {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let x0 = store.get(id).data()[i];
            let numeric = central(
                |x| {
                    store.get_mut(id).data_mut()[i] = x;
                    loss(store)
                },
                x0,
                h,
            )?;
            store.get_mut(id).data_mut()[i] = x0;
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            report.record(&name, i, a, numeric);
        }
    }
    Ok(report)
}

/// Checks a graph-building closure with respect to each of its input
/// tensors.
pub fn check_inputs<F>(inputs: &[Tensor], build: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..work[k].len() {
            let x0 = work[k].data()[i];
            let numeric = central(
                |x| {
                    work[k].data_mut()[i] = x;
                    eval(&work)
                },
                x0,
                h,
            )?;
            work[k].data_mut()[i] = x0;
            report.record(&format!("input{k}"), i, grad[i], numeric);
        }
    }
    Ok(report)
}
