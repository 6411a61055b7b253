//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error per element.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, params)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the reverse-mode gradient of `f` against central differences for
/// every parameter block in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }

    let mut g = Graph::new();
    let root = f(&mut g, params)?;
    let analytic = g.backward(root)?.params();

    let mut work = params.clone();
    let mut blocks = Vec::new();
    for (name, value) in params.iter() {
        // Blocks the graph never reached have a zero analytic gradient, which
        // the differences must then confirm.
        let zeros;
        let grad = match analytic.get(name) {
            Some(g) => g,
            None => {
                zeros = Array::zeros(value.shape());
                &zeros
            }
        };
        let mut report = BlockReport {
            name: name.clone(),
            elements: value.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).expect("cloned").data_mut()[i] = orig + opts.h;
            let plus = evaluate(&f, &work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig - opts.h;
            let minus = evaluate(&f, &work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || i == 0 {
                report.max_rel_error = rel;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.passed = report.max_rel_error <= opts.tol;
        blocks.push(report);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        blocks,
    })
}
