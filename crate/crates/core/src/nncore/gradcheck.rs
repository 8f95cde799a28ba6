//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradient tensors smaller than this (in max-norm) are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on entries probed per tensor (strided subset beyond it).
    pub max_entries: usize,
    /// Optional op name whose analytic gradient is scaled by `corrupt_factor`.
    pub corrupt: Option<&'static str>,
    pub corrupt_factor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_entries: usize::MAX,
            corrupt: None,
            corrupt_factor: 1.5,
        }
    }
}

/// Compares `d loss / d params` from the tape with central differences.
///
/// The per-tensor error is `max|analytic - numeric| / max(max|analytic|,
/// max|numeric|, SCALE_FLOOR)`.
pub fn gradcheck<F>(
    name: &str,
    params: &mut ParameterSet<f64>,
    opts: GradcheckOptions,
    loss: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(op) = opts.corrupt {
        g.corrupt_gradient(op, opts.corrupt_factor);
    }
    let root = loss(&mut g, params)?;
    g.backward_into(root, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, _, p)| p.grad.data().to_vec()).collect();

    let eval = |ps: &ParameterSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(&mut g, ps)?;
        Ok(g.value(root).data()[0])
    };

    let ids: Vec<_> = params
        .iter()
        .filter(|(_, _, p)| !p.frozen)
        .map(|(id, _, _)| id)
        .collect();
    let mut tensors = Vec::new();
    for id in ids {
        let len = params.get(id).value.len();
        let stride = len.div_ceil(opts.max_entries.max(1)).max(1);
        let mut max_diff = 0.0f64;
        let mut max_a = 0.0f64;
        let mut max_n = 0.0f64;
        let mut probed = 0;
        for j in (0..len).step_by(stride) {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + opts.step;
            let up = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig - opts.step;
            let down = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[id.0][j];
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
            probed += 1;
        }
        let rel_err = max_diff / max_a.max(max_n).max(SCALE_FLOOR);
        tensors.push(TensorCheck {
            name: params.name(id).to_string(),
            entries: probed,
            rel_err,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        name: name.to_string(),
        tensors,
        max_rel_err,
        tolerance: opts.tolerance,
    })
}
