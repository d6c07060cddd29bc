//! Transport-backtransport: nonlinear Kaczmarz sweeps on the pixel absorption.
//!
//! Each step runs one forward solve at the current absorption, forms the
//! windowed residual on the step's receivers, runs the adjoint driven by that
//! residual and moves `a_s` against the resulting gradient, clamped to
//! `[a_min, a_max]` and restricted to the update mask.

use serde::{Deserialize, Serialize};

use crate::driver::{source_gradient, DataSet, Phase, Problem, ResidualEntry};
use crate::error::{Error, Result};
use crate::grid::{Mask, ScalarField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TbtParams {
    pub sweeps: usize,
    /// Fixed relaxation; `None` scales the first update to `auto_target`.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Largest absolute first update (cm^-1) when `eta` is automatic.
    #[serde(default = "default_auto_target")]
    pub auto_target: f64,
    #[serde(default = "default_a_min")]
    pub a_min: f64,
    #[serde(default = "default_a_max")]
    pub a_max: f64,
    /// Exact line search on the linearized misfit, scaled by this relaxation
    /// factor; overrides `eta` when set.
    #[serde(default)]
    pub line_search: Option<f64>,
    /// Sweeps after which `a_TBT` is kept.
    #[serde(default)]
    pub snapshot_sweeps: Vec<usize>,
}

fn default_auto_target() -> f64 {
    0.05
}

fn default_a_min() -> f64 {
    0.01
}

fn default_a_max() -> f64 {
    2.0
}

impl Default for TbtParams {
    fn default() -> Self {
        TbtParams {
            sweeps: 20,
            eta: None,
            auto_target: default_auto_target(),
            a_min: default_a_min(),
            a_max: default_a_max(),
            line_search: None,
            snapshot_sweeps: Vec::new(),
        }
    }
}

impl TbtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_min > 0.0 && self.a_max > self.a_min) {
            return Err(Error::config("tbt", format!("need 0 < a_min < a_max, got {} and {}", self.a_min, self.a_max)));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::config("tbt.eta", format!("must be >= 0, got {eta}")));
            }
        }
        if !(self.auto_target > 0.0 && self.auto_target.is_finite()) {
            return Err(Error::config("tbt.auto_target", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbtState {
    /// Perturbation over the background absorption.
    pub a_s: ScalarField,
    /// Cells that may change (complement of the frozen mask).
    pub update_mask: Mask,
    pub sweep: usize,
    pub steps: usize,
    /// Relaxation in use (set on the first informative step when automatic).
    pub eta: Option<f64>,
    pub log: Vec<ResidualEntry>,
}

impl TbtState {
    pub fn new(problem: &Problem, params: &TbtParams) -> Self {
        TbtState {
            a_s: ScalarField::zeros(&problem.grid),
            update_mask: problem.background.frozen_mask.iter().map(|f| !f).collect(),
            sweep: 0,
            steps: 0,
            eta: params.eta,
            log: Vec::new(),
        }
    }

    /// `a_b + a_s`.
    pub fn absorption(&self, a_b: &ScalarField) -> ScalarField {
        ScalarField {
            nx: a_b.nx,
            ny: a_b.ny,
            data: a_b.data.iter().zip(&self.a_s.data).map(|(b, s)| b + s).collect(),
        }
    }
}

/// One Kaczmarz step with the data of source `j`. Returns the residual norm
/// before the update.
pub fn tbt_step(state: &mut TbtState, j: usize, problem: &Problem, data: &DataSet, params: &TbtParams) -> Result<f64> {
    let a_b = &problem.background.a;
    let a = state.absorption(a_b);
    let sg = source_gradient(problem, &a, j, &data.traces[j], params.line_search.map(|_| &state.update_mask))?;
    let (norm, grad) = (sg.norm, sg.grad);
    state.log.push(ResidualEntry {
        phase: Phase::Tbt,
        step: state.steps,
        sweep: state.sweep,
        source: j,
        norm,
    });
    state.steps += 1;

    let eta = match (params.line_search, sg.curvature, state.eta) {
        (Some(omega), Some(curv), _) => {
            let dd: f64 = grad.data.iter().zip(&state.update_mask).filter(|(_, m)| **m).map(|(g, _)| g * g).sum();
            if curv <= 0.0 || dd == 0.0 {
                return Ok(norm);
            }
            omega * dd / curv
        }
        (_, _, Some(eta)) => eta,
        _ => {
            let peak = grad
                .data
                .iter()
                .zip(&state.update_mask)
                .filter(|(_, m)| **m)
                .fold(0.0f64, |p, (g, _)| p.max(g.abs()));
            if peak == 0.0 {
                return Ok(norm);
            }
            let eta = params.auto_target / peak;
            log::info!("tbt relaxation set to {eta:.6e} from first gradient peak {peak:.6e}");
            state.eta = Some(eta);
            eta
        }
    };
    for (i, s) in state.a_s.data.iter_mut().enumerate() {
        if state.update_mask[i] {
            let next = (a_b.data[i] + *s - eta * grad.data[i]).clamp(params.a_min, params.a_max);
            *s = next - a_b.data[i];
        }
    }
    if !state.a_s.is_finite() {
        return Err(Error::NonFinite("TBT absorption".into()));
    }
    Ok(norm)
}

/// Result of [`run_tbt`].
#[derive(Debug, Clone)]
pub struct TbtResult {
    pub state: TbtState,
    /// `(sweep, a_TBT)` for each requested snapshot sweep.
    pub snapshots: Vec<(usize, ScalarField)>,
}

/// `params.sweeps` sweeps, each visiting the sources in problem order.
pub fn run_tbt(problem: &Problem, data: &DataSet, params: &TbtParams) -> Result<TbtResult> {
    params.validate()?;
    let mut state = TbtState::new(problem, params);
    let mut snapshots = Vec::new();
    let a_b = &problem.background.a;
    if params.snapshot_sweeps.contains(&0) {
        snapshots.push((0, state.absorption(a_b)));
    }
    for sweep in 1..=params.sweeps {
        state.sweep = sweep;
        for j in 0..problem.sources.len() {
            tbt_step(&mut state, j, problem, data, params)?;
        }
        log::info!("tbt sweep {sweep}/{} done", params.sweeps);
        if params.snapshot_sweeps.contains(&sweep) {
            snapshots.push((sweep, state.absorption(a_b)));
        }
    }
    Ok(TbtResult { state, snapshots })
}
