//! Reconstruction driver: synthetic data, the misfit gradient shared by both
//! phases, level-set Kaczmarz sweeps and the two-step pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    build_boundary, make_quadrature, AngularQuadrature, BoundaryGeometry, GridSpec, Mask, MediumFields, ScalarField,
    TimeGrid,
};
use crate::kernel::{hg_kernel, ScatteringKernel};
use crate::levelset::{
    extract_band, extract_shape, init_from_tbt, is_admissible, levelset_update, max_motion_cells, rescale,
    shape_absorption, Shape, ShapeParams,
};
use crate::tbt::{run_tbt, TbtParams, TbtResult};
use crate::transport::{
    adjoint_correlate, forward_with, linearized_forward, measure, residual, select_receivers, BoundaryFluxTrace, ReceiverRule,
    ReceiverSet, ResidualTrace, SourceSpec, Storage, TransportSolver,
};

/// Everything fixed during a reconstruction: discretization, the known
/// background medium, sources and their receivers.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: GridSpec,
    pub quad: AngularQuadrature,
    pub kernel: ScatteringKernel,
    pub tg: TimeGrid,
    pub boundary: BoundaryGeometry,
    /// Known absorption `a_b`, scattering, clear and frozen masks.
    pub background: MediumFields,
    pub sources: Vec<SourceSpec>,
    pub receivers: Vec<ReceiverSet>,
}

impl Problem {
    pub fn new(
        background: MediumFields,
        n_dirs: usize,
        g: f64,
        tg: TimeGrid,
        sources: Vec<SourceSpec>,
        rule: &ReceiverRule,
    ) -> Result<Self> {
        let grid = background.grid;
        let quad = make_quadrature(n_dirs)?;
        let kernel = hg_kernel(g, &quad)?;
        let boundary = build_boundary(&grid);
        if sources.is_empty() {
            return Err(Error::Source("no sources configured".into()));
        }
        let receivers = sources
            .iter()
            .map(|s| {
                s.injection(&grid, &quad, &tg)?;
                select_receivers(s, &grid, &boundary, rule, &tg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Problem {
            grid,
            quad,
            kernel,
            tg,
            boundary,
            background,
            sources,
            receivers,
        })
    }

    pub fn medium(&self, a: &ScalarField) -> Result<MediumFields> {
        self.background.with_absorption(a.clone())
    }
}

/// Also freezes every cell within `margin_px` of the domain edge.
pub fn freeze_margin(medium: &MediumFields, margin_px: usize) -> Result<MediumFields> {
    let g = medium.grid;
    let mut frozen = medium.frozen_mask.clone();
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            if g.edge_depth(ix, iy) < margin_px {
                frozen[g.idx(ix, iy)] = true;
            }
        }
    }
    MediumFields::new(g, medium.a.clone(), medium.b.clone(), medium.clear_mask.clone(), frozen)
}

/// Observed traces, one per source, restricted to that source's receivers and window.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub traces: Vec<BoundaryFluxTrace>,
}

/// Windowed measurement of source `j` in `medium`.
pub fn simulate(problem: &Problem, medium: &MediumFields, j: usize) -> Result<BoundaryFluxTrace> {
    let solver = TransportSolver::new(medium, &problem.kernel, &problem.quad, problem.tg)?;
    let u = forward_with(&solver, &problem.sources[j], Storage::Recorded)?;
    measure(&u, &problem.boundary, &problem.quad).restrict(&problem.receivers[j], &problem.boundary)
}

/// One noise-free trace per source on the true medium.
pub fn generate_data(problem: &Problem, truth: &MediumFields) -> Result<DataSet> {
    let traces = (0..problem.sources.len())
        .into_par_iter()
        .map(|j| simulate(problem, truth, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(DataSet { traces })
}

/// Residual norm of source `j` at absorption `a` and the gradient of
/// `1/2 |residual|^2` with respect to `a`.
pub fn misfit_gradient(
    problem: &Problem,
    a: &ScalarField,
    j: usize,
    observed: &BoundaryFluxTrace,
) -> Result<(f64, ScalarField)> {
    let g = source_gradient(problem, a, j, observed, None)?;
    Ok((g.norm, g.grad))
}

/// Output of [`source_gradient`].
#[derive(Debug, Clone)]
pub struct SourceGradient {
    pub norm: f64,
    pub grad: ScalarField,
    /// `|R' d|^2` for `d` the gradient restricted to the requested mask.
    pub curvature: Option<f64>,
}

/// Like [`misfit_gradient`]; with `mask` it also applies the linearized map
/// to the masked gradient, which gives the exact line-search step
/// `|d|^2 / |R' d|^2` of the linearized misfit.
pub fn source_gradient(
    problem: &Problem,
    a: &ScalarField,
    j: usize,
    observed: &BoundaryFluxTrace,
    mask: Option<&Mask>,
) -> Result<SourceGradient> {
    let medium = problem.medium(a)?;
    let solver = TransportSolver::new(&medium, &problem.kernel, &problem.quad, problem.tg)?;
    let u = forward_with(&solver, &problem.sources[j], Storage::Substep)?;
    let computed = measure(&u, &problem.boundary, &problem.quad).restrict(&problem.receivers[j], &problem.boundary)?;
    let r = residual(&computed, observed)?;
    let norm = r.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("residual of source {j}")));
    }
    let grad = adjoint_correlate(&solver, &u, &r)?;
    let curvature = match mask {
        Some(mask) => {
            let mut d = grad.clone();
            d.data.iter_mut().zip(mask).for_each(|(v, m)| if !*m { *v = 0.0 });
            let du = linearized_forward(&solver, &u, &d, Storage::Recorded)?;
            let dm = measure(&du, &problem.boundary, &problem.quad).restrict(&problem.receivers[j], &problem.boundary)?;
            Some(dm.inner(&dm))
        }
        None => None,
    };
    Ok(SourceGradient { norm, grad, curvature })
}

/// Residual traces of every source at absorption `a`.
pub fn all_residuals(problem: &Problem, a: &ScalarField, data: &DataSet) -> Result<Vec<ResidualTrace>> {
    let medium = problem.medium(a)?;
    (0..problem.sources.len())
        .map(|j| residual(&simulate(problem, &medium, j)?, &data.traces[j]))
        .collect()
}

/// `sqrt(sum over sources, receivers and windowed steps of v^2 dt_rec)`.
pub fn residual_norm(traces: &[ResidualTrace]) -> f64 {
    traces.iter().map(|t| t.inner(t)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Tbt,
    Levelset,
}

/// Residual norm of one source, taken before the step that used it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub phase: Phase,
    pub step: usize,
    pub sweep: usize,
    pub source: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSetParams {
    pub sweeps: usize,
    pub shape: ShapeParams,
    /// Threshold fraction for the initial shape.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Boundary motion (cells) of the step that calibrates an automatic `eta`.
    #[serde(default = "default_motion_target")]
    pub motion_target_cells: f64,
    /// Per-step cap on boundary motion (cells); `None` disables it.
    #[serde(default = "default_motion_cap")]
    pub max_motion_cells: Option<f64>,
    /// Cells within this many pixels of the domain edge stay outside the
    /// shape and are never updated.
    #[serde(default = "default_rim")]
    pub rim_px: usize,
    /// Steps (counted from the start of the level-set phase) whose shape is kept.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
}

fn default_rim() -> usize {
    8
}

fn default_gamma() -> f64 {
    0.9
}

fn default_motion_target() -> f64 {
    1.0
}

fn default_motion_cap() -> Option<f64> {
    Some(2.0)
}

impl LevelSetParams {
    pub fn new(a_hat: f64, sweeps: usize) -> Self {
        LevelSetParams {
            sweeps,
            shape: ShapeParams::new(a_hat),
            gamma: default_gamma(),
            motion_target_cells: default_motion_target(),
            max_motion_cells: default_motion_cap(),
            rim_px: default_rim(),
            snapshot_steps: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("levelset.gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.motion_target_cells > 0.0 && self.motion_target_cells.is_finite()) {
            return Err(Error::config("levelset.motion_target_cells", "must be positive"));
        }
        if let Some(cap) = self.max_motion_cells {
            if !(cap > 0.0) {
                return Err(Error::config("levelset.max_motion_cells", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionState {
    pub phi: ScalarField,
    /// `a_b + Lambda(phi)`.
    pub a: ScalarField,
    pub steps: usize,
    pub sweep: usize,
    pub eta: Option<f64>,
    pub log: Vec<ResidualEntry>,
}

impl ReconstructionState {
    pub fn new(phi: ScalarField, problem: &Problem, params: &LevelSetParams) -> Self {
        let a = shape_absorption(&phi, &problem.background.a, params.shape.a_hat);
        ReconstructionState {
            phi,
            a,
            steps: 0,
            sweep: 0,
            eta: params.shape.eta,
            log: Vec::new(),
        }
    }
}

/// One level-set Kaczmarz step with the data of source `j`. Returns the
/// residual norm before the update.
pub fn levelset_step(
    state: &mut ReconstructionState,
    j: usize,
    problem: &Problem,
    data: &DataSet,
    params: &LevelSetParams,
) -> Result<f64> {
    let a_b = &problem.background.a;
    let a_hat = params.shape.a_hat;
    let (norm, grad) = misfit_gradient(problem, &state.a, j, &data.traces[j])?;
    state.log.push(ResidualEntry {
        phase: Phase::Levelset,
        step: state.steps,
        sweep: state.sweep,
        source: j,
        norm,
    });
    state.steps += 1;

    let mut band = extract_band(&state.phi, params.shape.rho);
    for (b, f) in band.mask.iter_mut().zip(&problem.background.frozen_mask) {
        *b &= !f;
    }
    if band.is_empty() || !band.mask.iter().any(|&b| b) {
        log::warn!("level-set step {}: shape has no boundary; skipped", state.steps - 1);
        return Ok(norm);
    }
    // descent direction: the negative gradient
    let descent = ScalarField { nx: grad.nx, ny: grad.ny, data: grad.data.iter().map(|g| -g).collect() };
    let unit = levelset_update(&ScalarField::zeros(&problem.grid), &descent, &band, a_b, a_hat, 1.0);
    let motion = max_motion_cells(&state.phi, &unit, &band);
    if !(motion > 0.0) {
        return Ok(norm);
    }
    let eta = match state.eta {
        Some(eta) => eta,
        None => {
            let eta = params.motion_target_cells / motion;
            log::info!("level-set relaxation set to {eta:.6e} (unit-step motion {motion:.3e} cells)");
            state.eta = Some(eta);
            eta
        }
    };
    let mut step_eta = eta;
    if let Some(cap) = params.max_motion_cells {
        if eta * motion > cap {
            step_eta = cap / motion;
        }
    }
    let phi = levelset_update(&state.phi, &descent, &band, a_b, a_hat, step_eta);
    state.phi = rescale(&phi, params.shape.rescale_target)?;
    state.a = shape_absorption(&state.phi, a_b, a_hat);
    debug_assert!(is_admissible(&state.phi, &state.a, a_b, a_hat));
    Ok(norm)
}

#[derive(Debug, Clone)]
pub struct LevelSetResult {
    pub state: ReconstructionState,
    /// All-source residual norm at the initial shape and after each sweep.
    pub sweep_norms: Vec<f64>,
    /// `(step, shape)` snapshots.
    pub snapshots: Vec<(usize, Shape)>,
    pub shape: Shape,
}

/// `problem` with the level-set rim frozen as well.
pub fn levelset_problem(problem: &Problem, params: &LevelSetParams) -> Result<Problem> {
    let mut p = problem.clone();
    p.background = freeze_margin(&problem.background, params.rim_px)?;
    Ok(p)
}

pub fn run_levelset(problem: &Problem, data: &DataSet, phi0: ScalarField, params: &LevelSetParams) -> Result<LevelSetResult> {
    params.validate()?;
    let problem = &levelset_problem(problem, params)?;
    let mut state = ReconstructionState::new(phi0, problem, params);
    let mut sweep_norms = vec![residual_norm(&all_residuals(problem, &state.a, data)?)];
    let mut snapshots = Vec::new();
    if params.snapshot_steps.contains(&0) {
        snapshots.push((0, extract_shape(&state.phi, &problem.grid)));
    }
    for sweep in 1..=params.sweeps {
        state.sweep = sweep;
        for j in 0..problem.sources.len() {
            levelset_step(&mut state, j, problem, data, params)?;
            if params.snapshot_steps.contains(&state.steps) {
                snapshots.push((state.steps, extract_shape(&state.phi, &problem.grid)));
            }
        }
        let n = residual_norm(&all_residuals(problem, &state.a, data)?);
        log::info!("level-set sweep {sweep}/{}: residual norm {n:.6e}", params.sweeps);
        sweep_norms.push(n);
    }
    let shape = extract_shape(&state.phi, &problem.grid);
    Ok(LevelSetResult { state, sweep_norms, snapshots, shape })
}

/// Initial level set from a TBT result, over the cells the level-set phase may change.
pub fn initial_level_set(problem: &Problem, tbt: &TbtResult, params: &LevelSetParams) -> Result<ScalarField> {
    let problem = &levelset_problem(problem, params)?;
    let a_tbt = tbt.state.absorption(&problem.background.a);
    let candidates: Vec<bool> = problem.background.frozen_mask.iter().map(|f| !f).collect();
    init_from_tbt(&a_tbt, &problem.background.a, &params.shape, params.gamma, &candidates)
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub data: DataSet,
    pub tbt: TbtResult,
    pub phi0: ScalarField,
    pub levelset: LevelSetResult,
}

impl PipelineResult {
    /// TBT per-step entries followed by level-set per-step entries.
    pub fn history(&self) -> Vec<ResidualEntry> {
        self.tbt.state.log.iter().chain(&self.levelset.state.log).copied().collect()
    }
}

/// Level-set phase from a finished TBT run.
pub fn reconstruct_from_tbt(
    problem: &Problem,
    data: &DataSet,
    tbt: &TbtResult,
    ls: &LevelSetParams,
) -> Result<(ScalarField, LevelSetResult)> {
    let phi0 = initial_level_set(problem, tbt, ls)?;
    let levelset = run_levelset(problem, data, phi0.clone(), ls)?;
    Ok((phi0, levelset))
}

/// Data on `truth`, TBT sweeps, level-set initialization and level-set sweeps.
pub fn run_pipeline(
    problem: &Problem,
    truth: &MediumFields,
    tbt: &TbtParams,
    ls: &LevelSetParams,
) -> Result<PipelineResult> {
    let data = generate_data(problem, truth)?;
    let tbt_result = run_tbt(problem, &data, tbt)?;
    let (phi0, levelset) = reconstruct_from_tbt(problem, &data, &tbt_result, ls)?;
    Ok(PipelineResult { data, tbt: tbt_result, phi0, levelset })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::grid::{build_phantom, ClearLayer, Obstacle, PhantomSpec};
    use crate::transport::standard_sources;

    pub fn phantom(obstacles: Vec<Obstacle>) -> PhantomSpec {
        let mut spec = PhantomSpec::homogeneous(0.1, 20.0);
        spec.clear_layer = Some(ClearLayer { offset_px: 1, thickness_px: 1 });
        spec.obstacles = obstacles;
        spec
    }

    /// 24 x 24 problem with 8 sources and its truth medium.
    pub fn small(obstacles: Vec<Obstacle>) -> (Problem, MediumFields) {
        let grid = GridSpec::new(24, 24, 0.1).unwrap();
        let spec = phantom(obstacles);
        let truth = build_phantom(&spec, &grid).unwrap();
        let bg = build_phantom(&spec.without_obstacles(), &grid).unwrap();
        let tg = TimeGrid { dt_rec: 0.2, n_rec: 25, substeps: 4, c: 1.0 };
        let sources = standard_sources(&grid, 2, 3, 1.2, 1.0).unwrap();
        let rule = ReceiverRule { min_arc_cm: 2.0, window_start_s: 1.0 };
        (Problem::new(bg, 8, 0.5, tg, sources, &rule).unwrap(), truth)
    }

    pub fn one_disc() -> Vec<Obstacle> {
        vec![Obstacle { center: [1.5, 1.0], radius: 0.35, a: 0.6 }]
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::grid::obstacle_mask;
    use crate::levelset::mask_difference;

    #[test]
    fn residual_norm_direct_sum() {
        let (problem, truth) = small(one_disc());
        let data = generate_data(&problem, &truth).unwrap();
        let mut t = data.traces[0].clone();
        t.pixels.truncate(3);
        t.values.truncate(3 * t.n_rec);
        for (i, v) in t.values.iter_mut().enumerate() {
            *v = (i % 7) as f64 - 2.5;
        }
        let mut brute = 0.0;
        for r in 0..3 {
            for m in 1..=t.n_rec {
                if t.window[m - 1] {
                    brute += t.values[r * t.n_rec + m - 1].powi(2) * t.dt_rec;
                }
            }
        }
        let n = residual_norm(&[t.clone()]);
        assert!((n - brute.sqrt()).abs() < 1e-12 * n);
        assert!((residual_norm(&[t.scaled(2.0)]) - 2.0 * n).abs() < 1e-12 * n);
        assert_eq!(residual_norm(&[t.zeros_like()]), 0.0);
    }

    #[test]
    fn data_on_background_has_zero_residual() {
        let (problem, _) = small(vec![]);
        let data = generate_data(&problem, &problem.background).unwrap();
        assert_eq!(data.traces.len(), 8);
        let r = all_residuals(&problem, &problem.background.a, &data).unwrap();
        assert_eq!(residual_norm(&r), 0.0);
    }

    #[test]
    fn data_generation_is_deterministic() {
        let (problem, truth) = small(one_disc());
        let a = generate_data(&problem, &truth).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate_data(&problem, &truth).unwrap());
        assert_eq!(a, b);
    }

    fn phi_of(problem: &Problem, obstacles: &[crate::grid::Obstacle]) -> ScalarField {
        ScalarField::from_fn(&problem.grid, |ix, iy| {
            let (x, y) = problem.grid.center(ix, iy);
            obstacles
                .iter()
                .map(|o| ((x - o.center[0]).hypot(y - o.center[1]) - o.radius) / problem.grid.dx)
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn no_sweeps_keeps_initial_shape() {
        let (problem, truth) = small(one_disc());
        let data = generate_data(&problem, &truth).unwrap();
        let mut params = LevelSetParams::new(0.6, 0);
        params.rim_px = 2;
        let phi0 = rescale(&phi_of(&problem, &one_disc()), 1.0).unwrap();
        let r = run_levelset(&problem, &data, phi0.clone(), &params).unwrap();
        assert_eq!(r.state.phi, phi0);
        assert_eq!(r.sweep_norms.len(), 1);
        assert!(r.state.log.is_empty());
    }

    #[test]
    fn exact_shape_is_a_fixed_point() {
        let (problem, truth) = small(one_disc());
        let data = generate_data(&problem, &truth).unwrap();
        let mut params = LevelSetParams::new(0.6, 1);
        params.rim_px = 2;
        let phi0 = rescale(&phi_of(&problem, &one_disc()), 1.0).unwrap();
        let r = run_levelset(&problem, &data, phi0.clone(), &params).unwrap();
        let before = extract_shape(&phi0, &problem.grid).mask;
        assert!(r.sweep_norms[0] < 1e-15, "{:?}", r.sweep_norms);
        assert_eq!(mask_difference(&before, &r.shape.mask), 0);
    }

    #[test]
    fn levelset_steps_stay_admissible_and_two_valued() {
        let (problem, truth) = small(one_disc());
        let data = generate_data(&problem, &truth).unwrap();
        let mut params = LevelSetParams::new(0.6, 1);
        params.rim_px = 2;
        let shifted = vec![crate::grid::Obstacle { center: [1.3, 1.1], radius: 0.3, a: 0.6 }];
        let mut state = ReconstructionState::new(rescale(&phi_of(&problem, &shifted), 1.0).unwrap(), &problem, &params);
        let lsp = levelset_problem(&problem, &params).unwrap();
        let a_b = &problem.background.a;
        for j in 0..problem.sources.len() {
            levelset_step(&mut state, j, &lsp, &data, &params).unwrap();
            assert!(is_admissible(&state.phi, &state.a, a_b, 0.6));
            assert!(state.a.data.iter().zip(&a_b.data).all(|(a, b)| *a == 0.6 || a == b));
        }
        assert_eq!(state.log.len(), problem.sources.len());
        assert_eq!(state.steps, problem.sources.len());
    }

    #[test]
    fn first_step_lowers_its_residual() {
        let (problem, truth) = small(one_disc());
        let data = generate_data(&problem, &truth).unwrap();
        let mut params = LevelSetParams::new(0.6, 1);
        params.rim_px = 2;
        let shifted = vec![crate::grid::Obstacle { center: [1.35, 1.0], radius: 0.35, a: 0.6 }];
        let lsp = levelset_problem(&problem, &params).unwrap();
        let mut state = ReconstructionState::new(rescale(&phi_of(&problem, &shifted), 1.0).unwrap(), &problem, &params);
        let before = levelset_step(&mut state, 0, &lsp, &data, &params).unwrap();
        let after = all_residuals(&lsp, &state.a, &data).unwrap()[0].norm();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn zero_residual_step_leaves_phi() {
        let (problem, truth) = small(one_disc());
        let data = generate_data(&problem, &truth).unwrap();
        let mut params = LevelSetParams::new(0.6, 1);
        params.rim_px = 2;
        params.shape.eta = Some(1.0);
        let phi0 = rescale(&phi_of(&problem, &one_disc()), 1.0).unwrap();
        let lsp = levelset_problem(&problem, &params).unwrap();
        let mut state = ReconstructionState::new(phi0.clone(), &problem, &params);
        let norm = levelset_step(&mut state, 0, &lsp, &data, &params).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(state.phi, phi0);
        assert_eq!(state.steps, 1);
    }

    #[test]
    fn pipeline_history_counts() {
        let (problem, truth) = small(one_disc());
        let tbt = TbtParams { sweeps: 2, ..TbtParams::default() };
        let mut ls = LevelSetParams::new(0.6, 1);
        ls.rim_px = 2;
        let r = run_pipeline(&problem, &truth, &tbt, &ls).unwrap();
        let p = problem.sources.len();
        assert_eq!(r.history().len(), 2 * p + p);
        assert_eq!(r.levelset.sweep_norms.len(), 2);
        let again = run_pipeline(&problem, &truth, &tbt, &ls).unwrap();
        assert_eq!(again.history(), r.history());
        assert_eq!(again.levelset.shape.mask, r.levelset.shape.mask);
        let truth_mask = obstacle_mask(&fixtures::phantom(one_disc()), &problem.grid);
        assert_eq!(truth_mask.len(), r.levelset.shape.mask.len());
    }
}
