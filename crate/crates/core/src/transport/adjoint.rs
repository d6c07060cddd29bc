//! Adjoint transport, the forward/adjoint correlation and the linearized forward map.
//!
//! The adjoint runs the transposed recursion of the forward scheme. Boundary
//! data `zeta(r, m)` enters at level `m S` in the outgoing directions with
//! weight `-(nu . theta_k) zeta dt_rec`; with this scaling the correlation
//!
//! ```text
//! I(x) = c dt_sub w sum_{n < N} sum_k u^n(x, k) z^n(x, k)
//! ```
//!
//! satisfies `<R'[a] da, zeta> = sum_x da(x) I(x)` to round-off, where the
//! left side is the windowed trace inner product.

use super::{AngularFluxHistory, BoundaryFluxTrace, Storage, TransportSolver};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField};

/// Cell-wise forward/adjoint correlation; units of the gradient of the data
/// misfit with respect to absorption.
pub type CorrelationField = ScalarField;

struct AdjointSource {
    /// `(cell, [(k, cos)])` per receiver.
    receivers: Vec<(usize, Vec<(usize, f64)>)>,
    n_dirs: usize,
    substeps: usize,
}

impl AdjointSource {
    fn new(solver: &TransportSolver<'_>, data: &BoundaryFluxTrace) -> Result<Self> {
        let grid = solver.grid;
        if data.n_rec != solver.tg.n_rec {
            return Err(Error::Mismatch(format!(
                "trace has {} recorded steps, time grid has {}",
                data.n_rec, solver.tg.n_rec
            )));
        }
        let receivers = data
            .pixels
            .iter()
            .zip(&data.normals)
            .map(|(&(ix, iy), &nrm)| {
                if ix >= grid.nx || iy >= grid.ny {
                    return Err(Error::Mismatch(format!("receiver ({ix}, {iy}) outside the grid")));
                }
                let dirs = solver
                    .quad
                    .directions
                    .iter()
                    .enumerate()
                    .filter_map(|(k, d)| {
                        let cosn = nrm.0 * d.0 + nrm.1 * d.1;
                        (cosn > 0.0).then_some((k, cosn))
                    })
                    .collect();
                Ok((grid.idx(ix, iy), dirs))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdjointSource {
            receivers,
            n_dirs: solver.n_dirs(),
            substeps: solver.tg.substeps,
        })
    }

    fn apply(&self, data: &BoundaryFluxTrace, level: usize, y: &mut [f64]) {
        if level % self.substeps != 0 {
            return;
        }
        let m = level / self.substeps;
        if m == 0 || !data.window[m - 1] {
            return;
        }
        for (r, (cell, dirs)) in self.receivers.iter().enumerate() {
            let zeta = data.get(r, m);
            if zeta == 0.0 {
                continue;
            }
            for &(k, cosn) in dirs {
                y[cell * self.n_dirs + k] -= cosn * zeta * data.dt_rec;
            }
        }
    }
}

/// Adjoint field driven by boundary data `data`.
pub fn adjoint_solve(
    solver: &TransportSolver<'_>,
    data: &BoundaryFluxTrace,
    storage: Storage,
) -> Result<AngularFluxHistory> {
    let src = AdjointSource::new(solver, data)?;
    let mut hist = AngularFluxHistory::zeros(solver.grid, solver.quad, solver.tg, storage);
    let stride = hist.stride;
    let len = hist.frame_len();
    solver.run_adjoint(
        |level, y| src.apply(data, level, y),
        |level, frame| {
            if level % stride == 0 {
                let f = level / stride;
                hist.data[f * len..(f + 1) * len].copy_from_slice(frame);
            }
        },
    );
    Ok(hist)
}

fn accumulate(acc: &mut [f64], u: &[f64], z: &[f64], n_dirs: usize) {
    for ((a, uc), zc) in acc.iter_mut().zip(u.chunks_exact(n_dirs)).zip(z.chunks_exact(n_dirs)) {
        *a += uc.iter().zip(zc).map(|(p, q)| p * q).sum::<f64>();
    }
}

fn require_substeps(h: &AngularFluxHistory, what: &str) -> Result<()> {
    if h.storage() != Storage::Substep {
        return Err(Error::Mismatch(format!("{what} must keep every substep")));
    }
    Ok(())
}

/// Correlates stored forward and adjoint histories.
pub fn correlate(u: &AngularFluxHistory, z: &AngularFluxHistory) -> Result<CorrelationField> {
    require_substeps(u, "forward history")?;
    require_substeps(z, "adjoint history")?;
    if !u.compatible(z) {
        return Err(Error::Mismatch("forward and adjoint histories differ in shape".into()));
    }
    let mut acc = vec![0.0; u.grid.cells()];
    for level in 0..u.tg.n_sub() {
        accumulate(&mut acc, u.level(level), z.level(level), u.n_dirs);
    }
    finish(acc, &u.grid, u.tg.c * u.tg.dt_sub() * u.weight)
}

/// Runs the adjoint for `data` and correlates on the fly with the stored
/// forward history `u`, without keeping the adjoint.
pub fn adjoint_correlate(
    solver: &TransportSolver<'_>,
    u: &AngularFluxHistory,
    data: &BoundaryFluxTrace,
) -> Result<CorrelationField> {
    require_substeps(u, "forward history")?;
    if u.grid != solver.grid || u.tg != solver.tg || u.n_dirs != solver.n_dirs() {
        return Err(Error::Mismatch("forward history does not match the solver".into()));
    }
    let src = AdjointSource::new(solver, data)?;
    let nsub = solver.tg.n_sub();
    let mut acc = vec![0.0; solver.grid.cells()];
    solver.run_adjoint(
        |level, y| src.apply(data, level, y),
        |level, z| {
            if level < nsub {
                accumulate(&mut acc, u.level(level), z, u.n_dirs);
            }
        },
    );
    finish(acc, &solver.grid, solver.tg.c * solver.tg.dt_sub() * solver.quad.weight)
}

fn finish(mut acc: Vec<f64>, grid: &GridSpec, scale: f64) -> Result<CorrelationField> {
    acc.iter_mut().for_each(|v| *v *= scale);
    let field = ScalarField::from_vec(grid, acc)?;
    if !field.is_finite() {
        return Err(Error::NonFinite("correlation field".into()));
    }
    Ok(field)
}

/// Derivative of the forward field in the absorption direction `delta_a`
/// at the state `u` (which must keep every substep).
pub fn linearized_forward(
    solver: &TransportSolver<'_>,
    u: &AngularFluxHistory,
    delta_a: &ScalarField,
    storage: Storage,
) -> Result<AngularFluxHistory> {
    require_substeps(u, "forward history")?;
    let grid = solver.grid;
    if delta_a.nx != grid.nx || delta_a.ny != grid.ny {
        return Err(Error::Mismatch("perturbation does not match the grid".into()));
    }
    let n = solver.n_dirs();
    let cdt = solver.tg.c * solver.tg.dt_sub();
    Ok(solver.solve_stored(
        |step, y| {
            let un = u.level(step);
            for (cell, da) in delta_a.data.iter().enumerate() {
                if *da != 0.0 {
                    let f = cdt * da;
                    for k in 0..n {
                        y[cell * n + k] -= f * un[cell * n + k];
                    }
                }
            }
        },
        storage,
    ))
}
