//! Discrete-ordinates solver for the time-dependent transport equation and its
//! exact discrete transpose.
//!
//! One substep maps the state `u^n` to `u^{n+1}` by
//!
//! ```text
//! y       = (A - c dt a) u^n + s^n          explicit upwind advection + absorption
//! u^{n+1} = M_b^{-1} y                      implicit scattering, per cell
//! M_b     = (1 + c dt b) I - c dt b w K
//! ```
//!
//! `A` is first-order upwind in flux form with zero inflow ghosts (vacuum
//! boundary), so every face flux leaving one cell enters its neighbour or the
//! outside. `M_b` is an M-matrix whose columns sum to one under the weights, so
//! the collision stage is unconditionally stable, positivity preserving and
//! conserves mass when `a = 0`. The explicit stage is monotone under
//! [`TimeGrid::check_cfl`].
//!
//! Absorption sits in the explicit stage so that the derivative of `u^{n+1}`
//! with respect to `a` involves `u^n` only. The adjoint recursion then pairs
//! `u^n` with `z^n` at the same level and ends with `z^N = 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{AngularQuadrature, BoundaryGeometry, GridSpec, MediumFields, TimeGrid};
use crate::kernel::ScatteringKernel;

pub mod adjoint;
pub mod measure;

pub use adjoint::{adjoint_correlate, adjoint_solve, correlate, linearized_forward, CorrelationField};
pub use measure::{
    measure, residual, select_receivers, standard_sources, BoundaryFluxTrace, ReceiverRule, ReceiverSet,
    ResidualTrace, SourceSpec,
};

/// Which time levels a history keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// Every internal substep (needed for correlation).
    Substep,
    /// Only the recorded steps (and `t = 0`).
    Recorded,
}

/// Space-angle-time field sampled at every `stride`-th substep level.
///
/// Frame `f` holds level `f * stride`; within a frame the layout is
/// `[iy][ix][k]` with the direction index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularFluxHistory {
    pub grid: GridSpec,
    pub n_dirs: usize,
    pub weight: f64,
    pub tg: TimeGrid,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl AngularFluxHistory {
    pub fn zeros(grid: GridSpec, quad: &AngularQuadrature, tg: TimeGrid, storage: Storage) -> Self {
        let stride = match storage {
            Storage::Substep => 1,
            Storage::Recorded => tg.substeps,
        };
        let frames = tg.n_sub() / stride + 1;
        AngularFluxHistory {
            grid,
            n_dirs: quad.n_dirs(),
            weight: quad.weight,
            tg,
            stride,
            data: vec![0.0; frames * grid.cells() * quad.n_dirs()],
        }
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.grid.cells() * self.n_dirs
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.frame_len()
    }

    pub fn storage(&self) -> Storage {
        if self.stride == 1 {
            Storage::Substep
        } else {
            Storage::Recorded
        }
    }

    /// Frame for substep level `level`; panics if the level is not stored.
    pub fn level(&self, level: usize) -> &[f64] {
        assert!(level % self.stride == 0, "level {level} not stored (stride {})", self.stride);
        let f = level / self.stride;
        let len = self.frame_len();
        &self.data[f * len..(f + 1) * len]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        assert!(level % self.stride == 0, "level {level} not stored (stride {})", self.stride);
        let f = level / self.stride;
        let len = self.frame_len();
        &mut self.data[f * len..(f + 1) * len]
    }

    /// Frame at recorded step `m` (`m = 0` is `t = 0`).
    pub fn recorded(&self, m: usize) -> &[f64] {
        self.level(m * self.tg.substeps)
    }

    #[inline]
    pub fn get(&self, level: usize, k: usize, ix: usize, iy: usize) -> f64 {
        self.level(level)[(ix + self.grid.nx * iy) * self.n_dirs + k]
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn compatible(&self, other: &AngularFluxHistory) -> bool {
        self.grid == other.grid && self.n_dirs == other.n_dirs && self.tg == other.tg && self.stride == other.stride
    }

    /// Particle count `sum u w dx^2` in one frame.
    pub fn mass(&self, level: usize) -> f64 {
        frame_mass(self.level(level), self.weight, self.grid.dx)
    }
}

pub fn frame_mass(frame: &[f64], weight: f64, dx: f64) -> f64 {
    frame.iter().sum::<f64>() * weight * dx * dx
}

/// Mass leaving the domain during one substep that starts from `frame`,
/// counted over every outer face (corner pixels contribute two faces).
pub fn frame_outflow(
    frame: &[f64],
    grid: &GridSpec,
    quad: &AngularQuadrature,
    boundary: &BoundaryGeometry,
    tg: &TimeGrid,
) -> f64 {
    let n = quad.n_dirs();
    let mut total = 0.0;
    for &(cell, nrm) in &boundary.faces {
        for (k, d) in quad.directions.iter().enumerate() {
            let cosn = nrm.0 * d.0 + nrm.1 * d.1;
            if cosn > 0.0 {
                total += cosn * frame[cell * n + k];
            }
        }
    }
    total * quad.weight * tg.c * tg.dt_sub() * grid.dx
}

#[derive(Debug, Clone, Copy)]
struct Upwind {
    diag: f64,
    left: f64,
    right: f64,
    down: f64,
    up: f64,
}

/// Precomputed operators for one medium / kernel / time grid.
pub struct TransportSolver<'a> {
    pub grid: GridSpec,
    pub quad: &'a AngularQuadrature,
    pub tg: TimeGrid,
    pub medium: &'a MediumFields,
    upwind: Vec<Upwind>,
    /// `c dt a` per cell.
    absorb: Vec<f64>,
    /// Collision class per cell (distinct scattering values).
    class: Vec<u32>,
    /// `M_b^{-1}` per class, row-major `n x n`.
    inverse: Vec<Vec<f64>>,
}

impl<'a> TransportSolver<'a> {
    pub fn new(
        medium: &'a MediumFields,
        kernel: &ScatteringKernel,
        quad: &'a AngularQuadrature,
        tg: TimeGrid,
    ) -> Result<Self> {
        let grid = medium.grid;
        if !kernel.matches(quad) {
            return Err(Error::Mismatch(format!(
                "kernel has {} directions, quadrature has {}",
                kernel.n_dirs,
                quad.n_dirs()
            )));
        }
        tg.check_cfl(&grid, quad, medium.a_max())?;
        let nu = tg.courant(&grid);
        let cdt = tg.c * tg.dt_sub();
        let upwind = quad
            .directions
            .iter()
            .map(|&(cx, cy)| Upwind {
                diag: 1.0 - nu * (cx.abs() + cy.abs()),
                left: nu * cx.max(0.0),
                right: nu * (-cx).max(0.0),
                down: nu * cy.max(0.0),
                up: nu * (-cy).max(0.0),
            })
            .collect();
        let absorb = medium.a.data.iter().map(|a| cdt * a).collect();

        let n = quad.n_dirs();
        let mut values: Vec<u64> = Vec::new();
        let mut class = Vec::with_capacity(grid.cells());
        for b in &medium.b.data {
            let bits = b.to_bits();
            let id = match values.iter().position(|v| *v == bits) {
                Some(i) => i,
                None => {
                    values.push(bits);
                    values.len() - 1
                }
            };
            class.push(id as u32);
        }
        let inverse = values
            .iter()
            .map(|bits| {
                let sb = cdt * f64::from_bits(*bits);
                let m = nalgebra::DMatrix::from_fn(n, n, |i, j| {
                    let diag = if i == j { 1.0 + sb } else { 0.0 };
                    diag - sb * kernel.weight * kernel.get(i, j)
                });
                let inv = m
                    .try_inverse()
                    .ok_or_else(|| Error::Kernel("singular collision matrix".into()))?;
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = inv[(i, j)];
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(TransportSolver {
            grid,
            quad,
            tg,
            medium,
            upwind,
            absorb,
            class,
            inverse,
        })
    }

    pub fn n_dirs(&self) -> usize {
        self.quad.n_dirs()
    }

    /// Number of distinct collision matrices that were factorized.
    pub fn collision_classes(&self) -> usize {
        self.inverse.len()
    }

    fn padded_len(&self) -> usize {
        (self.grid.nx + 2) * (self.grid.ny + 2) * self.n_dirs()
    }

    /// Runs the forward recursion from `u^0 = 0`.
    ///
    /// `volume(n, y)` adds the step-`n` source increment (already multiplied
    /// by the time step) into the unpadded buffer `y` before collision.
    /// `visit(n, u^n)` sees every level `0..=N` in order.
    pub fn run_forward(
        &self,
        mut volume: impl FnMut(usize, &mut [f64]),
        mut visit: impl FnMut(usize, &[f64]),
    ) {
        let n = self.n_dirs();
        let cells = self.grid.cells();
        let mut state = vec![0.0; self.padded_len()];
        let mut frame = vec![0.0; cells * n];
        let mut y = vec![0.0; cells * n];
        visit(0, &frame);
        for step in 0..self.tg.n_sub() {
            self.advect(&state, &mut y, false);
            volume(step, &mut y);
            self.collide(&y, &mut state, false);
            self.unpad(&state, &mut frame);
            visit(step + 1, &frame);
        }
    }

    /// Runs the transposed recursion from `z^N = 0` backwards.
    ///
    /// `inject(n, y)` adds the data injected at level `n` (for `n = N..1`)
    /// before the transposed collision; `visit(n, z^n)` sees levels `N..=0`.
    pub fn run_adjoint(
        &self,
        mut inject: impl FnMut(usize, &mut [f64]),
        mut visit: impl FnMut(usize, &[f64]),
    ) {
        let n = self.n_dirs();
        let cells = self.grid.cells();
        let nsub = self.tg.n_sub();
        let mut state = vec![0.0; self.padded_len()];
        let mut frame = vec![0.0; cells * n];
        let mut y = vec![0.0; cells * n];
        visit(nsub, &frame);
        for level in (1..=nsub).rev() {
            self.advect(&state, &mut y, true);
            inject(level, &mut y);
            self.collide(&y, &mut state, true);
            self.unpad(&state, &mut frame);
            visit(level - 1, &frame);
        }
    }

    /// `y = (A - c dt a) p` (or its transpose) from padded `p` into unpadded `y`.
    fn advect(&self, p: &[f64], y: &mut [f64], transpose: bool) {
        let n = self.n_dirs();
        let nx = self.grid.nx;
        let row_stride = (nx + 2) * n;
        let upwind = &self.upwind;
        let absorb = &self.absorb;
        y.par_chunks_mut(nx * n).enumerate().for_each(|(iy, yrow)| {
            let base = (iy + 1) * row_stride + n;
            for ix in 0..nx {
                let c = base + ix * n;
                let ab = absorb[ix + nx * iy];
                let out = &mut yrow[ix * n..(ix + 1) * n];
                for (k, w) in upwind.iter().enumerate() {
                    let centre = p[c + k];
                    let (l, r, d, u) = (p[c - n + k], p[c + n + k], p[c - row_stride + k], p[c + row_stride + k]);
                    let v = if transpose {
                        // transpose: fluxes reverse, i.e. transport along -theta
                        (w.diag - ab) * centre + w.left * r + w.right * l + w.down * u + w.up * d
                    } else {
                        (w.diag - ab) * centre + w.left * l + w.right * r + w.down * d + w.up * u
                    };
                    out[k] = v;
                }
            }
        });
    }

    /// Per-cell `p = M_b^{-1} y` (or `M_b^{-T} y`), writing the padded interior.
    fn collide(&self, y: &[f64], p: &mut [f64], transpose: bool) {
        let n = self.n_dirs();
        let nx = self.grid.nx;
        let row_stride = (nx + 2) * n;
        let class = &self.class;
        let inverse = &self.inverse;
        let ny = self.grid.ny;
        p.par_chunks_mut(row_stride)
            .enumerate()
            .filter(|(py, _)| *py >= 1 && *py <= ny)
            .for_each(|(py, prow)| {
                let iy = py - 1;
                for ix in 0..nx {
                    let cell = ix + nx * iy;
                    let inv = &inverse[class[cell] as usize];
                    let yin = &y[cell * n..(cell + 1) * n];
                    let out = &mut prow[(ix + 1) * n..(ix + 2) * n];
                    for (k, o) in out.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        if transpose {
                            for (j, yj) in yin.iter().enumerate() {
                                acc += inv[j * n + k] * yj;
                            }
                        } else {
                            let row = &inv[k * n..(k + 1) * n];
                            for (m, yj) in row.iter().zip(yin) {
                                acc += m * yj;
                            }
                        }
                        *o = acc;
                    }
                }
            });
    }

    fn unpad(&self, p: &[f64], frame: &mut [f64]) {
        let n = self.n_dirs();
        let nx = self.grid.nx;
        let row_stride = (nx + 2) * n;
        for (iy, row) in frame.chunks_mut(nx * n).enumerate() {
            let start = (iy + 1) * row_stride + n;
            row.copy_from_slice(&p[start..start + nx * n]);
        }
    }

    /// Runs the forward recursion and stores the requested levels.
    pub fn solve_stored(&self, volume: impl FnMut(usize, &mut [f64]), storage: Storage) -> AngularFluxHistory {
        let mut hist = AngularFluxHistory::zeros(self.grid, self.quad, self.tg, storage);
        let stride = hist.stride;
        let len = hist.frame_len();
        self.run_forward(volume, |level, frame| {
            if level % stride == 0 {
                let f = level / stride;
                hist.data[f * len..(f + 1) * len].copy_from_slice(frame);
            }
        });
        hist
    }
}

/// Forward solve for one boundary source.
///
/// The source injects its amplitude as particle mass, spread evenly over the
/// source pixels and over the substeps of the first recorded step, into the
/// quadrature direction equal to the inward normal.
pub fn forward_solve(
    medium: &MediumFields,
    kernel: &ScatteringKernel,
    quad: &AngularQuadrature,
    source: &SourceSpec,
    tg: TimeGrid,
    storage: Storage,
) -> Result<AngularFluxHistory> {
    let solver = TransportSolver::new(medium, kernel, quad, tg)?;
    forward_with(&solver, source, storage)
}

pub fn forward_with(solver: &TransportSolver<'_>, source: &SourceSpec, storage: Storage) -> Result<AngularFluxHistory> {
    let inj = source.injection(&solver.grid, solver.quad, &solver.tg)?;
    Ok(solver.solve_stored(|step, y| inj.apply(step, y), storage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_boundary, make_quadrature, GridSpec, ScalarField, Side};
    use crate::kernel::hg_kernel;

    fn setup(n: usize, a: f64, b: f64) -> (MediumFields, AngularQuadrature, ScatteringKernel, TimeGrid) {
        let grid = GridSpec::new(n, n, 0.1).unwrap();
        let quad = make_quadrature(12).unwrap();
        let kernel = hg_kernel(0.9, &quad).unwrap();
        let medium = MediumFields::homogeneous(grid, a, b).unwrap();
        let tg = TimeGrid { dt_rec: 0.2, n_rec: 30, substeps: 4, c: 1.0 };
        (medium, quad, kernel, tg)
    }

    fn left_source(n: usize, amp: f64) -> SourceSpec {
        SourceSpec { side: Side::Left, offset_px: n / 2 - 2, width_px: 5, amplitude: amp }
    }

    #[test]
    fn zero_source_gives_zero_field() {
        let (m, q, k, tg) = setup(12, 0.1, 100.0);
        let h = forward_solve(&m, &k, &q, &left_source(12, 0.0), tg, Storage::Recorded).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_frame_is_zero_and_field_nonnegative() {
        let (m, q, k, tg) = setup(12, 0.1, 100.0);
        let h = forward_solve(&m, &k, &q, &left_source(12, 1.0), tg, Storage::Substep).unwrap();
        assert!(h.level(0).iter().all(|&v| v == 0.0));
        assert!(h.data.iter().all(|&v| v >= -1e-14));
        assert!(h.mass(tg.substeps) > 0.0);
    }

    #[test]
    fn conservation_without_absorption() {
        let (m, q, k, tg) = setup(16, 0.0, 100.0);
        let boundary = build_boundary(&m.grid);
        let h = forward_solve(&m, &k, &q, &left_source(16, 1.0), tg, Storage::Substep).unwrap();
        let mut out = 0.0;
        for level in 0..=tg.n_sub() {
            let injected = (level.min(tg.substeps)) as f64 / tg.substeps as f64;
            let balance = h.mass(level) + out;
            assert!((balance - injected).abs() <= 1e-12, "level {level}: {balance} vs {injected}");
            out += frame_outflow(h.level(level), &m.grid, &q, &boundary, &tg);
        }
    }

    #[test]
    fn linear_in_amplitude() {
        let (m, q, k, tg) = setup(12, 0.1, 100.0);
        let h1 = forward_solve(&m, &k, &q, &left_source(12, 1.0), tg, Storage::Recorded).unwrap();
        let h3 = forward_solve(&m, &k, &q, &left_source(12, 3.0), tg, Storage::Recorded).unwrap();
        let scale = h1.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in h1.data.iter().zip(&h3.data) {
            assert!((3.0 * a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn collision_classes_follow_distinct_scattering() {
        let (m, q, k, tg) = setup(12, 0.1, 100.0);
        assert_eq!(TransportSolver::new(&m, &k, &q, tg).unwrap().collision_classes(), 1);
    }

    #[test]
    fn kernel_quadrature_mismatch_rejected() {
        let (m, q, _, tg) = setup(12, 0.1, 100.0);
        let k8 = hg_kernel(0.9, &make_quadrature(8).unwrap()).unwrap();
        assert!(matches!(TransportSolver::new(&m, &k8, &q, tg), Err(Error::Mismatch(_))));
    }

    #[test]
    fn cfl_violation_rejected() {
        let (m, q, k, tg) = setup(12, 0.1, 100.0);
        let bad = TimeGrid { substeps: 1, ..tg };
        assert!(matches!(
            forward_solve(&m, &k, &q, &left_source(12, 1.0), bad, Storage::Recorded),
            Err(Error::Cfl(_))
        ));
    }

    #[test]
    fn free_streaming_moves_at_speed_c() {
        let grid = GridSpec::new(20, 20, 0.1).unwrap();
        let quad = make_quadrature(12).unwrap();
        let kernel = hg_kernel(0.9, &quad).unwrap();
        let medium = MediumFields::new(
            grid,
            ScalarField::zeros(&grid),
            ScalarField::zeros(&grid),
            vec![false; 400],
            vec![false; 400],
        )
        .unwrap();
        let tg = TimeGrid { dt_rec: 0.1, n_rec: 8, substeps: 2, c: 1.0 };
        let src = SourceSpec { side: Side::Left, offset_px: 8, width_px: 4, amplitude: 1.0 };
        let h = forward_solve(&medium, &kernel, &quad, &src, tg, Storage::Substep).unwrap();
        let east = quad.find((1.0, 0.0)).unwrap();
        let n = quad.n_dirs();
        let centroid = |level: usize| {
            let f = h.level(level);
            let (mut m, mut mx) = (0.0, 0.0);
            for iy in 0..20 {
                for ix in 0..20 {
                    let v = f[grid.idx(ix, iy) * n + east];
                    m += v;
                    mx += v * grid.center(ix, iy).0;
                }
            }
            (m, mx / m)
        };
        for level in 1..=tg.n_sub() {
            let f = h.level(level);
            let other: f64 = f.iter().enumerate().filter(|(i, _)| i % n != east).map(|(_, v)| v.abs()).sum();
            assert_eq!(other, 0.0);
        }
        // all mass injected by the end of the first recorded step; centroid then moves c dt per substep
        let (m0, x0) = centroid(tg.substeps);
        assert!((m0 * grid.dx * grid.dx * quad.weight - 1.0).abs() < 1e-12);
        for level in tg.substeps + 1..=tg.n_sub() {
            let (m, x) = centroid(level);
            let expect = x0 + (level - tg.substeps) as f64 * tg.dt_sub();
            assert!((m - m0).abs() < 1e-12 * m0, "mass lost before reaching the far side");
            assert!((x - expect).abs() < 1e-12, "level {level}: {x} vs {expect}");
        }
    }

    #[test]
    fn stored_levels_agree() {
        let (m, q, k, tg) = setup(10, 0.2, 30.0);
        let src = left_source(10, 1.0);
        let sub = forward_solve(&m, &k, &q, &src, tg, Storage::Substep).unwrap();
        let rec = forward_solve(&m, &k, &q, &src, tg, Storage::Recorded).unwrap();
        for mstep in 0..=tg.n_rec {
            assert_eq!(sub.recorded(mstep), rec.recorded(mstep));
        }
    }

    #[test]
    fn outflow_counts_corner_faces_separately() {
        let grid = GridSpec::new(4, 4, 0.5).unwrap();
        let quad = make_quadrature(8).unwrap();
        let boundary = build_boundary(&grid);
        let tg = TimeGrid { dt_rec: 0.2, n_rec: 1, substeps: 1, c: 1.0 };
        let n = quad.n_dirs();
        let diag = quad.find((-(0.5f64.sqrt()), -(0.5f64.sqrt()))).unwrap();
        let mut frame = vec![0.0; grid.cells() * n];
        frame[grid.idx(0, 0) * n + diag] = 2.0;
        let got = frame_outflow(&frame, &grid, &quad, &boundary, &tg);
        let c = 0.5f64.sqrt();
        let expect = 2.0 * (c + c) * quad.weight * tg.dt_sub() * grid.dx;
        assert!((got - expect).abs() < 1e-15);
    }
}
