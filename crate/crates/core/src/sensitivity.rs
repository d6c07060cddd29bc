//! Absorption sensitivity maps for single source-receiver-time triples.
//!
//! The map for receiver `r` at recorded time `t_r` is the correlation of the
//! forward field with the adjoint driven by a unit impulse at `(r, t_r)`, so
//! `sum_x map(x) da(x)` is the linearized change of that single datum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_boundary, AngularQuadrature, MediumFields, ScalarField, TimeGrid};
use crate::kernel::ScatteringKernel;
use crate::transport::{adjoint_correlate, forward_with, BoundaryFluxTrace, SourceSpec, Storage, TransportSolver};

/// Receiver pixel and recorded time (s) of one map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityRequest {
    pub receiver: (usize, usize),
    pub t_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub field: ScalarField,
    pub source: SourceSpec,
    pub receiver: (usize, usize),
    pub t_r: f64,
}

/// Recorded step index `m` with `t_rec(m) == t_r`.
fn recorded_step(tg: &TimeGrid, t_r: f64) -> Result<usize> {
    let m = (t_r / tg.dt_rec).round();
    if !(m >= 1.0 && m <= tg.n_rec as f64) || (m * tg.dt_rec - t_r).abs() > 1e-9 * tg.dt_rec {
        return Err(Error::Sensitivity(format!(
            "t_r = {t_r} s is not a recorded time of the grid (dt {} s, horizon {} s)",
            tg.dt_rec,
            tg.horizon()
        )));
    }
    Ok(m as usize)
}

/// One map per request, sharing a single forward solve.
pub fn sensitivity_maps(
    medium: &MediumFields,
    kernel: &ScatteringKernel,
    quad: &AngularQuadrature,
    source: &SourceSpec,
    requests: &[SensitivityRequest],
    tg: TimeGrid,
) -> Result<Vec<SensitivityMap>> {
    let grid = medium.grid;
    let boundary = build_boundary(&grid);
    let solver = TransportSolver::new(medium, kernel, quad, tg)?;
    let impulses = requests
        .iter()
        .map(|req| {
            let (ix, iy) = req.receiver;
            let bi = boundary.find(ix, iy).ok_or_else(|| {
                Error::Sensitivity(format!("receiver ({ix}, {iy}) is not a boundary pixel"))
            })?;
            let m = recorded_step(&tg, req.t_r)?;
            let bp = &boundary.pixels[bi];
            let mut values = vec![0.0; tg.n_rec];
            values[m - 1] = 1.0 / tg.dt_rec;
            Ok(BoundaryFluxTrace {
                pixels: vec![(ix, iy)],
                normals: vec![bp.normal],
                arcs: vec![bp.arc],
                dt_rec: tg.dt_rec,
                n_rec: tg.n_rec,
                window: vec![true; tg.n_rec],
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let u = forward_with(&solver, source, Storage::Substep)?;
    requests
        .iter()
        .zip(&impulses)
        .map(|(req, zeta)| {
            Ok(SensitivityMap {
                field: adjoint_correlate(&solver, &u, zeta)?,
                source: *source,
                receiver: req.receiver,
                t_r: req.t_r,
            })
        })
        .collect()
}

pub fn sensitivity_map(
    medium: &MediumFields,
    kernel: &ScatteringKernel,
    quad: &AngularQuadrature,
    source: &SourceSpec,
    request: SensitivityRequest,
    tg: TimeGrid,
) -> Result<SensitivityMap> {
    Ok(sensitivity_maps(medium, kernel, quad, source, &[request], tg)?.remove(0))
}

/// Share of the total absolute sensitivity that lies in clear cells.
pub fn clear_layer_fraction(map: &ScalarField, clear_mask: &[bool]) -> Result<f64> {
    if map.data.len() != clear_mask.len() {
        return Err(Error::Mismatch("map and clear mask differ in size".into()));
    }
    let total: f64 = map.data.iter().map(|v| v.abs()).sum();
    if !(total > 0.0) {
        return Err(Error::Sensitivity("map is identically zero".into()));
    }
    let clear: f64 = map.data.iter().zip(clear_mask).filter(|(_, c)| **c).map(|(v, _)| v.abs()).sum();
    Ok(clear / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_phantom, make_quadrature, ClearLayer, GridSpec, Obstacle, PhantomSpec, Side};
    use crate::kernel::hg_kernel;
    use crate::transport::{linearized_forward, measure};

    fn setup(nx: usize, clear: bool) -> (MediumFields, ScatteringKernel, AngularQuadrature, TimeGrid) {
        let grid = GridSpec::new(nx, nx, 0.1).unwrap();
        let mut spec = PhantomSpec::homogeneous(0.1, 10.0);
        if clear {
            spec.clear_layer = Some(ClearLayer { offset_px: 2, thickness_px: 2 });
        }
        let medium = build_phantom(&spec, &grid).unwrap();
        let quad = make_quadrature(8).unwrap();
        let kernel = hg_kernel(0.5, &quad).unwrap();
        let tg = TimeGrid { dt_rec: 0.2, n_rec: 12, substeps: 4, c: 1.0 };
        (medium, kernel, quad, tg)
    }

    fn left_source(nx: usize) -> SourceSpec {
        SourceSpec { side: Side::Left, offset_px: nx / 2 - 1, width_px: 2, amplitude: 1.0 }
    }

    #[test]
    fn pairing_matches_linearized_datum() {
        let (medium, kernel, quad, tg) = setup(12, true);
        let src = left_source(12);
        let req = SensitivityRequest { receiver: (6, 11), t_r: 2.0 };
        let map = sensitivity_map(&medium, &kernel, &quad, &src, req, tg).unwrap();
        let da = ScalarField::from_fn(&medium.grid, |ix, iy| ((ix * 7 + iy * 3) % 5) as f64 * 0.01 - 0.02);
        let solver = TransportSolver::new(&medium, &kernel, &quad, tg).unwrap();
        let u = forward_with(&solver, &src, Storage::Substep).unwrap();
        let du = linearized_forward(&solver, &u, &da, Storage::Recorded).unwrap();
        let g = measure(&du, &build_boundary(&medium.grid), &quad);
        let r = g.pixels.iter().position(|&p| p == (6, 11)).unwrap();
        let direct = g.get(r, 10);
        let paired = map.field.dot(&da);
        assert!(direct.abs() > 0.0);
        assert!((paired - direct).abs() <= 1e-10 * direct.abs(), "{paired} vs {direct}");
    }

    #[test]
    fn causality_before_arrival() {
        let (medium, kernel, quad, tg) = setup(12, false);
        let src = left_source(12);
        let reqs = [
            SensitivityRequest { receiver: (11, 6), t_r: 0.2 },
            SensitivityRequest { receiver: (11, 6), t_r: 2.0 },
        ];
        let maps = sensitivity_maps(&medium, &kernel, &quad, &src, &reqs, tg).unwrap();
        let peak = |f: &ScalarField| f.data.iter().fold(0.0f64, |p, v| p.max(v.abs()));
        assert!(peak(&maps[1].field) > 0.0);
        assert!(peak(&maps[0].field) <= 1e-12 * peak(&maps[1].field));
    }

    #[test]
    fn mirror_symmetry() {
        let nx = 12;
        let grid = GridSpec::new(nx, nx, 0.1).unwrap();
        let mut spec = PhantomSpec::homogeneous(0.1, 10.0);
        spec.obstacles = vec![
            Obstacle { center: [0.35, 0.6], radius: 0.2, a: 0.4 },
            Obstacle { center: [0.85, 0.6], radius: 0.2, a: 0.4 },
        ];
        let medium = build_phantom(&spec, &grid).unwrap();
        let quad = make_quadrature(12).unwrap();
        let kernel = hg_kernel(0.7, &quad).unwrap();
        let tg = TimeGrid { dt_rec: 0.2, n_rec: 10, substeps: 4, c: 1.0 };
        let src = SourceSpec { side: Side::Bottom, offset_px: 2, width_px: 3, amplitude: 1.0 };
        let mirrored = SourceSpec { offset_px: nx - 2 - 3, ..src };
        let a = sensitivity_map(&medium, &kernel, &quad, &src, SensitivityRequest { receiver: (8, 11), t_r: 1.8 }, tg).unwrap();
        let b = sensitivity_map(&medium, &kernel, &quad, &mirrored, SensitivityRequest { receiver: (3, 11), t_r: 1.8 }, tg)
            .unwrap();
        let peak = a.field.data.iter().fold(0.0f64, |p, v| p.max(v.abs()));
        assert!(peak > 0.0);
        for iy in 0..nx {
            for ix in 0..nx {
                let d = (a.field.get(ix, iy) - b.field.get(nx - 1 - ix, iy)).abs();
                assert!(d <= 1e-12 * peak, "({ix}, {iy}): {d}");
            }
        }
    }

    #[test]
    fn bilinear_in_source_amplitude() {
        let (medium, kernel, quad, tg) = setup(10, false);
        let src = left_source(10);
        let req = SensitivityRequest { receiver: (9, 5), t_r: 2.0 };
        let a = sensitivity_map(&medium, &kernel, &quad, &src, req, tg).unwrap();
        let b = sensitivity_map(&medium, &kernel, &quad, &SourceSpec { amplitude: 3.0, ..src }, req, tg).unwrap();
        for (x, y) in a.field.data.iter().zip(&b.field.data) {
            assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let (medium, kernel, quad, tg) = setup(10, false);
        let src = left_source(10);
        let interior = SensitivityRequest { receiver: (4, 4), t_r: 1.0 };
        assert!(sensitivity_map(&medium, &kernel, &quad, &src, interior, tg).is_err());
        for t_r in [0.0, 0.3, 2.6] {
            let req = SensitivityRequest { receiver: (9, 5), t_r };
            assert!(sensitivity_map(&medium, &kernel, &quad, &src, req, tg).is_err(), "t_r {t_r}");
        }
    }

    #[test]
    fn fraction_limits() {
        let grid = GridSpec::new(4, 4, 0.1).unwrap();
        let mask: Vec<bool> = (0..16).map(|i| i < 4).collect();
        let inside = ScalarField::from_fn(&grid, |_, iy| if iy == 0 { -2.0 } else { 0.0 });
        let outside = ScalarField::from_fn(&grid, |_, iy| if iy == 0 { 0.0 } else { 1.0 });
        assert_eq!(clear_layer_fraction(&inside, &mask).unwrap(), 1.0);
        assert_eq!(clear_layer_fraction(&outside, &mask).unwrap(), 0.0);
        let mixed = ScalarField::constant(&grid, -1.0);
        assert_eq!(clear_layer_fraction(&mixed, &mask).unwrap(), 0.25);
        assert!(clear_layer_fraction(&ScalarField::zeros(&grid), &mask).is_err());
        assert!(clear_layer_fraction(&mixed, &mask[..8]).is_err());
    }
}
