//! Boundary sources, the outgoing-flux measurement, receiver selection and residuals.

use serde::{Deserialize, Serialize};

use super::AngularFluxHistory;
use crate::error::{Error, Result};
use crate::grid::{AngularQuadrature, BoundaryGeometry, GridSpec, Side, TimeGrid};

/// A boundary pulse of `width_px` pixels emitting along the inward normal
/// during the first recorded step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub side: Side,
    /// First pixel along the side (x index for bottom/top, y index for left/right).
    pub offset_px: usize,
    pub width_px: usize,
    /// Total injected particle mass.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    1.0
}

/// Per-substep volume increment realizing a [`SourceSpec`].
#[derive(Debug, Clone)]
pub struct Injection {
    cells: Vec<usize>,
    dir: usize,
    n_dirs: usize,
    increment: f64,
    steps: usize,
}

impl Injection {
    pub fn apply(&self, step: usize, y: &mut [f64]) {
        if step < self.steps && self.increment != 0.0 {
            for &c in &self.cells {
                y[c * self.n_dirs + self.dir] += self.increment;
            }
        }
    }
}

impl SourceSpec {
    pub fn pixels(&self, grid: &GridSpec) -> Result<Vec<(usize, usize)>> {
        let along = match self.side {
            Side::Left | Side::Right => grid.ny,
            Side::Bottom | Side::Top => grid.nx,
        };
        if self.width_px == 0 || self.offset_px == 0 || self.offset_px + self.width_px > along - 1 {
            return Err(Error::Source(format!(
                "source pixels {}..{} do not fit strictly inside the {:?} side (length {along})",
                self.offset_px,
                self.offset_px + self.width_px,
                self.side
            )));
        }
        Ok((self.offset_px..self.offset_px + self.width_px)
            .map(|i| match self.side {
                Side::Left => (0, i),
                Side::Right => (grid.nx - 1, i),
                Side::Bottom => (i, 0),
                Side::Top => (i, grid.ny - 1),
            })
            .collect())
    }

    /// Quadrature index of the inward normal.
    pub fn direction(&self, quad: &AngularQuadrature) -> Result<usize> {
        let (nx, ny) = self.side.normal();
        quad.find((-nx, -ny)).ok_or_else(|| {
            Error::Source(format!(
                "{} directions contain no inward normal for the {:?} side",
                quad.n_dirs(),
                self.side
            ))
        })
    }

    /// Arc coordinate of the source center.
    pub fn center_arc(&self, grid: &GridSpec, boundary: &BoundaryGeometry) -> Result<f64> {
        let px = self.pixels(grid)?;
        let mut sum = 0.0;
        for (ix, iy) in &px {
            let i = boundary
                .find(*ix, *iy)
                .ok_or_else(|| Error::Source(format!("pixel ({ix}, {iy}) is not on the boundary")))?;
            sum += boundary.pixels[i].arc;
        }
        Ok(sum / px.len() as f64)
    }

    pub fn injection(&self, grid: &GridSpec, quad: &AngularQuadrature, tg: &TimeGrid) -> Result<Injection> {
        let px = self.pixels(grid)?;
        let dir = self.direction(quad)?;
        let increment =
            self.amplitude / (tg.substeps as f64 * px.len() as f64 * quad.weight * grid.dx * grid.dx);
        Ok(Injection {
            cells: px.iter().map(|&(ix, iy)| grid.idx(ix, iy)).collect(),
            dir,
            n_dirs: quad.n_dirs(),
            increment,
            steps: tg.substeps,
        })
    }
}

/// `per_side` adjacent sources of `width_px` pixels on each side, tiling a
/// centered span of `span_cm`, ordered counter-clockwise by arc coordinate.
pub fn standard_sources(
    grid: &GridSpec,
    per_side: usize,
    width_px: usize,
    span_cm: f64,
    amplitude: f64,
) -> Result<Vec<SourceSpec>> {
    let mut out = Vec::with_capacity(4 * per_side);
    for side in [Side::Bottom, Side::Right, Side::Top, Side::Left] {
        let along = match side {
            Side::Left | Side::Right => grid.ny,
            Side::Bottom | Side::Top => grid.nx,
        };
        let span_px = (span_cm / grid.dx).round() as usize;
        if span_px < per_side * width_px || span_px >= along {
            return Err(Error::Source(format!(
                "span of {span_px} px cannot hold {per_side} sources of {width_px} px on a side of {along} px"
            )));
        }
        let start = (along - span_px) / 2;
        let gap = (span_px - per_side * width_px) / per_side.max(1);
        let mut side_sources: Vec<SourceSpec> = (0..per_side)
            .map(|i| SourceSpec {
                side,
                offset_px: start + gap / 2 + i * (width_px + gap),
                width_px,
                amplitude,
            })
            .collect();
        // top and left run against the coordinate direction on the perimeter loop
        if matches!(side, Side::Top | Side::Left) {
            side_sources.reverse();
        }
        out.extend(side_sources);
    }
    Ok(out)
}

/// Receiver selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverRule {
    /// Minimum perimeter distance (cm) from the source center.
    pub min_arc_cm: f64,
    /// Recorded steps with `t <= window_start_s` are discarded.
    pub window_start_s: f64,
}

impl Default for ReceiverRule {
    fn default() -> Self {
        ReceiverRule {
            min_arc_cm: 5.0,
            window_start_s: 8.0,
        }
    }
}

/// Receivers (indices into [`BoundaryGeometry::pixels`]) and the time window
/// (`window[m - 1]` for recorded step `m`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverSet {
    pub indices: Vec<usize>,
    pub window: Vec<bool>,
}

pub fn time_window(tg: &TimeGrid, start_s: f64) -> Vec<bool> {
    (1..=tg.n_rec)
        .map(|m| tg.t_rec(m) > start_s + 1e-9 * tg.dt_rec)
        .collect()
}

pub fn select_receivers(
    source: &SourceSpec,
    grid: &GridSpec,
    boundary: &BoundaryGeometry,
    rule: &ReceiverRule,
    tg: &TimeGrid,
) -> Result<ReceiverSet> {
    let center = source.center_arc(grid, boundary)?;
    let indices: Vec<usize> = boundary
        .pixels
        .iter()
        .enumerate()
        .filter(|(_, p)| boundary.arc_distance(p.arc, center) >= rule.min_arc_cm - 1e-9)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(Error::NoReceivers(format!(
            "no boundary pixel is {} cm away from the source",
            rule.min_arc_cm
        )));
    }
    let window = time_window(tg, rule.window_start_s);
    if !window.iter().any(|&w| w) {
        return Err(Error::NoReceivers(format!(
            "time window after {} s is empty (horizon {} s)",
            rule.window_start_s,
            tg.horizon()
        )));
    }
    Ok(ReceiverSet { indices, window })
}

/// Outgoing flux per receiver pixel and recorded step.
///
/// `values[r * n_rec + (m - 1)]` is the datum of receiver `r` at recorded step
/// `m`. Entries outside the window are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFluxTrace {
    pub pixels: Vec<(usize, usize)>,
    pub normals: Vec<(f64, f64)>,
    pub arcs: Vec<f64>,
    pub dt_rec: f64,
    pub n_rec: usize,
    pub window: Vec<bool>,
    pub values: Vec<f64>,
}

/// Residuals and adjoint boundary data share the trace layout; values may be negative.
pub type ResidualTrace = BoundaryFluxTrace;

impl BoundaryFluxTrace {
    pub fn n_receivers(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn get(&self, r: usize, m: usize) -> f64 {
        self.values[r * self.n_rec + (m - 1)]
    }

    pub fn same_layout(&self, other: &BoundaryFluxTrace) -> bool {
        self.pixels == other.pixels && self.window == other.window && self.n_rec == other.n_rec
    }

    /// Keeps the receivers of `set` and zeroes entries outside its window.
    pub fn restrict(&self, set: &ReceiverSet, boundary: &BoundaryGeometry) -> Result<BoundaryFluxTrace> {
        if set.window.len() != self.n_rec {
            return Err(Error::Mismatch("window length differs from recorded steps".into()));
        }
        let mut out = BoundaryFluxTrace {
            pixels: Vec::with_capacity(set.indices.len()),
            normals: Vec::with_capacity(set.indices.len()),
            arcs: Vec::with_capacity(set.indices.len()),
            dt_rec: self.dt_rec,
            n_rec: self.n_rec,
            window: set.window.clone(),
            values: Vec::with_capacity(set.indices.len() * self.n_rec),
        };
        for &bi in &set.indices {
            let bp = &boundary.pixels[bi];
            let r = self
                .pixels
                .iter()
                .position(|&p| p == (bp.ix, bp.iy))
                .ok_or_else(|| Error::Mismatch(format!("receiver ({}, {}) not measured", bp.ix, bp.iy)))?;
            out.pixels.push(self.pixels[r]);
            out.normals.push(self.normals[r]);
            out.arcs.push(self.arcs[r]);
            for m in 1..=self.n_rec {
                let keep = set.window[m - 1] && self.window[m - 1];
                out.values.push(if keep { self.get(r, m) } else { 0.0 });
            }
        }
        Ok(out)
    }

    /// Windowed inner product `sum v w dt_rec`.
    pub fn inner(&self, other: &BoundaryFluxTrace) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.n_receivers() {
            for m in 1..=self.n_rec {
                if self.window[m - 1] {
                    acc += self.get(r, m) * other.get(r, m);
                }
            }
        }
        acc * self.dt_rec
    }

    /// Discrete L2 norm `sqrt(sum v^2 dt_rec)` over receivers and the window.
    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> BoundaryFluxTrace {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// A trace with this layout and all values zero.
    pub fn zeros_like(&self) -> BoundaryFluxTrace {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = 0.0);
        out
    }
}

/// `G(r, t) = sum_{k: nu.theta_k > 0} (nu.theta_k) u(r, theta_k, t) w` at every
/// recorded step and every boundary pixel.
pub fn measure(flux: &AngularFluxHistory, boundary: &BoundaryGeometry, quad: &AngularQuadrature) -> BoundaryFluxTrace {
    let n_rec = flux.tg.n_rec;
    let n = quad.n_dirs();
    let nb = boundary.pixels.len();
    let mut values = vec![0.0; nb * n_rec];
    for m in 1..=n_rec {
        let frame = flux.recorded(m);
        for (r, bp) in boundary.pixels.iter().enumerate() {
            let cell = flux.grid.idx(bp.ix, bp.iy);
            let mut g = 0.0;
            for (k, d) in quad.directions.iter().enumerate() {
                let cosn = bp.normal.0 * d.0 + bp.normal.1 * d.1;
                if cosn > 0.0 {
                    g += cosn * frame[cell * n + k];
                }
            }
            values[r * n_rec + m - 1] = g * quad.weight;
        }
    }
    BoundaryFluxTrace {
        pixels: boundary.pixels.iter().map(|p| (p.ix, p.iy)).collect(),
        normals: boundary.pixels.iter().map(|p| p.normal).collect(),
        arcs: boundary.pixels.iter().map(|p| p.arc).collect(),
        dt_rec: flux.tg.dt_rec,
        n_rec,
        window: vec![true; n_rec],
        values,
    }
}

/// `computed - observed` on the windowed support. Any weighting of the
/// residual is a scalar and is carried by the relaxation parameters.
pub fn residual(computed: &BoundaryFluxTrace, observed: &BoundaryFluxTrace) -> Result<ResidualTrace> {
    if !computed.same_layout(observed) || computed.values.len() != observed.values.len() {
        return Err(Error::Mismatch(
            "computed and observed traces have different receivers or windows".into(),
        ));
    }
    let mut out = computed.clone();
    for r in 0..out.n_receivers() {
        for m in 1..=out.n_rec {
            let i = r * out.n_rec + m - 1;
            out.values[i] = if out.window[m - 1] {
                computed.values[i] - observed.values[i]
            } else {
                0.0
            };
        }
    }
    Ok(out)
}
