//! Level-set shape representation: indicator, obstacle map, narrow band,
//! update, rescaling, initialization from a pixel reconstruction and
//! connected-component extraction.
//!
//! A shape is `D = {phi <= 0}`. Inside `D` the absorption is the constant
//! `a_hat`, outside it is the background `a_b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Mask, ScalarField};

/// Level-set parameters. Gradient and band-size constants are folded into `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    /// Absorption inside the shape (cm^-1).
    pub a_hat: f64,
    /// Band half-width in cells.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Relaxation; `None` calibrates on the first informative step.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Value kept for `|min phi|` (or `max phi` for an empty shape).
    #[serde(default = "default_target")]
    pub rescale_target: f64,
}

fn default_rho() -> f64 {
    1.0
}

fn default_target() -> f64 {
    1.0
}

impl ShapeParams {
    pub fn new(a_hat: f64) -> Self {
        ShapeParams {
            a_hat,
            rho: default_rho(),
            eta: None,
            rescale_target: default_target(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_hat > 0.0 && self.a_hat.is_finite()) {
            return Err(Error::LevelSet(format!("a_hat must be positive, got {}", self.a_hat)));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return Err(Error::LevelSet(format!("band half-width must be >= 1 cell, got {}", self.rho)));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::LevelSet(format!("eta must be positive, got {eta}")));
            }
        }
        if !(self.rescale_target > 0.0 && self.rescale_target.is_finite()) {
            return Err(Error::LevelSet("rescale target must be positive".into()));
        }
        Ok(())
    }
}

/// `1` where `phi <= 0`.
pub fn heaviside_map(phi: &ScalarField) -> Mask {
    phi.data.iter().map(|&v| v <= 0.0).collect()
}

/// `a_s = Psi_phi (a_hat - a_b)`.
pub fn lambda_map(phi: &ScalarField, a_b: &ScalarField, a_hat: f64) -> ScalarField {
    let data = phi
        .data
        .iter()
        .zip(&a_b.data)
        .map(|(&p, &ab)| if p <= 0.0 { a_hat - ab } else { 0.0 })
        .collect();
    ScalarField { nx: phi.nx, ny: phi.ny, data }
}

/// `a_b + Lambda(phi)`.
pub fn shape_absorption(phi: &ScalarField, a_b: &ScalarField, a_hat: f64) -> ScalarField {
    let data = phi
        .data
        .iter()
        .zip(&a_b.data)
        .map(|(&p, &ab)| if p <= 0.0 { a_hat } else { ab })
        .collect();
    ScalarField { nx: phi.nx, ny: phi.ny, data }
}

/// True when `a` equals `a_hat` on `{phi <= 0}` and `a_b` elsewhere, exactly.
pub fn is_admissible(phi: &ScalarField, a: &ScalarField, a_b: &ScalarField, a_hat: f64) -> bool {
    phi.data.iter().all(|v| v.is_finite())
        && phi
            .data
            .iter()
            .zip(&a.data)
            .zip(&a_b.data)
            .all(|((&p, &av), &ab)| if p <= 0.0 { av == a_hat } else { av == ab })
}

/// A grid edge whose two cells lie on opposite sides of the zero level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    /// Lower-left cell of the pair.
    pub cell: (usize, usize),
    /// `true` for the edge between `(ix, iy)` and `(ix + 1, iy)`.
    pub vertical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    pub mask: Mask,
    pub faces: Vec<Face>,
}

impl BandMask {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Sign-change faces and every cell whose center lies within Chebyshev
/// distance `rho` (cells) of a face midpoint.
pub fn extract_band(phi: &ScalarField, rho: f64) -> BandMask {
    let (nx, ny) = (phi.nx, phi.ny);
    let inside = heaviside_map(phi);
    let mut faces = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            let c = inside[ix + nx * iy];
            if ix + 1 < nx && inside[ix + 1 + nx * iy] != c {
                faces.push(Face { cell: (ix, iy), vertical: true });
            }
            if iy + 1 < ny && inside[ix + nx * (iy + 1)] != c {
                faces.push(Face { cell: (ix, iy), vertical: false });
            }
        }
    }
    // doubled coordinates: cell centers at 2i+1, face midpoints on integers
    let r2 = (2.0 * rho).floor() as i64;
    let mut mask = vec![false; nx * ny];
    for f in &faces {
        let (ix, iy) = (f.cell.0 as i64, f.cell.1 as i64);
        let (mx, my) = if f.vertical {
            (2 * ix + 2, 2 * iy + 1)
        } else {
            (2 * ix + 1, 2 * iy + 2)
        };
        // cells with |2j + 1 - m| <= r2
        let lo = |m: i64| ((m - r2 - 1) as f64 / 2.0).ceil().max(0.0) as i64;
        let hi = |m: i64, n: usize| (((m + r2 - 1) as f64 / 2.0).floor() as i64).min(n as i64 - 1);
        for jy in lo(my)..=hi(my, ny) {
            for jx in lo(mx)..=hi(mx, nx) {
                mask[(jx + nx as i64 * jy) as usize] = true;
            }
        }
    }
    BandMask { mask, faces }
}

/// `phi' = phi - eta (a_hat - a_b) I` on band cells, `phi` elsewhere.
///
/// `I` is the descent-oriented correlation (the negative gradient of the
/// data misfit with respect to absorption). An empty band is a no-op.
pub fn levelset_update(
    phi: &ScalarField,
    i_j: &ScalarField,
    band: &BandMask,
    a_b: &ScalarField,
    a_hat: f64,
    eta: f64,
) -> ScalarField {
    if band.is_empty() {
        log::warn!("level-set band is empty; update skipped");
        return phi.clone();
    }
    let mut out = phi.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        if band.mask[i] {
            *v -= eta * (a_hat - a_b.data[i]) * i_j.data[i];
        }
    }
    out
}

/// Scales `phi` so that `min phi = -target`, or `max phi = target` when
/// `phi` has no negative values.
pub fn rescale(phi: &ScalarField, target: f64) -> Result<ScalarField> {
    let (lo, hi) = (phi.min(), phi.max());
    if !phi.is_finite() {
        return Err(Error::NonFinite("level-set function".into()));
    }
    let s = if lo < 0.0 {
        target / lo.abs()
    } else if hi > 0.0 {
        target / hi
    } else {
        return Err(Error::LevelSet("cannot rescale a level-set function that is identically zero".into()));
    };
    let mut out = phi.clone();
    out.data.iter_mut().for_each(|v| *v *= s);
    Ok(out)
}

/// Contrast sign of the sought shape: `+1` for `a_hat > a_b`, `-1` for
/// `a_hat < a_b` on every candidate cell.
pub fn contrast_sign(a_b: &ScalarField, a_hat: f64, candidates: &Mask) -> Result<f64> {
    let mut pos = false;
    let mut neg = false;
    for (ab, &c) in a_b.data.iter().zip(candidates) {
        if c {
            pos |= a_hat > *ab;
            neg |= a_hat < *ab;
            if a_hat == *ab {
                return Err(Error::LevelSet(format!("a_hat = {a_hat} equals the background on a candidate cell")));
            }
        }
    }
    match (pos, neg) {
        (true, false) => Ok(1.0),
        (false, true) => Ok(-1.0),
        (false, false) => Err(Error::LevelSet("no candidate cells".into())),
        (true, true) => Err(Error::LevelSet("contrast sign differs between candidate cells".into())),
    }
}

/// Initial level set from a pixel reconstruction `a_tbt`.
///
/// `a_LS = gamma max a_tbt` (positive contrast) or `min a_tbt / gamma`
/// (negative contrast), both over the candidate cells;
/// `phi = sign (a_LS - a_tbt)`, rescaled. Non-candidate cells are kept
/// outside the shape.
pub fn init_from_tbt(
    a_tbt: &ScalarField,
    a_b: &ScalarField,
    params: &ShapeParams,
    gamma: f64,
    candidates: &Mask,
) -> Result<ScalarField> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::LevelSet(format!("threshold gamma must lie in (0, 1), got {gamma}")));
    }
    let sign = contrast_sign(a_b, params.a_hat, candidates)?;
    let vals = a_tbt.data.iter().zip(candidates).filter(|(_, c)| **c).map(|(v, _)| *v);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return Err(Error::LevelSet("pixel reconstruction has no contrast on the candidate cells".into()));
    }
    let a_ls = if sign > 0.0 { gamma * hi } else { lo / gamma };
    let mut phi = ScalarField {
        nx: a_tbt.nx,
        ny: a_tbt.ny,
        data: a_tbt.data.iter().map(|v| sign * (a_ls - v)).collect(),
    };
    let scale = phi.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (v, &c) in phi.data.iter_mut().zip(candidates) {
        if !c {
            *v = v.abs().max(scale);
        }
    }
    rescale(&phi, params.rescale_target)
}

/// Boundary displacement in cells implied by a change `delta` of `phi`,
/// `|delta| / |grad phi|` with central differences in cell units, maximized
/// over the band.
pub fn max_motion_cells(phi: &ScalarField, delta: &ScalarField, band: &BandMask) -> f64 {
    let (nx, ny) = (phi.nx, phi.ny);
    let mut worst = 0.0f64;
    for iy in 0..ny {
        for ix in 0..nx {
            let i = ix + nx * iy;
            if !band.mask[i] || delta.data[i] == 0.0 {
                continue;
            }
            let g = gradient_norm(phi, ix, iy);
            let m = if g > 0.0 { delta.data[i].abs() / g } else { f64::INFINITY };
            worst = worst.max(m);
        }
    }
    worst
}

fn gradient_norm(phi: &ScalarField, ix: usize, iy: usize) -> f64 {
    let (nx, ny) = (phi.nx, phi.ny);
    let at = |x: usize, y: usize| phi.data[x + nx * y];
    let d = |lo: f64, hi: f64, span: f64| (hi - lo) / span;
    let gx = match (ix > 0, ix + 1 < nx) {
        (true, true) => d(at(ix - 1, iy), at(ix + 1, iy), 2.0),
        (false, true) => d(at(ix, iy), at(ix + 1, iy), 1.0),
        (true, false) => d(at(ix - 1, iy), at(ix, iy), 1.0),
        (false, false) => 0.0,
    };
    let gy = match (iy > 0, iy + 1 < ny) {
        (true, true) => d(at(ix, iy - 1), at(ix, iy + 1), 2.0),
        (false, true) => d(at(ix, iy), at(ix, iy + 1), 1.0),
        (true, false) => d(at(ix, iy - 1), at(ix, iy), 1.0),
        (false, false) => 0.0,
    };
    gx.hypot(gy)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub area_cells: usize,
    /// Centroid in cm.
    pub centroid: (f64, f64),
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub mask: Mask,
    pub components: Vec<Component>,
}

/// Shape mask and its 4-connected components, ordered by first cell.
pub fn extract_shape(phi: &ScalarField, grid: &GridSpec) -> Shape {
    let mask = heaviside_map(phi);
    let components = components(&mask, grid);
    Shape { mask, components }
}

pub fn components(mask: &Mask, grid: &GridSpec) -> Vec<Component> {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut cells = Vec::new();
        while let Some(i) = stack.pop() {
            cells.push(i);
            let (ix, iy) = (i % nx, i / nx);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if ix > 0 {
                push(i - 1);
            }
            if ix + 1 < nx {
                push(i + 1);
            }
            if iy > 0 {
                push(i - nx);
            }
            if iy + 1 < ny {
                push(i + nx);
            }
        }
        cells.sort_unstable();
        let (sx, sy) = cells.iter().fold((0.0, 0.0), |(sx, sy), &i| {
            let (cx, cy) = grid.center(i % nx, i / nx);
            (sx + cx, sy + cy)
        });
        let n = cells.len() as f64;
        out.push(Component {
            area_cells: cells.len(),
            centroid: (sx / n, sy / n),
            cells,
        });
    }
    out
}

/// Intersection over union of two masks (1 when both are empty).
pub fn jaccard(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of cells where two masks differ.
pub fn mask_difference(a: &Mask, b: &Mask) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}
