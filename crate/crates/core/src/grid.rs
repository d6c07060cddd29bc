//! Pixel grid, angular quadrature, time grid, boundary geometry and phantom media.
//!
//! Coordinates are in cm with the origin at the lower-left domain corner. Pixel
//! `(ix, iy)` covers `[ix*dx, (ix+1)*dx] x [iy*dx, (iy+1)*dx]`; fields are stored
//! row-major with `x` fastest (`index = ix + nx * iy`).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Pixel edge length in cm.
    pub dx: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64) -> Result<Self> {
        let g = GridSpec { nx, ny, dx };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::Grid(format!(
                "need at least 4x4 pixels, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::Grid(format!("dx must be positive, got {}", self.dx)));
        }
        Ok(())
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        ix + self.nx * iy
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.dx
    }

    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        ((ix as f64 + 0.5) * self.dx, (iy as f64 + 0.5) * self.dx)
    }

    /// Chebyshev distance (in cells) from pixel to the nearest domain edge row/column.
    pub fn edge_depth(&self, ix: usize, iy: usize) -> usize {
        ix.min(iy).min(self.nx - 1 - ix).min(self.ny - 1 - iy)
    }
}

/// Scalar field on the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &GridSpec, value: f64) -> Self {
        ScalarField {
            nx: grid.nx,
            ny: grid.ny,
            data: vec![value; grid.cells()],
        }
    }

    pub fn from_vec(grid: &GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.cells() {
            return Err(Error::Mismatch(format!(
                "field has {} values, grid has {} cells",
                data.len(),
                grid.cells()
            )));
        }
        Ok(ScalarField {
            nx: grid.nx,
            ny: grid.ny,
            data,
        })
    }

    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.cells());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                data.push(f(ix, iy));
            }
        }
        ScalarField {
            nx: grid.nx,
            ny: grid.ny,
            data,
        }
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[ix + self.nx * iy]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        self.data[ix + self.nx * iy] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn same_shape(&self, other: &ScalarField) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }
}

/// Boolean mask on the pixel grid (same layout as [`ScalarField`]).
pub type Mask = Vec<bool>;

/// Equispaced directions on the unit circle with equal weights `2*pi/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularQuadrature {
    pub directions: Vec<(f64, f64)>,
    pub weight: f64,
}

impl AngularQuadrature {
    pub fn n_dirs(&self) -> usize {
        self.directions.len()
    }

    /// Index of the direction opposite to `k`.
    pub fn opposite(&self, k: usize) -> usize {
        (k + self.n_dirs() / 2) % self.n_dirs()
    }

    /// Index of the direction equal to `dir` (to 1e-12), if any.
    pub fn find(&self, dir: (f64, f64)) -> Option<usize> {
        self.directions
            .iter()
            .position(|d| (d.0 - dir.0).abs() < 1e-12 && (d.1 - dir.1).abs() < 1e-12)
    }
}

pub fn make_quadrature(n_dirs: usize) -> Result<AngularQuadrature> {
    if n_dirs < 4 || n_dirs % 2 != 0 {
        return Err(Error::Quadrature(format!(
            "direction count must be even and >= 4, got {n_dirs}"
        )));
    }
    let n = n_dirs as f64;
    let directions = (0..n_dirs)
        .map(|k| {
            let ang = 2.0 * PI * k as f64 / n;
            // snap the axis directions so that sources along +-x / +-y are exact
            let (mut c, mut s) = (ang.cos(), ang.sin());
            for v in [&mut c, &mut s] {
                if v.abs() < 1e-15 {
                    *v = 0.0;
                }
            }
            (c, s)
        })
        .collect();
    Ok(AngularQuadrature {
        directions,
        weight: 2.0 * PI / n,
    })
}

/// Recorded time sampling plus internal sub-stepping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    /// Recorded step in s.
    pub dt_rec: f64,
    /// Number of recorded steps; recorded step `m` (1-based) sits at `t = m * dt_rec`.
    pub n_rec: usize,
    /// Internal substeps per recorded step.
    pub substeps: usize,
    /// Particle speed in cm/s.
    #[serde(default = "default_speed")]
    pub c: f64,
}

fn default_speed() -> f64 {
    1.0
}

impl TimeGrid {
    pub fn dt_sub(&self) -> f64 {
        self.dt_rec / self.substeps as f64
    }

    /// Total number of internal substeps.
    pub fn n_sub(&self) -> usize {
        self.n_rec * self.substeps
    }

    pub fn t_rec(&self, m: usize) -> f64 {
        m as f64 * self.dt_rec
    }

    pub fn horizon(&self) -> f64 {
        self.t_rec(self.n_rec)
    }

    /// Advection Courant number `c * dt_sub / dx`.
    pub fn courant(&self, grid: &GridSpec) -> f64 {
        self.c * self.dt_sub() / grid.dx
    }

    /// Checks the monotonicity bound of the explicit stage:
    /// `courant * max_k(|cos| + |sin|) + c * dt_sub * a_max <= 1`.
    pub fn check_cfl(&self, grid: &GridSpec, quad: &AngularQuadrature, a_max: f64) -> Result<()> {
        if self.substeps == 0 || self.n_rec == 0 || !(self.dt_rec > 0.0) || !(self.c > 0.0) {
            return Err(Error::Cfl(format!("degenerate time grid {self:?}")));
        }
        let spread = quad
            .directions
            .iter()
            .map(|d| d.0.abs() + d.1.abs())
            .fold(0.0, f64::max);
        let nu = self.courant(grid);
        let bound = nu * spread + self.c * self.dt_sub() * a_max;
        if bound > 1.0 + 1e-12 {
            return Err(Error::Cfl(format!(
                "explicit stage bound {bound:.4} > 1 (courant {nu:.4}, substeps {}); increase substeps",
                self.substeps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub fn normal(self) -> (f64, f64) {
        match self {
            Side::Left => (-1.0, 0.0),
            Side::Right => (1.0, 0.0),
            Side::Bottom => (0.0, -1.0),
            Side::Top => (0.0, 1.0),
        }
    }

    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPixel {
    pub ix: usize,
    pub iy: usize,
    pub side: Side,
    pub normal: (f64, f64),
    /// Arc-length coordinate (cm) of the pixel center projected on its side.
    pub arc: f64,
}

/// Boundary pixels ordered counter-clockwise starting at the lower-left corner.
///
/// Corner pixels are assigned to exactly one side with priority left, right,
/// bottom, top. The arc coordinate of a pixel is the perimeter position of its
/// center projected onto its assigned side, so arc coordinates of the corner
/// pixels sit half a pixel from the geometric corner on the left/right sides.
/// The perimeter length is `2 (nx + ny) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGeometry {
    pub pixels: Vec<BoundaryPixel>,
    pub perimeter: f64,
    /// Every outer face (cell index, outward normal), including the second face of corners.
    pub faces: Vec<(usize, (f64, f64))>,
}

impl BoundaryGeometry {
    pub fn arc_distance(&self, s1: f64, s2: f64) -> f64 {
        let d = (s1 - s2).abs() % self.perimeter;
        d.min(self.perimeter - d)
    }

    pub fn pixels_on(&self, side: Side) -> impl Iterator<Item = &BoundaryPixel> {
        self.pixels.iter().filter(move |p| p.side == side)
    }

    /// Position of `(ix, iy)` in `pixels`, if it is a boundary pixel.
    pub fn find(&self, ix: usize, iy: usize) -> Option<usize> {
        self.pixels.iter().position(|p| p.ix == ix && p.iy == iy)
    }
}

pub fn build_boundary(grid: &GridSpec) -> BoundaryGeometry {
    let (nx, ny, dx) = (grid.nx, grid.ny, grid.dx);
    let (lx, ly) = (grid.width(), grid.height());
    let mut pixels = Vec::with_capacity(2 * (nx + ny) - 4);
    let mut push = |ix, iy, side: Side, arc| {
        pixels.push(BoundaryPixel {
            ix,
            iy,
            side,
            normal: side.normal(),
            arc,
        })
    };
    for ix in 1..nx - 1 {
        push(ix, 0, Side::Bottom, (ix as f64 + 0.5) * dx);
    }
    for iy in 0..ny {
        push(nx - 1, iy, Side::Right, lx + (iy as f64 + 0.5) * dx);
    }
    for ix in (1..nx - 1).rev() {
        push(ix, ny - 1, Side::Top, lx + ly + (lx - (ix as f64 + 0.5) * dx));
    }
    for iy in (0..ny).rev() {
        push(0, iy, Side::Left, 2.0 * lx + ly + (ly - (iy as f64 + 0.5) * dx));
    }

    let mut faces = Vec::with_capacity(2 * (nx + ny));
    for iy in 0..ny {
        faces.push((grid.idx(0, iy), Side::Left.normal()));
        faces.push((grid.idx(nx - 1, iy), Side::Right.normal()));
    }
    for ix in 0..nx {
        faces.push((grid.idx(ix, 0), Side::Bottom.normal()));
        faces.push((grid.idx(ix, ny - 1), Side::Top.normal()));
    }

    BoundaryGeometry {
        pixels,
        perimeter: 2.0 * (lx + ly),
        faces,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optical {
    /// Absorption cross-section in 1/cm.
    pub a: f64,
    /// Scattering cross-section in 1/cm.
    pub b: f64,
}

/// Rectangular clear ring at a fixed pixel depth below the domain edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearLayer {
    /// Pixels between the domain edge and the ring (default 5).
    #[serde(default = "default_layer_offset")]
    pub offset_px: usize,
    /// Ring thickness in pixels (default 3).
    #[serde(default = "default_layer_thickness")]
    pub thickness_px: usize,
}

fn default_layer_offset() -> usize {
    5
}

fn default_layer_thickness() -> usize {
    3
}

impl Default for ClearLayer {
    fn default() -> Self {
        ClearLayer {
            offset_px: default_layer_offset(),
            thickness_px: default_layer_thickness(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disc {
    /// Center in cm.
    pub center: [f64; 2],
    /// Radius in cm.
    pub radius: f64,
}

impl Disc {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (p.0 - self.center[0], p.1 - self.center[1]);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    /// Absorption inside the obstacle in 1/cm; scattering stays at background.
    pub a: f64,
}

impl Obstacle {
    pub fn disc(&self) -> Disc {
        Disc {
            center: self.center,
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub background: Optical,
    /// Optical values inside clear regions.
    #[serde(default = "default_clear")]
    pub clear: Optical,
    #[serde(default)]
    pub clear_layer: Option<ClearLayer>,
    #[serde(default)]
    pub clear_discs: Vec<Disc>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

fn default_clear() -> Optical {
    Optical { a: 0.01, b: 0.01 }
}

impl PhantomSpec {
    pub fn homogeneous(a: f64, b: f64) -> Self {
        PhantomSpec {
            background: Optical { a, b },
            clear: default_clear(),
            clear_layer: None,
            clear_discs: Vec::new(),
            obstacles: Vec::new(),
        }
    }

    /// The same phantom with all obstacles removed (the known background).
    pub fn without_obstacles(&self) -> Self {
        PhantomSpec {
            obstacles: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.background.a) || !pos(self.background.b) {
            return Err(Error::Phantom("background a and b must be positive".into()));
        }
        if !pos(self.clear.a) || !pos(self.clear.b) {
            return Err(Error::Phantom("clear-region a and b must be positive".into()));
        }
        if let Some(layer) = &self.clear_layer {
            if layer.thickness_px == 0 {
                return Err(Error::Phantom("clear layer thickness must be >= 1".into()));
            }
        }
        for d in &self.clear_discs {
            if !(d.radius >= 0.0) {
                return Err(Error::Phantom(format!("negative clear disc radius {}", d.radius)));
            }
        }
        for o in &self.obstacles {
            if !(o.radius >= 0.0) {
                return Err(Error::Phantom(format!("negative obstacle radius {}", o.radius)));
            }
            if !pos(o.a) {
                return Err(Error::Phantom(format!("obstacle absorption must be positive, got {}", o.a)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediumFields {
    pub grid: GridSpec,
    pub a: ScalarField,
    pub b: ScalarField,
    pub clear_mask: Mask,
    /// Cells excluded from inversion updates; always contains `clear_mask`.
    pub frozen_mask: Mask,
}

impl MediumFields {
    /// Builds a medium from explicit fields. `a = 0` is accepted here so that
    /// purely scattering (conservative) media can be set up directly.
    pub fn new(grid: GridSpec, a: ScalarField, b: ScalarField, clear_mask: Mask, frozen_mask: Mask) -> Result<Self> {
        let n = grid.cells();
        if a.data.len() != n || b.data.len() != n || clear_mask.len() != n || frozen_mask.len() != n {
            return Err(Error::Mismatch("medium field sizes differ from grid".into()));
        }
        if a.data.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Phantom("absorption must be finite and >= 0".into()));
        }
        if b.data.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Phantom("scattering must be finite and >= 0".into()));
        }
        if clear_mask.iter().zip(&frozen_mask).any(|(c, f)| *c && !*f) {
            return Err(Error::Phantom("frozen mask must contain the clear mask".into()));
        }
        Ok(MediumFields {
            grid,
            a,
            b,
            clear_mask,
            frozen_mask,
        })
    }

    pub fn homogeneous(grid: GridSpec, a: f64, b: f64) -> Result<Self> {
        let n = grid.cells();
        Self::new(
            grid,
            ScalarField::constant(&grid, a),
            ScalarField::constant(&grid, b),
            vec![false; n],
            vec![false; n],
        )
    }

    /// The same medium with a different absorption field.
    pub fn with_absorption(&self, a: ScalarField) -> Result<Self> {
        Self::new(self.grid, a, self.b.clone(), self.clear_mask.clone(), self.frozen_mask.clone())
    }

    pub fn a_max(&self) -> f64 {
        self.a.max()
    }
}

/// Paints background, clear layer, clear discs and obstacles in that order.
/// Membership is decided by the pixel center; `frozen_mask = clear_mask`.
pub fn build_phantom(spec: &PhantomSpec, grid: &GridSpec) -> Result<MediumFields> {
    grid.validate()?;
    spec.validate()?;
    let n = grid.cells();
    let mut a = ScalarField::constant(grid, spec.background.a);
    let mut b = ScalarField::constant(grid, spec.background.b);
    let mut clear = vec![false; n];

    if let Some(layer) = &spec.clear_layer {
        let (lo, hi) = (layer.offset_px, layer.offset_px + layer.thickness_px);
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let d = grid.edge_depth(ix, iy);
                if d >= lo && d < hi {
                    clear[grid.idx(ix, iy)] = true;
                }
            }
        }
    }
    for disc in &spec.clear_discs {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                if disc.contains(grid.center(ix, iy)) {
                    clear[grid.idx(ix, iy)] = true;
                }
            }
        }
    }
    for (i, &c) in clear.iter().enumerate() {
        if c {
            a.data[i] = spec.clear.a;
            b.data[i] = spec.clear.b;
        }
    }
    for (k, ob) in spec.obstacles.iter().enumerate() {
        let disc = ob.disc();
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                if disc.contains(grid.center(ix, iy)) {
                    let i = grid.idx(ix, iy);
                    if clear[i] {
                        return Err(Error::Phantom(format!(
                            "obstacle {k} overlaps a clear region at pixel ({ix}, {iy})"
                        )));
                    }
                    a.data[i] = ob.a;
                }
            }
        }
    }
    let frozen = clear.clone();
    MediumFields::new(*grid, a, b, clear, frozen)
}

/// Pixel-center rasterization of the obstacle discs (the true shape mask).
pub fn obstacle_mask(spec: &PhantomSpec, grid: &GridSpec) -> Mask {
    let mut mask = vec![false; grid.cells()];
    for ob in &spec.obstacles {
        let disc = ob.disc();
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                if disc.contains(grid.center(ix, iy)) {
                    mask[grid.idx(ix, iy)] = true;
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quadrature_twelve_directions() {
        let q = make_quadrature(12).unwrap();
        assert_eq!(q.directions[0], (1.0, 0.0));
        assert_eq!(q.directions[3], (0.0, 1.0));
        assert!((q.weight - PI / 6.0).abs() < 1e-15);
        for k in 0..12 {
            let (a, b) = (q.directions[k], q.directions[(k + 6) % 12]);
            assert!((a.0 + b.0).abs() < 1e-15 && (a.1 + b.1).abs() < 1e-15);
            assert!(((a.0 * a.0 + a.1 * a.1).sqrt() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quadrature_four_directions_close() {
        let q = make_quadrature(4).unwrap();
        assert_eq!(q.directions, vec![(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]);
        let total: f64 = q.directions.iter().map(|_| q.weight).sum();
        assert!((total - 2.0 * PI).abs() < 1e-14);
    }

    #[test]
    fn quadrature_rejects_odd_and_small() {
        assert!(make_quadrature(3).is_err());
        assert!(make_quadrature(7).is_err());
        assert!(make_quadrature(2).is_err());
    }

    #[test]
    fn boundary_counts_and_normals() {
        let g = GridSpec::new(50, 50, 0.1).unwrap();
        assert_eq!(build_boundary(&g).pixels.len(), 196);
        let g4 = GridSpec::new(4, 4, 1.0).unwrap();
        let b = build_boundary(&g4);
        assert_eq!(b.pixels.len(), 12);
        let p = b.pixels.iter().find(|p| p.ix == 0 && p.iy == 2).unwrap();
        assert_eq!(p.normal, (-1.0, 0.0));
        // corner priority: left before bottom, right before top
        let c = b.pixels.iter().find(|p| p.ix == 0 && p.iy == 0).unwrap();
        assert_eq!(c.side, Side::Left);
        let c = b.pixels.iter().find(|p| p.ix == 3 && p.iy == 3).unwrap();
        assert_eq!(c.side, Side::Right);
        assert!((b.perimeter - 16.0).abs() < 1e-15);
        assert_eq!(b.faces.len(), 16);
    }

    #[test]
    fn homogeneous_phantom() {
        let g = GridSpec::new(10, 10, 0.1).unwrap();
        let m = build_phantom(&PhantomSpec::homogeneous(0.1, 100.0), &g).unwrap();
        assert!(m.a.data.iter().all(|&v| v == 0.1));
        assert!(m.b.data.iter().all(|&v| v == 100.0));
        assert!(m.clear_mask.iter().all(|&c| !c));
    }

    #[test]
    fn clear_layer_values_and_frozen() {
        let g = GridSpec::new(20, 20, 0.1).unwrap();
        let mut spec = PhantomSpec::homogeneous(0.1, 100.0);
        spec.clear_layer = Some(ClearLayer::default());
        let m = build_phantom(&spec, &g).unwrap();
        for i in 0..g.cells() {
            let (ix, iy) = g.coords(i);
            let d = g.edge_depth(ix, iy);
            let inside = (5..8).contains(&d);
            assert_eq!(m.clear_mask[i], inside);
            if inside {
                assert_eq!((m.a.data[i], m.b.data[i]), (0.01, 0.01));
            }
        }
        assert_eq!(m.frozen_mask, m.clear_mask);
        assert!(m.a.min() > 0.0 && m.b.min() > 0.0);
    }

    #[test]
    fn zero_radius_disc_is_noop() {
        let g = GridSpec::new(10, 10, 0.1).unwrap();
        let mut spec = PhantomSpec::homogeneous(0.1, 100.0);
        let base = build_phantom(&spec, &g).unwrap();
        spec.obstacles.push(Obstacle { center: [0.33, 0.41], radius: 0.0, a: 0.5 });
        spec.clear_discs.push(Disc { center: [0.72, 0.61], radius: 0.0 });
        assert_eq!(build_phantom(&spec, &g).unwrap(), base);
    }

    #[test]
    fn obstacle_over_clear_region_rejected() {
        let g = GridSpec::new(20, 20, 0.1).unwrap();
        let mut spec = PhantomSpec::homogeneous(0.1, 100.0);
        spec.clear_discs.push(Disc { center: [1.0, 1.0], radius: 0.3 });
        spec.obstacles.push(Obstacle { center: [1.2, 1.0], radius: 0.3, a: 0.5 });
        assert!(matches!(build_phantom(&spec, &g), Err(Error::Phantom(_))));
    }

    #[test]
    fn cfl_check() {
        let g = GridSpec::new(50, 50, 0.1).unwrap();
        let q = make_quadrature(12).unwrap();
        let tg = TimeGrid { dt_rec: 0.2, n_rec: 100, substeps: 4, c: 1.0 };
        assert!((tg.courant(&g) - 0.5).abs() < 1e-15);
        tg.check_cfl(&g, &q, 2.0).unwrap();
        let bad = TimeGrid { substeps: 1, ..tg };
        assert!(matches!(bad.check_cfl(&g, &q, 0.1), Err(Error::Cfl(_))));
    }

    proptest! {
        #[test]
        fn boundary_count_formula(nx in 4usize..=128, ny in 4usize..=128) {
            let g = GridSpec::new(nx, ny, 0.1).unwrap();
            let b = build_boundary(&g);
            prop_assert_eq!(b.pixels.len(), 2 * (nx + ny) - 4);
            for w in b.pixels.windows(2) {
                prop_assert!(w[1].arc > w[0].arc);
            }
            prop_assert!(b.pixels.last().unwrap().arc < b.perimeter);
        }
    }
}
