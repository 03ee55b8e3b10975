//! Fixed Cartesian mesh, tensor-product quadrature and assembly of
//! element-averaged densities with gradients and Hessians over the full
//! design vector.
//!
//! Every element is sampled on a uniform `q x q` point grid with equal
//! weights; the element density is the plain arithmetic mean of the
//! aggregated per-point values, so differentiation commutes with the
//! averaging. With a positive pad the *evaluation* window is extended by
//! whole elements beyond the design domain while design bounds stay on the
//! unpadded rectangle.

use crate::aggregation::{self, AggregatorSpec};
use crate::geometry::{PillParams, Point2, PILL_PARAMS};
use crate::jet::ScalarJet;
use crate::transition::{self, DensityJet, TransitionSpec};
use crate::{Error, Result};

/// Maximum supported tensor quadrature order per axis.
pub const MAX_QUAD_ORDER: usize = 8;

/// Relative nudge applied to quadrature points that land exactly on a
/// pill's supporting line, where the segment-branch derivatives are
/// undefined.
const SINGULAR_NUDGE: f64 = 1e-9;

/// Uniform rectangular mesh with an optional padded evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Element counts of the design domain.
    pub nx: usize,
    pub ny: usize,
    /// Lower-left corner of the design domain.
    pub x0: f64,
    pub y0: f64,
    /// Side lengths of the design domain.
    pub lx: f64,
    pub ly: f64,
    /// Evaluation-window extension beyond the domain (length units).
    pub pad: f64,
    /// Tensor quadrature order per axis.
    pub quad_order: usize,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, x0: f64, y0: f64, lx: f64, ly: f64) -> Result<Self> {
        let grid = GridSpec {
            nx,
            ny,
            x0,
            y0,
            lx,
            ly,
            pad: 0.0,
            quad_order: 3,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit-square grid, handy for single-pill studies.
    pub fn unit(nx: usize, ny: usize) -> Self {
        GridSpec::new(nx, ny, 0.0, 0.0, 1.0, 1.0).unwrap()
    }

    pub fn with_pad(mut self, pad: f64) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_quad_order(mut self, q: usize) -> Self {
        self.quad_order = q;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidConfig("grid needs nx, ny >= 1".into()));
        }
        if !(self.lx > 0.0 && self.ly > 0.0) {
            return Err(Error::InvalidConfig("grid domain side lengths must be > 0".into()));
        }
        if self.pad < 0.0 {
            return Err(Error::InvalidConfig("grid pad must be >= 0".into()));
        }
        if self.quad_order == 0 || self.quad_order > MAX_QUAD_ORDER {
            return Err(Error::InvalidConfig(format!(
                "quadrature order {} outside 1..={MAX_QUAD_ORDER}",
                self.quad_order
            )));
        }
        Ok(())
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    /// Cell area of one element.
    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    /// Whole elements of padding per side along each axis.
    pub fn pad_cells(&self) -> (usize, usize) {
        if self.pad == 0.0 {
            return (0, 0);
        }
        (
            (self.pad / self.hx()).ceil() as usize,
            (self.pad / self.hy()).ceil() as usize,
        )
    }

    /// Element counts of the padded evaluation window.
    pub fn eval_dims(&self) -> (usize, usize) {
        let (px, py) = self.pad_cells();
        (self.nx + 2 * px, self.ny + 2 * py)
    }

    /// Lower-left corner of evaluation element `(ix, iy)` in window
    /// coordinates (0 <= ix < eval nx).
    fn eval_element_origin(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (px, py) = self.pad_cells();
        (
            self.x0 + (ix as f64 - px as f64) * self.hx(),
            self.y0 + (iy as f64 - py as f64) * self.hy(),
        )
    }

    /// Maps an evaluation-window element to the design-domain element index
    /// when it lies inside the unpadded domain.
    pub(crate) fn eval_to_core(&self, ix: usize, iy: usize) -> Option<(usize, usize)> {
        let (px, py) = self.pad_cells();
        let cx = ix.checked_sub(px)?;
        let cy = iy.checked_sub(py)?;
        (cx < self.nx && cy < self.ny).then_some((cx, cy))
    }
}

/// Per-element scalar field on the unpadded grid. Row-major with row 0 at
/// the bottom of the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementField {
    values: Vec<f64>,
    nx: usize,
    ny: usize,
}

impl ElementField {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        ElementField {
            values: vec![0.0; nx * ny],
            nx,
            ny,
        }
    }

    pub fn from_values(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(Error::GridMismatch(format!(
                "field with {} values does not fit {nx} x {ny} elements",
                values.len()
            )));
        }
        Ok(ElementField { values, nx, ny })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        self.values[iy * self.nx + ix] = v;
    }

    pub fn max_abs_diff(&self, other: &ElementField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// The full design vector: `n` pills in fixed block order plus per-pill
/// frozen-radius flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVector {
    pub pills: Vec<PillParams>,
    pub radius_frozen: Vec<bool>,
}

impl DesignVector {
    pub fn new(pills: Vec<PillParams>) -> Self {
        let n = pills.len();
        DesignVector {
            pills,
            radius_frozen: vec![false; n],
        }
    }

    pub fn empty() -> Self {
        DesignVector {
            pills: Vec::new(),
            radius_frozen: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.pills.len()
    }

    pub fn n_params(&self) -> usize {
        PILL_PARAMS * self.pills.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in &self.pills {
            out.extend_from_slice(&p.params());
        }
        out
    }

    /// Rebuilds the pills from a flat parameter vector, keeping the frozen
    /// flags. Trial points are not validated.
    pub fn set_flat(&mut self, z: &[f64]) {
        assert_eq!(z.len(), self.n_params());
        for (i, p) in self.pills.iter_mut().enumerate() {
            let mut block = [0.0; PILL_PARAMS];
            block.copy_from_slice(&z[i * PILL_PARAMS..(i + 1) * PILL_PARAMS]);
            *p = PillParams::from_params(block);
        }
    }

    /// Copy with every radius inflated by `ext`. Evaluation-side only: the
    /// derivative chain is unchanged because the shift is constant in the
    /// design variables.
    pub fn inflated(&self, ext: f64) -> DesignVector {
        if ext == 0.0 {
            return self.clone();
        }
        DesignVector {
            pills: self
                .pills
                .iter()
                .map(|p| p.with_radius(p.r + ext))
                .collect(),
            radius_frozen: self.radius_frozen.clone(),
        }
    }

    pub fn push(&mut self, pill: PillParams, frozen: bool) {
        self.pills.push(pill);
        self.radius_frozen.push(frozen);
    }
}

/// Quadrature points of element `e` (row-major, bottom row first) for a
/// `q x q` tensor rule: the element center for q = 1, a corner-inclusive
/// uniform lattice otherwise. All points carry the equal weight `1/q^2`.
pub fn quad_points(grid: &GridSpec, e: usize, q: usize) -> Result<Vec<Point2>> {
    if q == 0 || q > MAX_QUAD_ORDER {
        return Err(Error::InvalidConfig(format!(
            "quadrature order {q} outside 1..={MAX_QUAD_ORDER}"
        )));
    }
    if e >= grid.n_elements() {
        return Err(Error::IndexOutOfRange(format!(
            "element {e} outside grid with {} elements",
            grid.n_elements()
        )));
    }
    let (ix, iy) = (e % grid.nx, e / grid.nx);
    let (ox, oy) = (
        grid.x0 + ix as f64 * grid.hx(),
        grid.y0 + iy as f64 * grid.hy(),
    );
    let mut pts = Vec::with_capacity(q * q);
    push_cell_points(&mut pts, ox, oy, grid.hx(), grid.hy(), q);
    Ok(pts)
}

fn push_cell_points(pts: &mut Vec<Point2>, ox: f64, oy: f64, hx: f64, hy: f64, q: usize) {
    if q == 1 {
        pts.push(Point2::new(ox + 0.5 * hx, oy + 0.5 * hy));
        return;
    }
    for j in 0..q {
        let fy = j as f64 / (q - 1) as f64;
        for i in 0..q {
            let fx = i as f64 / (q - 1) as f64;
            pts.push(Point2::new(ox + fx * hx, oy + fy * hy));
        }
    }
}

/// What an element evaluation has to produce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum EvalMode {
    Value,
    Grad,
    Full,
}

/// Scratch space reused across element evaluations.
#[derive(Debug, Default)]
pub(crate) struct ElementScratch {
    /// Per-point density rows, `n` entries each.
    rho: Vec<f64>,
    /// In-band jets collected in the first pass: (point, pill, jet).
    jets: Vec<(u32, u32, DensityJet)>,
    pts: Vec<Point2>,
    /// Output: element value.
    pub value: f64,
    /// Output: pills with any sensitivity in this element, ascending.
    pub active: Vec<usize>,
    /// Output: per active pill, the 5-gradient of the element average.
    pub grad: Vec<[f64; PILL_PARAMS]>,
    /// Output: upper-triangular active-pair blocks of the element Hessian,
    /// indexed by [`pair_index`].
    pub hess: Vec<[[f64; PILL_PARAMS]; PILL_PARAMS]>,
    slot_of: Vec<i32>,
}

/// Index of the (i, j) block, i <= j, in a k-block upper triangle.
pub(crate) fn pair_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < k);
    i * (2 * k - i + 1) / 2 + (j - i)
}

impl ElementScratch {
    pub(crate) fn new() -> Self {
        Self::default()
    }
}

fn density_value(tspec: &TransitionSpec, pill: &PillParams, x: Point2) -> Result<f64> {
    transition::pseudo_density(tspec, pill, x)
}

/// Evaluates one pill's density jet with the singular-point nudge: points
/// exactly on a supporting line are shifted along +y by a hair before the
/// derivatives are taken.
fn density_jet_nudged(
    tspec: &TransitionSpec,
    pill: &PillParams,
    x: Point2,
    nudge: f64,
) -> Result<DensityJet> {
    let jet = transition::pseudo_density_jet(tspec, pill, x)?;
    if !jet.singular {
        return Ok(jet);
    }
    transition::pseudo_density_jet(tspec, pill, Point2::new(x.x, x.y + nudge))
}

/// Core element evaluation: fills `scratch` with the mean aggregate and, per
/// mode, its active-pill gradients and Hessian blocks.
pub(crate) fn eval_element_into(
    scratch: &mut ElementScratch,
    design: &DesignVector,
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    origin: (f64, f64),
    h: (f64, f64),
    q: usize,
    mode: EvalMode,
) -> Result<()> {
    let n = design.n();
    let npts = q * q;
    let nudge = SINGULAR_NUDGE * h.0.min(h.1);

    scratch.pts.clear();
    push_cell_points(&mut scratch.pts, origin.0, origin.1, h.0, h.1, q);
    scratch.rho.clear();
    scratch.rho.resize(n * npts, 0.0);
    scratch.jets.clear();
    scratch.value = 0.0;
    scratch.active.clear();
    scratch.grad.clear();
    scratch.hess.clear();
    if scratch.slot_of.len() < n {
        scratch.slot_of.resize(n, -1);
    }

    // First pass: densities everywhere, jets only inside a transition band.
    for (k, &x) in scratch.pts.iter().enumerate() {
        for (m, pill) in design.pills.iter().enumerate() {
            if mode == EvalMode::Value {
                scratch.rho[k * n + m] = density_value(tspec, pill, x)?;
                continue;
            }
            let d = crate::geometry::signed_distance(x, pill)?;
            let (lo, hi) = tspec.support();
            if d <= lo {
                scratch.rho[k * n + m] = 1.0;
            } else if d >= hi {
                scratch.rho[k * n + m] = 0.0;
            } else {
                let jet = density_jet_nudged(tspec, pill, x, nudge)?;
                scratch.rho[k * n + m] = jet.value;
                scratch.jets.push((k as u32, m as u32, jet));
            }
        }
    }

    // Element active set, ascending by pill index.
    for &(_, m, _) in &scratch.jets {
        let m = m as usize;
        if scratch.slot_of[m] < 0 {
            scratch.slot_of[m] = 0;
            scratch.active.push(m);
        }
    }
    scratch.active.sort_unstable();
    for (slot, &m) in scratch.active.iter().enumerate() {
        scratch.slot_of[m] = slot as i32;
    }
    let k_active = scratch.active.len();
    scratch.grad.resize(k_active, [0.0; PILL_PARAMS]);
    if mode == EvalMode::Full {
        scratch
            .hess
            .resize(k_active * (k_active + 1) / 2, [[0.0; PILL_PARAMS]; PILL_PARAMS]);
    }

    // Second pass: aggregate per point and chain through the partials.
    // Accumulate plain sums; the mean is taken once at the end so that a
    // constant aggregate stays bit-exact.
    let coupled = aspec.couples_features();
    let mut jet_cursor = 0usize;
    for k in 0..npts {
        let rho_k = &scratch.rho[k * n..(k + 1) * n];
        let start = jet_cursor;
        while jet_cursor < scratch.jets.len() && scratch.jets[jet_cursor].0 as usize == k {
            jet_cursor += 1;
        }
        let point_jets = &scratch.jets[start..jet_cursor];

        if mode == EvalMode::Value || point_jets.is_empty() {
            scratch.value += aggregation::aggregate_value(aspec, rho_k)?;
            continue;
        }
        let parts = aggregation::aggregate_partials(aspec, rho_k)?;
        scratch.value += parts.value;

        for (ai, &(_, ma, ref jet_a)) in point_jets.iter().enumerate() {
            let ma = ma as usize;
            let slot_a = scratch.slot_of[ma] as usize;
            let d1a = parts.d1[ma];
            let ga = &mut scratch.grad[slot_a];
            for i in 0..PILL_PARAMS {
                ga[i] += d1a * jet_a.grad[i];
            }
            if mode != EvalMode::Full {
                continue;
            }
            // Diagonal block: aggregation curvature plus the pill's own
            // density Hessian.
            {
                let d2aa = parts.d2[ma * n + ma];
                let block = &mut scratch.hess[pair_index(k_active, slot_a, slot_a)];
                for i in 0..PILL_PARAMS {
                    for j in 0..PILL_PARAMS {
                        block[i][j] +=
                            d2aa * jet_a.grad[i] * jet_a.grad[j] + d1a * jet_a.hess[i][j];
                    }
                }
            }
            if !coupled {
                continue;
            }
            for &(_, mb, ref jet_b) in &point_jets[ai + 1..] {
                let mb = mb as usize;
                let slot_b = scratch.slot_of[mb] as usize;
                let d2ab = parts.d2[ma * n + mb];
                if d2ab == 0.0 {
                    continue;
                }
                let (lo, hi, ja, jb) = if slot_a <= slot_b {
                    (slot_a, slot_b, jet_a, jet_b)
                } else {
                    (slot_b, slot_a, jet_b, jet_a)
                };
                let block = &mut scratch.hess[pair_index(k_active, lo, hi)];
                for i in 0..PILL_PARAMS {
                    for j in 0..PILL_PARAMS {
                        block[i][j] += d2ab * ja.grad[i] * jb.grad[j];
                    }
                }
            }
        }
    }

    let npts_f = npts as f64;
    scratch.value /= npts_f;
    for g in &mut scratch.grad {
        for v in g.iter_mut() {
            *v /= npts_f;
        }
    }
    for b in &mut scratch.hess {
        for row in b.iter_mut() {
            for v in row.iter_mut() {
                *v /= npts_f;
            }
        }
    }

    // Reset the slot table for the next element.
    for &m in &scratch.active {
        scratch.slot_of[m] = -1;
    }
    Ok(())
}

/// Element-averaged density of element `e` with gradient and Hessian over
/// the full design vector. The Hessian couples pills only through the
/// aggregation operator; for the linear sum all off-diagonal blocks are
/// exactly zero.
pub fn element_average_jet(
    design: &DesignVector,
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    grid: &GridSpec,
    e: usize,
) -> Result<ScalarJet> {
    grid.validate()?;
    if e >= grid.n_elements() {
        return Err(Error::IndexOutOfRange(format!(
            "element {e} outside grid with {} elements",
            grid.n_elements()
        )));
    }
    let (ix, iy) = (e % grid.nx, e / grid.nx);
    let origin = (
        grid.x0 + ix as f64 * grid.hx(),
        grid.y0 + iy as f64 * grid.hy(),
    );
    let mut scratch = ElementScratch::new();
    eval_element_into(
        &mut scratch,
        design,
        tspec,
        aspec,
        origin,
        (grid.hx(), grid.hy()),
        grid.quad_order,
        EvalMode::Full,
    )?;

    let np = design.n_params();
    let mut jet = ScalarJet::zeros(np);
    jet.value = scratch.value;
    let k = scratch.active.len();
    for (slot, &m) in scratch.active.iter().enumerate() {
        for i in 0..PILL_PARAMS {
            jet.grad[m * PILL_PARAMS + i] = scratch.grad[slot][i];
        }
    }
    for si in 0..k {
        for sj in si..k {
            let block = &scratch.hess[pair_index(k, si, sj)];
            let (ma, mb) = (scratch.active[si], scratch.active[sj]);
            for i in 0..PILL_PARAMS {
                for j in 0..PILL_PARAMS {
                    let (gi, gj) = (ma * PILL_PARAMS + i, mb * PILL_PARAMS + j);
                    if si == sj && j < i {
                        continue;
                    }
                    let v = if si == sj {
                        0.5 * (block[i][j] + block[j][i])
                    } else {
                        block[i][j]
                    };
                    jet.hess[gi * np + gj] = v;
                    jet.hess[gj * np + gi] = v;
                }
            }
        }
    }
    Ok(jet)
}

/// Projects the design onto the grid value-only: the visible density field.
pub fn project_field(
    design: &DesignVector,
    tspec: &TransitionSpec,
    aspec: &AggregatorSpec,
    grid: &GridSpec,
) -> Result<ElementField> {
    grid.validate()?;
    let mut field = ElementField::zeros(grid.nx, grid.ny);
    if design.n() == 0 {
        return Ok(field);
    }
    let mut scratch = ElementScratch::new();
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let origin = (
                grid.x0 + ix as f64 * grid.hx(),
                grid.y0 + iy as f64 * grid.hy(),
            );
            eval_element_into(
                &mut scratch,
                design,
                tspec,
                aspec,
                origin,
                (grid.hx(), grid.hy()),
                grid.quad_order,
                EvalMode::Value,
            )?;
            field.set(ix, iy, scratch.value);
        }
    }
    Ok(field)
}

/// Iterates the evaluation window (padded) element origins together with
/// the optional core-domain index. Used by the objectives.
pub(crate) fn eval_elements(grid: &GridSpec) -> Vec<((f64, f64), Option<usize>)> {
    let (enx, eny) = grid.eval_dims();
    let mut out = Vec::with_capacity(enx * eny);
    for iy in 0..eny {
        for ix in 0..enx {
            let origin = grid.eval_element_origin(ix, iy);
            let core = grid.eval_to_core(ix, iy).map(|(cx, cy)| cy * grid.nx + cx);
            out.push((origin, core));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::TransitionKind;

    fn tspec() -> TransitionSpec {
        TransitionSpec::default_smoothstep()
    }

    #[test]
    fn quad_points_midpoint_vertices_tensor() {
        let grid = GridSpec::unit(1, 1);
        let pts = quad_points(&grid, 0, 1).unwrap();
        assert_eq!(pts, vec![Point2::new(0.5, 0.5)]);

        let pts = quad_points(&grid, 0, 2).unwrap();
        assert_eq!(
            pts,
            vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 0.0),
                Point2::new(0.0, 1.0),
                Point2::new(1.0, 1.0),
            ]
        );

        let pts = quad_points(&grid, 0, 3).unwrap();
        assert_eq!(pts.len(), 9);
        assert!(pts.contains(&Point2::new(0.5, 0.5)));
        assert!(pts.contains(&Point2::new(0.0, 1.0)));
        assert!(pts.contains(&Point2::new(0.5, 0.0)));
    }

    #[test]
    fn quad_points_bad_index() {
        let grid = GridSpec::unit(2, 2);
        assert!(quad_points(&grid, 4, 3).is_err());
        assert!(quad_points(&grid, 0, 9).is_err());
    }

    #[test]
    fn covered_element_is_plateau() {
        let grid = GridSpec::unit(10, 10);
        let pill = PillParams::new(0.1, 0.5, 0.9, 0.5, 0.3).unwrap();
        let design = DesignVector::new(vec![pill]);
        // Element at the segment center, fully inside d <= -delta.
        let e = 5 * 10 + 5;
        let jet = element_average_jet(&design, &tspec(), &AggregatorSpec::Sum, &grid, e).unwrap();
        assert_eq!(jet.value, 1.0);
        assert!(jet.grad.iter().all(|&g| g == 0.0));
        assert!(jet.hess.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn empty_reach_element_is_zero() {
        let grid = GridSpec::unit(10, 10);
        let pill = PillParams::new(0.1, 0.1, 0.3, 0.1, 0.05).unwrap();
        let design = DesignVector::new(vec![pill]);
        let e = 9 * 10 + 9;
        let jet = element_average_jet(&design, &tspec(), &AggregatorSpec::Sum, &grid, e).unwrap();
        assert_eq!(jet.value, 0.0);
    }

    #[test]
    fn empty_design_projects_to_zero() {
        let grid = GridSpec::unit(4, 4);
        let field = project_field(&DesignVector::empty(), &tspec(), &AggregatorSpec::Sum, &grid)
            .unwrap();
        assert!(field.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn element_value_is_mean_of_points() {
        let grid = GridSpec::unit(8, 8).with_quad_order(3);
        let pill = PillParams::new(0.2, 0.3, 0.8, 0.6, 0.12).unwrap();
        let design = DesignVector::new(vec![pill]);
        let spec = tspec();
        for e in [0usize, 27, 44, 63] {
            let jet =
                element_average_jet(&design, &spec, &AggregatorSpec::Sum, &grid, e).unwrap();
            let pts = quad_points(&grid, e, 3).unwrap();
            let mean: f64 = pts
                .iter()
                .map(|&x| {
                    let rho = transition::pseudo_density(&spec, &design.pills[0], x).unwrap();
                    aggregation::aggregate_value(&AggregatorSpec::Sum, &[rho]).unwrap()
                })
                .sum::<f64>()
                / pts.len() as f64;
            assert!((jet.value - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn sum_aggregation_keeps_cross_blocks_zero() {
        let grid = GridSpec::unit(6, 6).with_quad_order(3);
        // Two crossing pills whose transition bands overlap.
        let design = DesignVector::new(vec![
            PillParams::new(0.2, 0.3, 0.8, 0.7, 0.1).unwrap(),
            PillParams::new(0.2, 0.7, 0.8, 0.3, 0.1).unwrap(),
        ]);
        let spec = tspec();
        for e in 0..grid.n_elements() {
            let jet = element_average_jet(&design, &spec, &AggregatorSpec::Sum, &grid, e).unwrap();
            let block = jet.hess_block(0, 1);
            assert!(block.iter().flatten().all(|&v| v == 0.0));
        }
        // A coupling aggregator does produce cross blocks somewhere.
        let mut coupled = 0;
        for e in 0..grid.n_elements() {
            let jet = element_average_jet(
                &design,
                &spec,
                &AggregatorSpec::Softmax { beta: 10.0 },
                &grid,
                e,
            )
            .unwrap();
            if jet.hess_block(0, 1).iter().flatten().any(|&v| v != 0.0) {
                coupled += 1;
            }
        }
        assert!(coupled > 0);
    }

    #[test]
    fn constant_aggregate_gives_constant_field() {
        // With no pill in reach every point aggregates to the same value.
        let grid = GridSpec::unit(5, 5);
        let pill = PillParams::new(3.0, 3.0, 4.0, 3.0, 0.05).unwrap();
        let design = DesignVector::new(vec![pill]);
        let field = project_field(&design, &tspec(), &AggregatorSpec::Sum, &grid).unwrap();
        assert!(field.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadrature_refinement_consistency() {
        // The equal-weight tensor rule converges at second order in the
        // in-element sample spacing, so the q = 3 and q = 5 fields approach
        // each other as the transition band is resolved. The 1e-3 agreement
        // needs roughly ten elements per half-width with this rule.
        let tspec =
            TransitionSpec::new(TransitionKind::Smoothstep { k: 3 }, 0.05).unwrap();
        let design = DesignVector::new(vec![
            PillParams::new(0.2, 0.25, 0.85, 0.7, 0.15).unwrap(),
            PillParams::new(0.15, 0.8, 0.7, 0.2, 0.1).unwrap(),
        ]);
        let diff_at = |n: usize| {
            let g3 = GridSpec::unit(n, n).with_quad_order(3);
            let g5 = GridSpec::unit(n, n).with_quad_order(5);
            let f3 = project_field(&design, &tspec, &AggregatorSpec::Sum, &g3).unwrap();
            let f5 = project_field(&design, &tspec, &AggregatorSpec::Sum, &g5).unwrap();
            f3.max_abs_diff(&f5)
        };
        let coarse = diff_at(100);
        let fine = diff_at(200);
        assert!(fine < 1e-3, "q3 vs q5 max diff {fine} at delta = 10 h");
        assert!(
            fine < 0.35 * coarse,
            "expected second-order shrink, got {coarse} -> {fine}"
        );
    }

    #[test]
    fn projected_mass_matches_capsule_area() {
        // Mass oracle: interior plateau area plus the transition fringe via
        // 1D quadrature over offset-capsule perimeters.
        let delta = 0.02;
        let tspec = TransitionSpec::new(TransitionKind::Smoothstep { k: 3 }, delta).unwrap();
        let pill = PillParams::new(0.3, 0.35, 0.7, 0.65, 0.1).unwrap();
        let design = DesignVector::new(vec![pill]);
        let grid = GridSpec::unit(200, 200).with_quad_order(3);
        let field = project_field(&design, &tspec, &AggregatorSpec::Sum, &grid).unwrap();
        let mass: f64 = field.values().iter().sum::<f64>() * grid.cell_area();

        let len = pill.length();
        let r = pill.r;
        let interior = 2.0 * (r - delta) * len + std::f64::consts::PI * (r - delta).powi(2);
        // Simpson rule over the band: integrand phi(t) * perimeter(r + t).
        let steps = 2000;
        let h = 2.0 * delta / steps as f64;
        let mut band = 0.0;
        for i in 0..=steps {
            let t = -delta + i as f64 * h;
            let w = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let perimeter = 2.0 * len + 2.0 * std::f64::consts::PI * (r + t);
            band += w * tspec.eval(t).value * perimeter;
        }
        band *= h / 3.0;
        let expected = interior + band;
        assert!(
            (mass - expected).abs() / expected < 0.02,
            "mass {mass} vs oracle {expected}"
        );
    }

    #[test]
    fn element_jet_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::test_rng(41);
        let spec = tspec();
        let aspec = AggregatorSpec::Softmax { beta: 10.0 };
        let grid = GridSpec::unit(10, 10).with_quad_order(3);
        let mut checked = 0;
        'outer: while checked < 12 {
            let mut pills = Vec::new();
            for _ in 0..2 {
                let px = rng.gen_range(0.2..0.8);
                let py = rng.gen_range(0.2..0.8);
                let ang: f64 = rng.gen_range(0.0..6.28);
                let len: f64 = rng.gen_range(0.25..0.5);
                let pill = PillParams::new(
                    px,
                    py,
                    px + len * ang.cos(),
                    py + len * ang.sin(),
                    rng.gen_range(0.06..0.15),
                )
                .unwrap();
                pills.push(pill);
            }
            let design = DesignVector::new(pills);
            let e = rng.gen_range(0..grid.n_elements());
            let jet = element_average_jet(&design, &spec, &aspec, &grid, e).unwrap();
            // Only in-band elements are informative.
            if jet.grad.iter().all(|&g| g.abs() < 1e-12) {
                continue;
            }
            let np = design.n_params();
            let f = |z: &[f64]| {
                let mut d = design.clone();
                d.set_flat(z);
                element_average_jet(&d, &spec, &aspec, &grid, e).unwrap().value
            };
            let z0 = design.flat();
            let h = 1e-6;
            let mut fd_g = vec![0.0; np];
            let mut gscale = 1.0_f64;
            for i in 0..np {
                let mut zp = z0.clone();
                let mut zm = z0.clone();
                zp[i] += h;
                zm[i] -= h;
                fd_g[i] = (f(&zp) - f(&zm)) / (2.0 * h);
                gscale = gscale.max(fd_g[i].abs());
            }
            for i in 0..np {
                if (jet.grad[i] - fd_g[i]).abs() / gscale >= 1e-5 {
                    // Quadrature point sitting close to a plateau edge or
                    // branch line; try another configuration.
                    continue 'outer;
                }
            }
            // Hessian rows by differencing the analytic gradient.
            let jet_grad = |z: &[f64]| {
                let mut d = design.clone();
                d.set_flat(z);
                element_average_jet(&d, &spec, &aspec, &grid, e).unwrap().grad
            };
            let hh = 1e-6;
            let mut hscale = 1.0_f64;
            let mut fd_h = vec![0.0; np * np];
            for i in 0..np {
                let mut zp = z0.clone();
                let mut zm = z0.clone();
                zp[i] += hh;
                zm[i] -= hh;
                let (gp, gm) = (jet_grad(&zp), jet_grad(&zm));
                for k in 0..np {
                    fd_h[i * np + k] = (gp[k] - gm[k]) / (2.0 * hh);
                    hscale = hscale.max(fd_h[i * np + k].abs());
                }
            }
            let mut ok = true;
            for i in 0..np {
                for k in 0..np {
                    if (jet.hess_at(i, k) - fd_h[i * np + k]).abs() / hscale >= 1e-4 {
                        ok = false;
                    }
                }
            }
            if !ok {
                continue;
            }
            checked += 1;
        }
    }

    #[test]
    fn padded_window_extends_by_whole_cells() {
        let grid = GridSpec::unit(10, 10).with_pad(0.15);
        assert_eq!(grid.pad_cells(), (2, 2));
        assert_eq!(grid.eval_dims(), (14, 14));
        let elems = eval_elements(&grid);
        assert_eq!(elems.len(), 14 * 14);
        let core_count = elems.iter().filter(|(_, c)| c.is_some()).count();
        assert_eq!(core_count, 100);
        // First padded element sits below/left of the domain.
        assert_eq!(elems[0].0, (-0.2, -0.2));
    }
}
