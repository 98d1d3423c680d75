//! The discrete dynamical system: a scheme iterated on the (possibly
//! subdivided) scheme grid, with its initial row and boundary columns
//! injected from a density matrix.
//!
//! On a `(p_t, p_x)` subdivision the fine initial row replicates the data
//! row over every subcell, and every subcell of the first and last data
//! cells follows the data boundary columns linearly in time. Coarse control
//! coefficients reach the fine interfaces through bilinear interpolation.

use std::ops::Range;

use arrayvec::ArrayVec;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::{average_row, DensityMatrix, Grid, SubdivisionSpec};
use crate::schemes::{step_cells, ControlField, ParamMode, SchemeKind};

/// Coarse parameters (index, weight) feeding one fine interface coefficient.
pub(crate) type Stencil = ArrayVec<(usize, f64), 4>;

#[derive(Clone, Debug)]
pub struct RolloutPlan {
    data: DensityMatrix,
    spec: SubdivisionSpec,
    kind: SchemeKind,
}

impl RolloutPlan {
    pub fn new(data: DensityMatrix, spec: SubdivisionSpec, kind: SchemeKind) -> Result<Self> {
        SubdivisionSpec::new(spec.p_t, spec.p_x)?;
        Ok(RolloutPlan { data, spec, kind })
    }

    pub fn data(&self) -> &DensityMatrix {
        &self.data
    }

    pub fn data_grid(&self) -> &Grid {
        self.data.grid()
    }

    pub fn spec(&self) -> SubdivisionSpec {
        self.spec
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn with_kind(&self, kind: SchemeKind) -> Self {
        RolloutPlan { kind, ..self.clone() }
    }

    pub fn fine_grid(&self) -> Grid {
        self.data_grid().refine(self.spec)
    }

    pub fn fine_shape(&self) -> (usize, usize) {
        self.spec.fine_shape(self.data_grid())
    }

    /// Number of fine time steps, `p_t (n_t - 1)`.
    pub fn fine_steps(&self) -> usize {
        self.spec.p_t * (self.data_grid().n_t - 1)
    }

    /// Fine cells updated by the scheme; the rest are boundary subcells.
    pub fn interior_cells(&self) -> Range<usize> {
        let p_x = self.spec.p_x;
        p_x..(self.data_grid().n_x - 1) * p_x
    }

    fn check_control(&self, control: &ControlField) -> Result<()> {
        let g = self.data_grid();
        if control.dims() != (g.n_t, g.n_x) {
            return Err(Error::ShapeMismatch(format!(
                "control field is defined on {:?}, data grid is {}x{}",
                control.dims(),
                g.n_t,
                g.n_x
            )));
        }
        Ok(())
    }

    /// Bilinear weights of the coarse parameters behind fine interface `k`
    /// at fine step `m`. Zero weights are omitted.
    pub(crate) fn stencil(&self, mode: ParamMode, k: usize, m: usize) -> Stencil {
        let g = self.data_grid();
        let (p_t, p_x) = (self.spec.p_t, self.spec.p_x);
        let (j, q) = (k / p_x, k % p_x);
        let (n, l) = if m / p_t >= g.n_t - 1 {
            (g.n_t - 1, 0)
        } else {
            (m / p_t, m % p_t)
        };
        let a = l as f64 / p_t as f64;
        let b = q as f64 / p_x as f64;
        let idx = |jj: usize, nn: usize| mode.param_index(jj, nn, g.n_t);
        let mut st = Stencil::new();
        match mode {
            ParamMode::Constant => st.push((0, 1.0)),
            ParamMode::Time => {
                st.push((idx(j, n), 1.0 - a));
                if l > 0 {
                    st.push((idx(j, n + 1), a));
                }
            }
            ParamMode::Space => {
                st.push((idx(j, n), 1.0 - b));
                if q > 0 {
                    st.push((idx(j + 1, n), b));
                }
            }
            ParamMode::Spacetime => {
                st.push((idx(j, n), (1.0 - a) * (1.0 - b)));
                if q > 0 {
                    st.push((idx(j + 1, n), (1.0 - a) * b));
                }
                if l > 0 {
                    st.push((idx(j, n + 1), a * (1.0 - b)));
                }
                if q > 0 && l > 0 {
                    st.push((idx(j + 1, n + 1), a * b));
                }
            }
        }
        st
    }

    /// Fine interface coefficients used by fine step `m`.
    pub(crate) fn fill_fine_coeffs(&self, control: &ControlField, m: usize, out: &mut [f64]) {
        let coeffs = control.coeffs();
        for (k, o) in out.iter_mut().enumerate() {
            *o = self
                .stencil(control.mode(), k, m)
                .iter()
                .map(|&(p, w)| w * coeffs[p])
                .sum();
        }
    }

    /// Interpolated data boundary values `(left, right)` at fine time `m`.
    pub(crate) fn boundary_values(&self, m: usize) -> (f64, f64) {
        let u = self.data.values();
        let last = self.data_grid().n_x - 1;
        let p_t = self.spec.p_t;
        let (n, l) = (m / p_t, m % p_t);
        if l == 0 {
            return (u[[n, 0]], u[[n, last]]);
        }
        let a = l as f64 / p_t as f64;
        let lerp = |c: usize| u[[n, c]] + a * (u[[n + 1, c]] - u[[n, c]]);
        (lerp(0), lerp(last))
    }

    pub(crate) fn initial_row(&self) -> Vec<f64> {
        let p_x = self.spec.p_x;
        self.data
            .values()
            .row(0)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, p_x))
            .collect()
    }

    pub(crate) fn inject_boundary(&self, m: usize, row: &mut [f64]) {
        let (left, right) = self.boundary_values(m);
        let p_x = self.spec.p_x;
        let n = row.len();
        row[..p_x].fill(left);
        row[n - p_x..].fill(right);
    }
}

/// Full fine approximation matrix, `(p_t (n_t - 1) + 1) x (p_x n_x)`.
pub fn run(plan: &RolloutPlan, control: &ControlField) -> Result<Array2<f64>> {
    let (rows, cols) = plan.fine_shape();
    let mut fine = Array2::zeros((rows, cols));
    let flat = fine.as_slice_mut().expect("standard layout");
    run_into(plan, control, flat)?;
    Ok(fine)
}

fn run_into(plan: &RolloutPlan, control: &ControlField, flat: &mut [f64]) -> Result<()> {
    plan.check_control(control)?;
    let (_, cols) = plan.fine_shape();
    flat[..cols].copy_from_slice(&plan.initial_row());
    let mut coeffs = vec![0.0; cols + 1];
    let cells = plan.interior_cells();
    for m in 0..plan.fine_steps() {
        plan.fill_fine_coeffs(control, m, &mut coeffs);
        let (done, rest) = flat.split_at_mut((m + 1) * cols);
        let cur = &done[m * cols..];
        let next = &mut rest[..cols];
        step_cells(plan.kind(), cur, &coeffs, cells.clone(), next);
        plan.inject_boundary(m + 1, next);
    }
    Ok(())
}

/// Runs the system keeping only two rows in memory; `visit(m, row)` sees
/// every fine row in order.
pub fn run_streaming(plan: &RolloutPlan, control: &ControlField, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
    plan.check_control(control)?;
    let (_, cols) = plan.fine_shape();
    let mut cur = plan.initial_row();
    let mut next = cur.clone();
    let mut coeffs = vec![0.0; cols + 1];
    let cells = plan.interior_cells();
    visit(0, &cur);
    for m in 0..plan.fine_steps() {
        plan.fill_fine_coeffs(control, m, &mut coeffs);
        step_cells(plan.kind(), &cur, &coeffs, cells.clone(), &mut next);
        plan.inject_boundary(m + 1, &mut next);
        std::mem::swap(&mut cur, &mut next);
        visit(m + 1, &cur);
    }
    Ok(())
}

/// Fine interface coefficients for every fine step, one row per step.
pub fn interpolate_control(plan: &RolloutPlan, control: &ControlField) -> Result<Array2<f64>> {
    plan.check_control(control)?;
    let (_, cols) = plan.fine_shape();
    let steps = plan.fine_steps();
    let mut out = Array2::zeros((steps + 1, cols + 1));
    for m in 0..=steps {
        let mut row = out.row_mut(m);
        plan.fill_fine_coeffs(control, m, row.as_slice_mut().unwrap());
    }
    Ok(out)
}

pub(crate) fn validate_observed(observed: &[usize], n_x: usize) -> Result<()> {
    if observed.is_empty() {
        return Err(Error::EmptyObservationSet);
    }
    for &j in observed {
        if j == 0 || j + 1 >= n_x {
            return Err(Error::InvalidArgument(format!(
                "observed column {j} is not interior (valid: 1..={})",
                n_x - 2
            )));
        }
    }
    Ok(())
}

/// All interior columns `1..n_x - 1`.
pub fn interior_columns(n_x: usize) -> Vec<usize> {
    (1..n_x.saturating_sub(1)).collect()
}

/// Root-mean-square of `restrict(fine) - data` over rows `1..n_t` and the
/// observed columns.
pub fn rmse(fine: ArrayView2<f64>, data: &DensityMatrix, spec: SubdivisionSpec, observed: &[usize]) -> Result<f64> {
    let g = data.grid();
    validate_observed(observed, g.n_x)?;
    let (n_t, n_x) = spec.coarse_shape(fine.dim())?;
    if (n_t, n_x) != g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "fine matrix restricts to {n_t}x{n_x}, data is {}x{}",
            g.n_t, g.n_x
        )));
    }
    let mut avg = vec![0.0; n_x];
    let mut sum = 0.0;
    for i in 1..n_t {
        let row = fine.row(i * spec.p_t);
        average_row(&row.to_vec(), spec.p_x, &mut avg);
        for &j in observed {
            let r = avg[j] - data.get(i, j);
            sum += r * r;
        }
    }
    Ok((sum / ((n_t - 1) * observed.len()) as f64).sqrt())
}
