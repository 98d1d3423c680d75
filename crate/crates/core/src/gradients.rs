//! Gradients of the least-squares cost with respect to the unconstrained
//! parameters `theta`, where each coefficient is `C = lgt(theta) / 2`.
//!
//! Two independent accumulations are provided. Forward propagation carries
//! the full sensitivity matrix `dU^m/dC` through time; back propagation
//! runs an adjoint vector backwards through the stored trajectory and only
//! needs transposed matrix-vector products. Both work on the fine scheme
//! grid and pull the fine interface sensitivities back onto the coarse
//! parameters through the interpolation stencils.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{logit_c, logit_c_inv};
use crate::exec::Execution;
use crate::grid::{average_row, clamp_unit, DensityMatrix, Grid, SubdivisionSpec};
use crate::rollout::{run, validate_observed, RolloutPlan};
use crate::schemes::{raw_flux, ControlField, ParamMode, SchemeKind};

/// Jacobians of one step map. Only interior rows are non-zero: row `j` of
/// the state part has entries at columns `j-1, j, j+1`, row `j` of the
/// control part at interfaces `j, j+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepJacobians {
    n: usize,
    wrt_state: Vec<[f64; 3]>,
    wrt_control: Vec<[f64; 2]>,
}

impl StepJacobians {
    fn zeros(n: usize) -> Self {
        StepJacobians {
            n,
            wrt_state: vec![[0.0; 3]; n],
            wrt_control: vec![[0.0; 2]; n],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    /// `dH_j / dU_k`.
    pub fn state_entry(&self, j: usize, k: usize) -> f64 {
        match k as isize - j as isize {
            -1 => self.wrt_state[j][0],
            0 => self.wrt_state[j][1],
            1 => self.wrt_state[j][2],
            _ => 0.0,
        }
    }

    /// `dH_j / dC_k` for interface `k`.
    pub fn control_entry(&self, j: usize, k: usize) -> f64 {
        match k as isize - j as isize {
            0 => self.wrt_control[j][0],
            1 => self.wrt_control[j][1],
            _ => 0.0,
        }
    }

    pub fn dense_state(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.n), |(j, k)| self.state_entry(j, k))
    }

    pub fn dense_control(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.n + 1), |(j, k)| self.control_entry(j, k))
    }

    fn fill(&mut self, kind: SchemeKind, u: &[f64], c: &[f64], cells: Range<usize>, flip_trm_diagonal: bool) {
        for k in cells {
            let (l, m, r) = (u[k - 1], u[k], u[k + 1]);
            let (cl, cr) = (c[k], c[k + 1]);
            match kind {
                SchemeKind::Trm => {
                    let outflow_term = cr * (1.0 - r);
                    let diag = if flip_trm_diagonal {
                        1.0 - cl * l + outflow_term
                    } else {
                        1.0 - cl * l - outflow_term
                    };
                    self.wrt_state[k] = [cl * (1.0 - m), diag, cr * m];
                    self.wrt_control[k] = [l * (1.0 - m), -m * (1.0 - r)];
                }
                SchemeKind::LaxFriedrichs => {
                    self.wrt_state[k] = [
                        0.5 + 0.5 * cl * (1.0 - 2.0 * l),
                        0.5 * (cl - cr) * (1.0 - 2.0 * m),
                        0.5 - 0.5 * cr * (1.0 - 2.0 * r),
                    ];
                    self.wrt_control[k] = [
                        raw_flux(SchemeKind::LaxFriedrichs, l, m),
                        -raw_flux(SchemeKind::LaxFriedrichs, m, r),
                    ];
                }
                SchemeKind::Godunov => unreachable!("checked by callers"),
            }
        }
    }

    /// `out = J^T delta` restricted to the rows in `cells`.
    fn apply_state_transpose(&self, delta: &[f64], cells: Range<usize>, out: &mut [f64]) {
        out.fill(0.0);
        for k in cells {
            let d = delta[k];
            if d == 0.0 {
                continue;
            }
            let [a, b, c] = self.wrt_state[k];
            out[k - 1] += a * d;
            out[k] += b * d;
            out[k + 1] += c * d;
        }
    }
}

/// Jacobians of [`crate::schemes::step_interior`] for TRM and Lax-Friedrichs.
/// `coeffs` is a single constant or one value per interface.
pub fn step_jacobians(kind: SchemeKind, state: &[f64], coeffs: &[f64]) -> Result<StepJacobians> {
    if !kind.is_differentiable() {
        return Err(Error::UnsupportedScheme(kind));
    }
    let n = state.len();
    if n < 3 {
        return Err(Error::ShapeMismatch(format!("state has {n} cells, need at least 3")));
    }
    let coeffs: Vec<f64> = match coeffs.len() {
        1 => vec![coeffs[0]; n + 1],
        m if m == n + 1 => coeffs.to_vec(),
        m => return Err(Error::ShapeMismatch(format!("{m} coefficients for {n} cells"))),
    };
    for (k, &c) in coeffs.iter().enumerate().take(n).skip(1) {
        if !(c > 0.0 && c < 0.5) {
            return Err(Error::CflViolation {
                value: c,
                interface: k,
                step: 0,
            });
        }
    }
    let state = state.iter().map(|&u| clamp_unit(u)).collect::<Result<Vec<_>>>()?;
    let mut jac = StepJacobians::zeros(n);
    jac.fill(kind, &state, &coeffs, 1..n - 1, false);
    Ok(jac)
}

/// Smoothness penalty on an interface-major `(n_if x n_t)` coefficient
/// array: half the sum of squared differences between temporal and spatial
/// neighbours. Returns the value and its gradient.
pub fn regularizer(field: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n_if, n_t) = field.dim();
    let mut value = 0.0;
    let mut grad = Array2::zeros((n_if, n_t));
    for j in 0..n_if {
        for n in 0..n_t {
            let c = field[[j, n]];
            if n + 1 < n_t {
                let d = c - field[[j, n + 1]];
                value += 0.5 * d * d;
                grad[[j, n]] += d;
                grad[[j, n + 1]] -= d;
            }
            if j + 1 < n_if {
                let d = c - field[[j + 1, n]];
                value += 0.5 * d * d;
                grad[[j, n]] += d;
                grad[[j + 1, n]] -= d;
            }
        }
    }
    (value, grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMethod {
    #[serde(alias = "fp")]
    ForwardProp,
    #[default]
    #[serde(alias = "bp")]
    BackProp,
}

/// Least-squares cost of a rollout against the observed data columns plus
/// `lambda` times the regularizer of the expanded coefficient field.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    plan: &'a RolloutPlan,
    mode: ParamMode,
    observed: Vec<usize>,
    lambda: f64,
    flip_trm_diagonal: bool,
}

impl<'a> Objective<'a> {
    /// `lambda` is ignored (set to 0) for constant fields. An empty
    /// `observed` set leaves only the regularization term.
    pub fn new(plan: &'a RolloutPlan, mode: ParamMode, observed: &[usize], lambda: f64) -> Result<Self> {
        if !observed.is_empty() {
            validate_observed(observed, plan.data_grid().n_x)?;
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda = {lambda}")));
        }
        let mut observed = observed.to_vec();
        observed.sort_unstable();
        observed.dedup();
        Ok(Objective {
            plan,
            mode,
            observed,
            lambda: if mode.is_varying() { lambda } else { 0.0 },
            flip_trm_diagonal: false,
        })
    }

    /// Mutation hook: uses `+C_{j+1}(1 - U_{j+1})` in the TRM state-Jacobian
    /// diagonal so that checkers can be shown to catch a wrong sign.
    #[doc(hidden)]
    pub fn with_flipped_trm_diagonal(mut self) -> Self {
        self.flip_trm_diagonal = true;
        self
    }

    pub fn plan(&self) -> &RolloutPlan {
        self.plan
    }

    pub fn mode(&self) -> ParamMode {
        self.mode
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn param_count(&self) -> usize {
        let g = self.plan.data_grid();
        self.mode.param_count(g.n_t, g.n_x)
    }

    pub fn control(&self, theta: &[f64]) -> Result<ControlField> {
        let g = self.plan.data_grid();
        if theta.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a {} field (need {})",
                theta.len(),
                self.mode,
                self.param_count()
            )));
        }
        ControlField::new(self.mode, g.n_t, g.n_x, theta.iter().map(|&t| logit_c(t).0).collect())
    }

    fn add_residual(&self, row: &[f64], i: usize, avg: &mut [f64], delta: Option<&mut [f64]>) -> f64 {
        let p_x = self.plan.spec().p_x;
        let data = self.plan.data();
        average_row(row, p_x, avg);
        let mut sq = 0.0;
        let mut delta = delta;
        for &j in &self.observed {
            let r = avg[j] - data.get(i, j);
            sq += r * r;
            if let Some(d) = delta.as_deref_mut() {
                let share = r / p_x as f64;
                for v in &mut d[j * p_x..(j + 1) * p_x] {
                    *v += share;
                }
            }
        }
        0.5 * sq
    }

    fn regularization(&self, control: &ControlField) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.param_count()];
        if self.lambda == 0.0 {
            return (0.0, grad);
        }
        let (value, g) = regularizer(&control.to_spacetime());
        let n_t = self.plan.data_grid().n_t;
        for ((j, n), v) in g.indexed_iter() {
            grad[self.mode.param_index(j, n, n_t)] += self.lambda * v;
        }
        (self.lambda * value, grad)
    }

    fn data_cost(&self, fine: &Array2<f64>) -> f64 {
        let g = self.plan.data_grid();
        let p_t = self.plan.spec().p_t;
        let mut avg = vec![0.0; g.n_x];
        (1..g.n_t)
            .map(|i| self.add_residual(fine.row(i * p_t).as_slice().unwrap(), i, &mut avg, None))
            .sum()
    }

    pub fn cost(&self, theta: &[f64]) -> Result<f64> {
        let control = self.control(theta)?;
        let fine = run(self.plan, &control)?;
        Ok(self.data_cost(&fine) + self.regularization(&control).0)
    }

    /// Cost and gradient with respect to `theta`.
    pub fn evaluate(&self, theta: &[f64], method: GradientMethod) -> Result<(f64, Vec<f64>)> {
        if !self.plan.kind().is_differentiable() {
            return Err(Error::UnsupportedScheme(self.plan.kind()));
        }
        let control = self.control(theta)?;
        let fine = run(self.plan, &control)?;
        let (data_cost, mut grad) = match method {
            GradientMethod::ForwardProp => self.forward(&fine, &control),
            GradientMethod::BackProp => self.backward(&fine, &control),
        };
        let (reg, reg_grad) = self.regularization(&control);
        for ((g, r), &t) in grad.iter_mut().zip(&reg_grad).zip(theta) {
            *g = (*g + r) * logit_c(t).1;
        }
        Ok((data_cost + reg, grad))
    }

    pub fn gradient(&self, theta: &[f64], method: GradientMethod) -> Result<Vec<f64>> {
        Ok(self.evaluate(theta, method)?.1)
    }

    /// Forward propagation of `G^m = dU^m / dC` (fine cells x parameters).
    fn forward(&self, fine: &Array2<f64>, control: &ControlField) -> (f64, Vec<f64>) {
        let plan = self.plan;
        let (_, cols) = plan.fine_shape();
        let p = self.param_count();
        let p_t = plan.spec().p_t;
        let cells = plan.interior_cells();
        let mode = control.mode();
        let mut sens = vec![0.0; cols * p];
        let mut next = vec![0.0; cols * p];
        let mut coeffs = vec![0.0; cols + 1];
        let mut jac = StepJacobians::zeros(cols);
        let mut avg = vec![0.0; plan.data_grid().n_x];
        let mut resid = vec![0.0; cols];
        let mut grad = vec![0.0; p];
        let mut cost = 0.0;
        for m in 0..plan.fine_steps() {
            let row = fine.row(m);
            plan.fill_fine_coeffs(control, m, &mut coeffs);
            jac.fill(plan.kind(), row.as_slice().unwrap(), &coeffs, cells.clone(), self.flip_trm_diagonal);
            next.fill(0.0);
            for k in cells.clone() {
                let [a, b, c] = jac.wrt_state[k];
                let out = &mut next[k * p..(k + 1) * p];
                for col in 0..p {
                    out[col] = a * sens[(k - 1) * p + col] + b * sens[k * p + col] + c * sens[(k + 1) * p + col];
                }
                let [e, f] = jac.wrt_control[k];
                for &(idx, w) in &plan.stencil(mode, k, m) {
                    out[idx] += e * w;
                }
                for &(idx, w) in &plan.stencil(mode, k + 1, m) {
                    out[idx] += f * w;
                }
            }
            std::mem::swap(&mut sens, &mut next);
            if (m + 1) % p_t == 0 {
                let i = (m + 1) / p_t;
                resid.fill(0.0);
                cost += self.add_residual(fine.row(m + 1).as_slice().unwrap(), i, &mut avg, Some(&mut resid));
                for (k, &r) in resid.iter().enumerate() {
                    if r != 0.0 {
                        for col in 0..p {
                            grad[col] += sens[k * p + col] * r;
                        }
                    }
                }
            }
        }
        (cost, grad)
    }

    /// Back propagation of the adjoint `delta^m` from the last fine row.
    fn backward(&self, fine: &Array2<f64>, control: &ControlField) -> (f64, Vec<f64>) {
        let plan = self.plan;
        let (_, cols) = plan.fine_shape();
        let p_t = plan.spec().p_t;
        let cells = plan.interior_cells();
        let mode = control.mode();
        let steps = plan.fine_steps();
        let mut delta = vec![0.0; cols];
        let mut next = vec![0.0; cols];
        let mut coeffs = vec![0.0; cols + 1];
        let mut iface = vec![0.0; cols + 1];
        let mut jac = StepJacobians::zeros(cols);
        let mut avg = vec![0.0; plan.data_grid().n_x];
        let mut grad = vec![0.0; self.param_count()];
        let mut cost = self.add_residual(fine.row(steps).as_slice().unwrap(), steps / p_t, &mut avg, Some(&mut delta));
        for m in (0..steps).rev() {
            let row = fine.row(m);
            plan.fill_fine_coeffs(control, m, &mut coeffs);
            jac.fill(plan.kind(), row.as_slice().unwrap(), &coeffs, cells.clone(), self.flip_trm_diagonal);
            iface.fill(0.0);
            for k in cells.clone() {
                let [e, f] = jac.wrt_control[k];
                iface[k] += e * delta[k];
                iface[k + 1] += f * delta[k];
            }
            for (k, &v) in iface.iter().enumerate().take(cells.end + 1).skip(cells.start) {
                if v != 0.0 {
                    for &(idx, w) in &plan.stencil(mode, k, m) {
                        grad[idx] += w * v;
                    }
                }
            }
            jac.apply_state_transpose(&delta, cells.clone(), &mut next);
            if m > 0 && m % p_t == 0 {
                cost += self.add_residual(row.as_slice().unwrap(), m / p_t, &mut avg, Some(&mut next));
            }
            std::mem::swap(&mut delta, &mut next);
        }
        (cost, grad)
    }
}

/// A gradient evaluation at the parameters behind `control`.
#[derive(Clone, Debug)]
pub struct GradientRequest<'a> {
    pub plan: &'a RolloutPlan,
    pub control: ControlField,
    pub observed_cols: Vec<usize>,
    pub lambda: f64,
    pub method: GradientMethod,
}

impl GradientRequest<'_> {
    fn objective_and_theta(&self) -> Result<(Objective<'_>, Vec<f64>)> {
        let obj = Objective::new(self.plan, self.control.mode(), &self.observed_cols, self.lambda)?;
        let theta = self
            .control
            .coeffs()
            .iter()
            .map(|&c| logit_c_inv(c))
            .collect::<Result<Vec<_>>>()?;
        Ok((obj, theta))
    }
}

pub fn gradient(req: &GradientRequest<'_>) -> Result<Vec<f64>> {
    let (obj, theta) = req.objective_and_theta()?;
    obj.gradient(&theta, req.method)
}

pub fn grad_forward(req: &GradientRequest<'_>) -> Result<Vec<f64>> {
    let (obj, theta) = req.objective_and_theta()?;
    obj.gradient(&theta, GradientMethod::ForwardProp)
}

pub fn grad_backward(req: &GradientRequest<'_>) -> Result<Vec<f64>> {
    let (obj, theta) = req.objective_and_theta()?;
    obj.gradient(&theta, GradientMethod::BackProp)
}

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h`, one
/// coordinate per work item.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64, exec: Execution) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    exec.map_range(x.len(), |k| {
        let mut xp = x.to_vec();
        xp[k] = x[k] + h;
        let fp = f(&xp)?;
        xp[k] = x[k] - h;
        let fm = f(&xp)?;
        Ok((fp - fm) / (2.0 * h))
    })
    .into_iter()
    .collect()
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// `|a - reference|_inf / max(|reference|_inf, floor)`.
pub fn relative_error(a: &[f64], reference: &[f64], floor: f64) -> f64 {
    max_abs_diff(a, reference) / max_abs(reference).max(floor)
}

/// Which interior columns a random gradient-check instance observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservedSet {
    Full,
    Half,
    Single,
}

impl ObservedSet {
    pub fn columns(self, n_x: usize) -> Vec<usize> {
        match self {
            ObservedSet::Full => (1..n_x - 1).collect(),
            ObservedSet::Half => (1..n_x - 1).filter(|j| j % 2 == 0).collect::<Vec<_>>().or_center(n_x),
            ObservedSet::Single => vec![(n_x - 1) / 2],
        }
    }
}

trait OrCenter {
    fn or_center(self, n_x: usize) -> Vec<usize>;
}

impl OrCenter for Vec<usize> {
    fn or_center(self, n_x: usize) -> Vec<usize> {
        if self.is_empty() {
            vec![(n_x - 1) / 2]
        } else {
            self
        }
    }
}

/// Lattice of randomized gradient checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub modes: Vec<ParamMode>,
    pub schemes: Vec<SchemeKind>,
    pub subdivisions: Vec<SubdivisionSpec>,
    pub observed: Vec<ObservedSet>,
    pub n_t: usize,
    pub n_x: usize,
    pub instances_per_case: usize,
    pub seed: u64,
    /// Finite-difference step in `theta`.
    pub h: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Upper end of the random regularization weight for varying modes.
    pub max_lambda: f64,
    #[doc(hidden)]
    #[serde(skip)]
    pub inject_trm_diagonal_sign_flip: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            modes: ParamMode::ALL.to_vec(),
            schemes: vec![SchemeKind::Trm, SchemeKind::LaxFriedrichs],
            subdivisions: vec![SubdivisionSpec { p_t: 1, p_x: 1 }, SubdivisionSpec { p_t: 2, p_x: 3 }],
            observed: vec![ObservedSet::Full, ObservedSet::Half, ObservedSet::Single],
            n_t: 5,
            n_x: 6,
            instances_per_case: 5,
            seed: 2024,
            h: 1e-6,
            tolerance: 1e-5,
            max_lambda: 1.0,
            inject_trm_diagonal_sign_flip: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub mode: ParamMode,
    pub scheme: SchemeKind,
    pub subdivision: SubdivisionSpec,
    pub observed: ObservedSet,
    pub seed: u64,
    pub lambda: f64,
    pub grad_norm: f64,
    /// `|fp - bp|_inf / (1 + |g|_inf)`.
    pub fp_vs_bp: f64,
    pub fp_vs_fd: f64,
    pub bp_vs_fd: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModeSummary {
    pub cases: usize,
    pub max_fp_vs_fd: f64,
    pub max_bp_vs_fd: f64,
    pub max_fp_vs_bp: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub fp_bp_tolerance: f64,
    pub passed: bool,
    pub per_mode: BTreeMap<String, ModeSummary>,
    pub cases: Vec<GradcheckCase>,
}

/// Agreement demanded between the two analytic gradients, scaled by `1 + |g|`.
pub const FP_BP_TOLERANCE: f64 = 1e-12;

/// Floor on the denominator of the finite-difference relative error.
const FD_FLOOR: f64 = 1e-6;

/// Builds a random data matrix and parameter vector for one lattice point.
pub fn random_instance(
    n_t: usize,
    n_x: usize,
    mode: ParamMode,
    rng: &mut impl Rng,
) -> Result<(DensityMatrix, Vec<f64>)> {
    let grid = Grid::new(n_t, n_x, 1.0, 1.0)?;
    let data = DensityMatrix::new(grid, Array2::from_shape_fn((n_t, n_x), |_| rng.gen_range(0.02..0.98)))?;
    let theta = (0..mode.param_count(n_t, n_x)).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Ok((data, theta))
}

pub fn check_instance(
    obj: &Objective<'_>,
    theta: &[f64],
    h: f64,
    exec: Execution,
) -> Result<(f64, f64, f64, f64)> {
    let fp = obj.gradient(theta, GradientMethod::ForwardProp)?;
    let bp = obj.gradient(theta, GradientMethod::BackProp)?;
    let fd = finite_difference_gradient(|t| obj.cost(t), theta, h, exec)?;
    let norm = max_abs(&bp);
    Ok((
        norm,
        max_abs_diff(&fp, &bp) / (1.0 + norm),
        relative_error(&fp, &fd, FD_FLOOR),
        relative_error(&bp, &fd, FD_FLOOR),
    ))
}

pub fn gradcheck(config: &GradcheckConfig, exec: Execution) -> Result<GradcheckReport> {
    for &kind in &config.schemes {
        if !kind.is_differentiable() {
            return Err(Error::UnsupportedScheme(kind));
        }
    }
    Grid::new(config.n_t, config.n_x, 1.0, 1.0)?;
    let mut lattice = Vec::new();
    for &mode in &config.modes {
        for &scheme in &config.schemes {
            for &spec in &config.subdivisions {
                SubdivisionSpec::new(spec.p_t, spec.p_x)?;
                for &observed in &config.observed {
                    for rep in 0..config.instances_per_case {
                        lattice.push((mode, scheme, spec, observed, config.seed.wrapping_add(lattice.len() as u64 * 7919 + rep as u64)));
                    }
                }
            }
        }
    }
    let cases = exec
        .map(&lattice, |&(mode, scheme, spec, observed, seed)| -> Result<GradcheckCase> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (data, theta) = random_instance(config.n_t, config.n_x, mode, &mut rng)?;
            let lambda = if mode.is_varying() { rng.gen_range(0.0..config.max_lambda) } else { 0.0 };
            let plan = RolloutPlan::new(data, spec, scheme)?;
            let mut obj = Objective::new(&plan, mode, &observed.columns(config.n_x), lambda)?;
            if config.inject_trm_diagonal_sign_flip {
                obj = obj.with_flipped_trm_diagonal();
            }
            let (grad_norm, fp_vs_bp, fp_vs_fd, bp_vs_fd) = check_instance(&obj, &theta, config.h, Execution::Sequential)?;
            let pass = fp_vs_bp <= FP_BP_TOLERANCE && fp_vs_fd <= config.tolerance && bp_vs_fd <= config.tolerance;
            Ok(GradcheckCase {
                mode,
                scheme,
                subdivision: spec,
                observed,
                seed,
                lambda,
                grad_norm,
                fp_vs_bp,
                fp_vs_fd,
                bp_vs_fd,
                pass,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut per_mode: BTreeMap<String, ModeSummary> = BTreeMap::new();
    for c in &cases {
        let s = per_mode.entry(c.mode.to_string()).or_default();
        s.cases += 1;
        s.max_fp_vs_fd = s.max_fp_vs_fd.max(c.fp_vs_fd);
        s.max_bp_vs_fd = s.max_bp_vs_fd.max(c.bp_vs_fd);
        s.max_fp_vs_bp = s.max_fp_vs_bp.max(c.fp_vs_bp);
    }
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        fp_bp_tolerance: FP_BP_TOLERANCE,
        passed: cases.iter().all(|c| c.pass),
        per_mode,
        cases,
    })
}
