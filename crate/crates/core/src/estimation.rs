//! Identification of interface coefficients from a density matrix.
//!
//! Coefficients are optimised through `C = lgt(theta) / 2`, which keeps
//! every iterate inside the admissible interval `(0, 1/2)`. The optimiser is
//! a Polak-Ribiere+ conjugate gradient with Armijo backtracking.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gradients::{max_abs, GradientMethod, Objective};
use crate::grid::{restrict, DensityMatrix, Grid, SubdivisionSpec};
use crate::rollout::{interior_columns, rmse, run, validate_observed, RolloutPlan};
use crate::schemes::{ControlField, ParamMode, SchemeKind};

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `C = lgt(theta) / 2` and `dC/dtheta`.
pub fn logit_c(theta: f64) -> (f64, f64) {
    let s = sigmoid(theta);
    (0.5 * s, 0.5 * s * (1.0 - s))
}

/// Inverse of [`logit_c`] on `(0, 1/2)`.
pub fn logit_c_inv(c: f64) -> Result<f64> {
    if !(c > 0.0 && c < 0.5) {
        return Err(Error::InverseOutOfRange(c));
    }
    let s = 2.0 * c;
    Ok((s / (1.0 - s)).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    /// Stop once `|g|_inf <= grad_tol * (1 + |cost|)`.
    pub grad_tol: f64,
    pub initial_theta: Option<Vec<f64>>,
    pub method: GradientMethod,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub max_halvings: usize,
    /// Take `theta + d` without a line search.
    pub bare_step: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iters: 500,
            grad_tol: 1e-8,
            initial_theta: None,
            method: GradientMethod::BackProp,
            armijo_c: 1e-4,
            max_halvings: 50,
            bare_step: false,
        }
    }
}

/// Regularization weight, or candidates to select from by full RMSE.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lambda {
    Fixed(f64),
    Grid(Vec<f64>),
    /// `10^-4 .. 10^1` scaled by residual count over parameter count.
    #[default]
    Auto,
}

impl Lambda {
    pub fn candidates(&self, residuals: usize, params: usize) -> Vec<f64> {
        match self {
            Lambda::Fixed(l) => vec![*l],
            Lambda::Grid(v) => v.clone(),
            Lambda::Auto => {
                let scale = residuals as f64 / params.max(1) as f64;
                (-4..=1).map(|k| 10f64.powi(k) * scale).collect()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimationProblem {
    pub data: DensityMatrix,
    /// Vehicles per unit length; only used for reporting fluxes.
    pub rho_max: f64,
    pub kind: SchemeKind,
    pub mode: ParamMode,
    pub spec: SubdivisionSpec,
    pub observed_cols: Vec<usize>,
    pub lambda: Lambda,
    pub optimizer: OptimizerSettings,
    /// Starting field for varying modes; must nest in `mode`. When absent a
    /// constant-mode fit is used.
    pub warm_start: Option<ControlField>,
}

impl EstimationProblem {
    pub fn new(data: DensityMatrix, kind: SchemeKind, mode: ParamMode, spec: SubdivisionSpec) -> Self {
        let observed_cols = interior_columns(data.grid().n_x);
        EstimationProblem {
            data,
            rho_max: 1.0,
            kind,
            mode,
            spec,
            observed_cols,
            lambda: Lambda::Auto,
            optimizer: OptimizerSettings::default(),
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kind.is_differentiable() {
            return Err(Error::UnsupportedScheme(self.kind));
        }
        validate_observed(&self.observed_cols, self.data.grid().n_x)?;
        if !(self.rho_max > 0.0 && self.rho_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho_max = {}", self.rho_max)));
        }
        if let Lambda::Fixed(l) = self.lambda {
            check_lambda(l)?;
        }
        if let Lambda::Grid(ref v) = self.lambda {
            if v.is_empty() {
                return Err(Error::InvalidArgument("empty lambda grid".into()));
            }
            v.iter().try_for_each(|&l| check_lambda(l))?;
        }
        if let Some(t) = &self.optimizer.initial_theta {
            let n = self.param_count();
            if t.len() != n {
                return Err(Error::ShapeMismatch(format!("initial_theta has {} entries, need {n}", t.len())));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let g = self.data.grid();
        self.mode.param_count(g.n_t, g.n_x)
    }

    pub fn residual_count(&self) -> usize {
        (self.data.grid().n_t - 1) * self.observed_cols.len()
    }

    pub fn plan(&self) -> Result<RolloutPlan> {
        RolloutPlan::new(self.data.clone(), self.spec, self.kind)
    }

    fn lambda_candidates(&self) -> Vec<f64> {
        if self.mode.is_varying() {
            self.lambda.candidates(self.residual_count(), self.param_count())
        } else {
            vec![0.0]
        }
    }
}

fn check_lambda(l: f64) -> Result<()> {
    if l >= 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda = {l}")))
    }
}

/// Least-squares cost at `theta` with a fixed regularization weight.
pub fn cost(problem: &EstimationProblem, theta: &[f64], lambda: f64) -> Result<f64> {
    problem.validate()?;
    let plan = problem.plan()?;
    Objective::new(&plan, problem.mode, &problem.observed_cols, lambda)?.cost(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrial {
    pub lambda: f64,
    pub cost: f64,
    pub rmse_observed: f64,
    pub rmse_full: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimationResult {
    pub kind: SchemeKind,
    pub mode: ParamMode,
    pub spec: SubdivisionSpec,
    pub grid: Grid,
    pub fine_grid: Grid,
    pub rho_max: f64,
    pub observed_cols: Vec<usize>,
    pub lambda: f64,
    pub theta_star: Vec<f64>,
    pub c_star: ControlField,
    /// `(dx / dt) C` on the scheme grid, laid out like `c_star`.
    pub v_m_star: Vec<f64>,
    #[serde(skip)]
    pub fitted_density: Option<DensityMatrix>,
    pub cost: f64,
    pub rmse_observed: f64,
    pub rmse_full: f64,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The line search ran out of halvings; the best iterate is returned.
    pub stalled: bool,
    pub grad_inf_norm: f64,
    pub lambda_trials: Vec<LambdaTrial>,
}

impl EstimationResult {
    pub fn fitted_density(&self) -> &DensityMatrix {
        self.fitted_density.as_ref().expect("fitted density is set by minimize")
    }

    /// Mean of `v_m_star`.
    pub fn mean_v_m(&self) -> f64 {
        self.v_m_star.iter().sum::<f64>() / self.v_m_star.len() as f64
    }

    /// `v_m` at interface `j` and data time `n`.
    pub fn v_m_at(&self, n: usize, j: usize) -> f64 {
        let (n_t, _) = self.c_star.dims();
        self.v_m_star[self.mode.param_index(j, n, n_t)]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Raw outcome of one conjugate-gradient run.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub theta: Vec<f64>,
    pub cost: f64,
    pub grad_inf_norm: f64,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Polak-Ribiere+ conjugate gradient from `theta0`.
///
/// The line search halves from `alpha = 1` until the Armijo condition holds;
/// when the unit step is accepted immediately it is doubled for as long as
/// the condition keeps holding and the cost keeps falling.
pub fn conjugate_gradient(obj: &Objective<'_>, theta0: &[f64], settings: &OptimizerSettings) -> Result<CgOutcome> {
    let method = settings.method;
    let mut theta = theta0.to_vec();
    let (mut f, mut g) = obj.evaluate(&theta, method)?;
    let mut best = (f, theta.clone(), max_abs(&g));
    let mut trace = vec![f];
    let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    let trial_cost = |t: &[f64]| obj.cost(t).ok().filter(|c| c.is_finite());
    while iterations < settings.max_iters {
        if max_abs(&g) <= settings.grad_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|x| -x).collect();
            slope = -dot(&g, &g);
        }
        let next = if settings.bare_step {
            let t: Vec<f64> = theta.iter().zip(&d).map(|(a, b)| a + b).collect();
            trial_cost(&t).map(|_| t)
        } else {
            let step = |alpha: f64| -> Vec<f64> { theta.iter().zip(&d).map(|(a, b)| a + alpha * b).collect() };
            let armijo = |alpha: f64, ft: f64| ft <= f + settings.armijo_c * alpha * slope;
            let mut alpha = 1.0;
            let mut found = None;
            for _ in 0..=settings.max_halvings {
                let t = step(alpha);
                if let Some(ft) = trial_cost(&t) {
                    if armijo(alpha, ft) {
                        found = Some((t, ft));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            // a full step that is accepted outright may be far too short
            if let Some((_, mut f_acc)) = found.as_ref().filter(|_| alpha == 1.0).cloned() {
                for _ in 0..settings.max_halvings {
                    let t = step(2.0 * alpha);
                    match trial_cost(&t) {
                        Some(ft) if armijo(2.0 * alpha, ft) && ft < f_acc => {
                            alpha *= 2.0;
                            f_acc = ft;
                            found = Some((t, ft));
                        }
                        _ => break,
                    }
                }
            }
            found.map(|(t, _)| t)
        };
        let Some(next) = next else {
            stalled = true;
            break;
        };
        iterations += 1;
        theta = next;
        let (f_new, g_new) = obj.evaluate(&theta, method)?;
        let beta = (dot(&g_new, &g_new) - dot(&g_new, &g)) / dot(&g, &g);
        let beta = if beta.is_finite() { beta.max(0.0) } else { 0.0 };
        d = g_new.iter().zip(&d).map(|(gn, dp)| -gn + beta * dp).collect();
        f = f_new;
        g = g_new;
        trace.push(f);
        if f < best.0 {
            best = (f, theta.clone(), max_abs(&g));
        }
    }
    if !converged && max_abs(&g) <= settings.grad_tol * (1.0 + f.abs()) {
        converged = true;
    }
    if stalled {
        log::warn!("line search stalled after {iterations} iterations at cost {:.3e}", best.0);
    }
    Ok(CgOutcome {
        theta: best.1,
        cost: best.0,
        grad_inf_norm: best.2,
        cost_trace: trace,
        iterations,
        converged,
        stalled,
    })
}

fn initial_theta(problem: &EstimationProblem, exec: Execution) -> Result<Vec<f64>> {
    if let Some(t) = &problem.optimizer.initial_theta {
        return Ok(t.clone());
    }
    if !problem.mode.is_varying() {
        return Ok(vec![0.0]);
    }
    let start = match &problem.warm_start {
        Some(field) => field.broadcast(problem.mode)?,
        None => {
            let mut constant = problem.clone();
            constant.mode = ParamMode::Constant;
            constant.warm_start = None;
            constant.optimizer.initial_theta = None;
            minimize(&constant, exec)?.c_star.broadcast(problem.mode)?
        }
    };
    start.coeffs().iter().map(|&c| logit_c_inv(c)).collect()
}

/// Fits the problem; with several regularization candidates one fit runs per
/// candidate and the one with the smallest full RMSE is returned.
pub fn minimize(problem: &EstimationProblem, exec: Execution) -> Result<EstimationResult> {
    problem.validate()?;
    let plan = problem.plan()?;
    let theta0 = initial_theta(problem, exec)?;
    let candidates = problem.lambda_candidates();
    let all_cols = interior_columns(problem.data.grid().n_x);
    let fits = exec
        .map(&candidates, |&lambda| -> Result<(LambdaTrial, CgOutcome)> {
            let obj = Objective::new(&plan, problem.mode, &problem.observed_cols, lambda)?;
            let out = conjugate_gradient(&obj, &theta0, &problem.optimizer)?;
            let fine = run(&plan, &obj.control(&out.theta)?)?;
            let trial = LambdaTrial {
                lambda,
                cost: out.cost,
                rmse_observed: rmse(fine.view(), &problem.data, problem.spec, &problem.observed_cols)?,
                rmse_full: rmse(fine.view(), &problem.data, problem.spec, &all_cols)?,
                iterations: out.iterations,
            };
            Ok((trial, out))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let best = fits
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.rmse_full.total_cmp(&b.1 .0.rmse_full))
        .map(|(k, _)| k)
        .expect("at least one candidate");
    let trials: Vec<LambdaTrial> = fits.iter().map(|(t, _)| t.clone()).collect();
    let (trial, out) = fits.into_iter().nth(best).unwrap();
    let g = problem.data.grid();
    let c_star = ControlField::new(
        problem.mode,
        g.n_t,
        g.n_x,
        out.theta.iter().map(|&t| logit_c(t).0).collect(),
    )?;
    let fine_grid = plan.fine_grid();
    let speed = fine_grid.dx / fine_grid.dt;
    let fine = run(&plan, &c_star)?;
    let fitted = DensityMatrix::new(*g, restrict(fine.view(), problem.spec)?)?;
    Ok(EstimationResult {
        kind: problem.kind,
        mode: problem.mode,
        spec: problem.spec,
        grid: *g,
        fine_grid,
        rho_max: problem.rho_max,
        observed_cols: problem.observed_cols.clone(),
        lambda: trial.lambda,
        v_m_star: c_star.coeffs().iter().map(|c| speed * c).collect(),
        theta_star: out.theta,
        c_star,
        fitted_density: Some(fitted),
        cost: out.cost,
        rmse_observed: trial.rmse_observed,
        rmse_full: trial.rmse_full,
        cost_trace: out.cost_trace,
        iterations: out.iterations,
        converged: out.converged,
        stalled: out.stalled,
        grad_inf_norm: out.grad_inf_norm,
        lambda_trials: trials,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdSource {
    Data,
    Fit,
}

/// One fundamental-diagram point in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdPoint {
    pub source: FdSource,
    pub i: usize,
    pub j: usize,
    pub density: f64,
    pub flow: f64,
    /// Speed parameter of the parabola this point lies on (fit points).
    pub v_m: f64,
}

/// `phi = rho v (1 - rho / rho_max)`.
pub fn fd_flow(rho: f64, v_m: f64, rho_max: f64) -> f64 {
    rho * v_m * (1.0 - rho / rho_max)
}

/// Fit points from the fitted densities with the cell speed taken as the
/// mean of the two adjacent interface speeds, plus optional data points
/// from measured density (vehicles per length) and flow matrices.
pub fn fundamental_diagram(result: &EstimationResult, data: Option<(&Array2<f64>, &Array2<f64>)>) -> Vec<FdPoint> {
    let fitted = result.fitted_density();
    let (n_t, n_x) = fitted.grid().shape();
    let mut points = Vec::with_capacity(n_t * n_x * 2);
    for i in 0..n_t {
        for j in 0..n_x {
            let v = 0.5 * (result.v_m_at(i, j) + result.v_m_at(i, j + 1));
            let rho = fitted.get(i, j) * result.rho_max;
            points.push(FdPoint {
                source: FdSource::Fit,
                i,
                j,
                density: rho,
                flow: fd_flow(rho, v, result.rho_max),
                v_m: v,
            });
        }
    }
    if let Some((density, flow)) = data {
        for ((i, j), &rho) in density.indexed_iter() {
            points.push(FdPoint {
                source: FdSource::Data,
                i,
                j,
                density: rho,
                flow: flow[[i, j]],
                v_m: f64::NAN,
            });
        }
    }
    points
}

pub fn write_fd_points_csv(path: impl AsRef<Path>, points: &[FdPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "i", "j", "density", "flow", "v_m"])?;
    for p in points {
        let source = match p.source {
            FdSource::Data => "data",
            FdSource::Fit => "fit",
        };
        let v = if p.v_m.is_nan() { String::new() } else { p.v_m.to_string() };
        w.write_record([
            source.to_string(),
            p.i.to_string(),
            p.j.to_string(),
            p.density.to_string(),
            p.flow.to_string(),
            v,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_result_json(path: impl AsRef<Path>, result: &EstimationResult) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(result.to_json()?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logit_examples() {
        assert_eq!(logit_c(0.0), (0.25, 0.125));
        assert!((logit_c(50.0).0 - 0.5).abs() < 1e-15);
        assert!(logit_c(-800.0).0 >= 0.0);
        assert!((logit_c_inv(logit_c(1.7).0).unwrap() - 1.7).abs() <= 1e-12);
        for c in [0.0, 0.5, -0.1, 0.7, f64::NAN] {
            assert!(matches!(logit_c_inv(c), Err(Error::InverseOutOfRange(_))));
        }
        let h = 1e-6;
        for t in [-3.0, -0.2, 0.0, 1.1, 4.0] {
            let fd = (logit_c(t + h).0 - logit_c(t - h).0) / (2.0 * h);
            assert!((fd - logit_c(t).1).abs() < 1e-10);
        }
    }

    fn self_generated(n_t: usize, n_x: usize, spec: SubdivisionSpec, truth: &ControlField, kind: SchemeKind) -> DensityMatrix {
        let grid = Grid::new(n_t, n_x, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = DensityMatrix::new(grid, Array2::from_shape_fn((n_t, n_x), |_| rng.gen_range(0.1..0.9))).unwrap();
        let plan = RolloutPlan::new(base, spec, kind).unwrap();
        let fine = run(&plan, truth).unwrap();
        DensityMatrix::new(grid, restrict(fine.view(), spec).unwrap()).unwrap()
    }

    #[test]
    fn cost_examples() {
        let truth = ControlField::constant(logit_c(0.4).0, 5, 6).unwrap();
        let data = self_generated(5, 6, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
        let p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Constant, SubdivisionSpec::default());
        assert!(cost(&p, &[0.4], 0.0).unwrap() <= 1e-30);

        // single step, single observed column
        let grid = Grid::new(2, 3, 1.0, 1.0).unwrap();
        let data = DensityMatrix::new(grid, ndarray::array![[0.2, 0.6, 0.3], [0.0, 0.5, 0.0]]).unwrap();
        let p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Constant, SubdivisionSpec::default());
        let c = 0.25;
        let next = 0.6 + c * 0.2 * (1.0 - 0.6) - c * 0.6 * (1.0 - 0.3);
        let r = next - 0.5;
        assert!((cost(&p, &[0.0], 0.0).unwrap() - 0.5 * r * r).abs() < 1e-16);
    }

    #[test]
    fn cost_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = Grid::new(4, 5, 1.0, 1.0).unwrap();
        let data = DensityMatrix::new(grid, Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.0..1.0))).unwrap();
        let mut p = EstimationProblem::new(data.clone(), SchemeKind::LaxFriedrichs, ParamMode::Time, SubdivisionSpec::default());
        p.observed_cols = vec![1, 3];
        let theta = [0.3, -0.2, 0.8, 0.1];
        let c: Vec<f64> = theta.iter().map(|&t| logit_c(t).0).collect();
        // straight recurrence with Lax-Friedrichs fluxes and injected boundaries
        let f = |u: f64, v: f64| 0.5 * (u * (1.0 - u) + v * (1.0 - v));
        let mut u = data.values().row(0).to_vec();
        let mut total = 0.0;
        for i in 1..4 {
            let mut next = vec![0.0; 5];
            next[0] = data.get(i, 0);
            next[4] = data.get(i, 4);
            for j in 1..4 {
                next[j] = 0.5 * (u[j - 1] + u[j + 1]) + c[i - 1] * f(u[j - 1], u[j]) - c[i - 1] * f(u[j], u[j + 1]);
            }
            for &j in &[1usize, 3] {
                total += 0.5 * (next[j] - data.get(i, j)).powi(2);
            }
            u = next;
        }
        let lambda = 0.3;
        let mut reg = 0.0;
        for n in 0..3 {
            reg += 0.5 * (c[n] - c[n + 1]).powi(2) * 6.0;
        }
        let got = cost(&p, &theta, lambda).unwrap();
        assert!((got - (total + lambda * reg)).abs() <= 1e-14, "{got} vs {}", total + lambda * reg);
    }

    #[test]
    fn recovers_self_generated_constant() {
        let spec = SubdivisionSpec::new(2, 2).unwrap();
        let theta0 = 0.7;
        let truth = ControlField::constant(logit_c(theta0).0, 6, 7).unwrap();
        let data = self_generated(6, 7, spec, &truth, SchemeKind::Trm);
        let mut p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Constant, spec);
        p.optimizer.initial_theta = Some(vec![theta0 + 0.5]);
        let r = minimize(&p, Execution::Sequential).unwrap();
        assert!(r.cost <= 1e-10, "{}", r.cost);
        assert!((r.theta_star[0] - theta0).abs() < 1e-3);
        assert!(r.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.lambda, 0.0);
    }

    #[test]
    fn huge_lambda_flattens_the_field() {
        let truth = ControlField::from_fn(ParamMode::Spacetime, 5, 6, |j, n| 0.1 + 0.04 * j as f64 + 0.03 * n as f64).unwrap();
        let data = self_generated(5, 6, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
        let mut p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Spacetime, SubdivisionSpec::default());
        p.lambda = Lambda::Fixed(1e6);
        let r = minimize(&p, Execution::Sequential).unwrap();
        assert!(r.c_star.spread() <= 1e-3, "{}", r.c_star.spread());
    }

    #[test]
    fn mode_nesting_with_warm_starts() {
        let truth = ControlField::from_fn(ParamMode::Spacetime, 6, 7, |j, n| 0.15 + 0.02 * j as f64 + 0.04 * n as f64).unwrap();
        let data = self_generated(6, 7, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
        let mut p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Constant, SubdivisionSpec::default());
        p.lambda = Lambda::Fixed(0.0);
        let constant = minimize(&p, Execution::Sequential).unwrap();
        p.mode = ParamMode::Time;
        p.warm_start = Some(constant.c_star.clone());
        let time = minimize(&p, Execution::Sequential).unwrap();
        p.mode = ParamMode::Spacetime;
        p.warm_start = Some(time.c_star.clone());
        let st = minimize(&p, Execution::Sequential).unwrap();
        assert!(st.cost <= time.cost && time.cost <= constant.cost);
    }

    #[test]
    fn v_m_scales_with_dx() {
        let truth = ControlField::constant(0.3, 5, 6).unwrap();
        let data = self_generated(5, 6, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
        let p = EstimationProblem::new(data.clone(), SchemeKind::Trm, ParamMode::Constant, SubdivisionSpec::default());
        let a = minimize(&p, Execution::Sequential).unwrap();
        let mut g = *data.grid();
        g.dx *= 2.0;
        let p2 = EstimationProblem::new(data.with_grid(g).unwrap(), SchemeKind::Trm, ParamMode::Constant, SubdivisionSpec::default());
        let b = minimize(&p2, Execution::Sequential).unwrap();
        assert_eq!(a.c_star, b.c_star);
        assert_eq!(b.v_m_star[0], 2.0 * a.v_m_star[0]);
    }

    #[test]
    fn fundamental_diagram_examples() {
        assert_eq!(fd_flow(0.0, 3.0, 0.4), 0.0);
        assert!((fd_flow(0.2, 3.0, 0.4) - 3.0 * 0.4 / 4.0).abs() < 1e-15);

        let truth = ControlField::constant(0.3, 5, 6).unwrap();
        let data = self_generated(5, 6, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
        let mut p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Constant, SubdivisionSpec::default());
        p.rho_max = 0.49;
        let r = minimize(&p, Execution::Sequential).unwrap();
        let pts = fundamental_diagram(&r, None);
        assert_eq!(pts.len(), 30);
        let v = r.v_m_star[0];
        for q in &pts {
            assert_eq!(q.flow, fd_flow(q.density, v, 0.49));
        }
    }

    #[test]
    fn bare_step_is_available() {
        let truth = ControlField::constant(logit_c(0.2).0, 5, 6).unwrap();
        let data = self_generated(5, 6, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
        let mut p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Constant, SubdivisionSpec::default());
        p.optimizer.bare_step = true;
        p.optimizer.max_iters = 20;
        let r = minimize(&p, Execution::Sequential).unwrap();
        assert!(r.cost <= r.cost_trace[0]);
    }

    #[test]
    fn rejects_invalid_problems() {
        let grid = Grid::new(3, 5, 1.0, 1.0).unwrap();
        let data = DensityMatrix::constant(grid, 0.3).unwrap();
        let mut p = EstimationProblem::new(data, SchemeKind::Godunov, ParamMode::Constant, SubdivisionSpec::default());
        assert!(matches!(minimize(&p, Execution::Sequential), Err(Error::UnsupportedScheme(_))));
        p.kind = SchemeKind::Trm;
        p.observed_cols = vec![];
        assert!(matches!(minimize(&p, Execution::Sequential), Err(Error::EmptyObservationSet)));
        p.observed_cols = vec![0];
        assert!(minimize(&p, Execution::Sequential).is_err());
    }

    #[test]
    fn lambda_grid_picks_smallest_full_rmse() {
        let truth = ControlField::from_fn(ParamMode::Time, 5, 6, |_, n| 0.1 + 0.05 * n as f64).unwrap();
        let data = self_generated(5, 6, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
        let mut p = EstimationProblem::new(data, SchemeKind::Trm, ParamMode::Time, SubdivisionSpec::default());
        p.lambda = Lambda::Grid(vec![10.0, 0.0, 1.0]);
        let r = minimize(&p, Execution::Parallel).unwrap();
        assert_eq!(r.lambda_trials.len(), 3);
        let min = r.lambda_trials.iter().map(|t| t.rmse_full).fold(f64::INFINITY, f64::min);
        assert_eq!(r.rmse_full, min);
        let seq = minimize(&p, Execution::Sequential).unwrap();
        assert_eq!(seq.theta_star, r.theta_star);
    }

    /// Projected gradient descent directly on `C` in `[lo, hi]` with central
    /// difference gradients and backtracking.
    fn projected_reference(f: impl Fn(&[f64]) -> f64, c0: &[f64], lo: f64, hi: f64) -> f64 {
        let project = |v: f64| v.clamp(lo, hi);
        let mut c = c0.to_vec();
        let mut fc = f(&c);
        let mut alpha = 1.0;
        for _ in 0..20_000 {
            let g: Vec<f64> = (0..c.len())
                .map(|k| {
                    let h = 1e-7;
                    let (mut p, mut m) = (c.clone(), c.clone());
                    p[k] += h;
                    m[k] -= h;
                    (f(&p) - f(&m)) / (2.0 * h)
                })
                .collect();
            let mut moved = false;
            while alpha > 1e-14 {
                let t: Vec<f64> = c.iter().zip(&g).map(|(x, d)| project(x - alpha * d)).collect();
                let ft = f(&t);
                if ft < fc {
                    let shift = t.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    c = t;
                    fc = ft;
                    moved = shift > 1e-13;
                    alpha *= 2.0;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        fc
    }

    #[test]
    fn logit_and_projected_minimizers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cases = [
            (ParamMode::Constant, ControlField::constant(0.3, 6, 7).unwrap(), 0.0),
            (ParamMode::Time, ControlField::from_fn(ParamMode::Time, 5, 6, |_, n| 0.2 + 0.03 * n as f64).unwrap(), 0.05),
            (ParamMode::Space, ControlField::from_fn(ParamMode::Space, 5, 5, |j, _| 0.35 - 0.02 * j as f64).unwrap(), 0.0),
        ];
        for (mode, truth, lambda) in cases {
            let (n_t, n_x) = truth.dims();
            let clean = self_generated(n_t, n_x, SubdivisionSpec::default(), &truth, SchemeKind::Trm);
            let noisy = clean.values().mapv(|v| (v + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0));
            let data = DensityMatrix::new(*clean.grid(), noisy).unwrap();
            let mut p = EstimationProblem::new(data, SchemeKind::Trm, mode, SubdivisionSpec::default());
            p.lambda = Lambda::Fixed(lambda);
            p.optimizer.max_iters = 2000;
            let fit = minimize(&p, Execution::Sequential).unwrap();

            let plan = p.plan().unwrap();
            let obj = Objective::new(&plan, mode, &p.observed_cols, fit.lambda).unwrap();
            let in_c = |c: &[f64]| {
                let theta: Vec<f64> = c.iter().map(|&v| logit_c_inv(v).unwrap()).collect();
                obj.cost(&theta).unwrap()
            };
            let reference = projected_reference(in_c, &vec![0.25; p.param_count()], 0.001, 0.499);
            assert!(
                (fit.cost - reference).abs() <= 1e-6,
                "{mode}: logit {} vs projected {reference}",
                fit.cost
            );
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn cost_trace_never_increases(
                seed in 0u64..10_000,
                mode_k in 0usize..4,
                p_x in 1usize..3,
                lambda in 0.0f64..0.5,
            ) {
                let mode = ParamMode::ALL[mode_k];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let grid = Grid::new(5, 5, 1.0, 1.0).unwrap();
                let data = DensityMatrix::new(grid, Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.05..0.95))).unwrap();
                let spec = SubdivisionSpec::new(2 * p_x, p_x).unwrap();
                let mut p = EstimationProblem::new(data, SchemeKind::Trm, mode, spec);
                p.lambda = Lambda::Fixed(lambda);
                p.optimizer.max_iters = 60;
                p.optimizer.initial_theta = Some((0..p.param_count()).map(|_| rng.gen_range(-2.0..2.0)).collect());
                let plan = p.plan().unwrap();
                let obj = Objective::new(&plan, mode, &p.observed_cols, if mode.is_varying() { lambda } else { 0.0 }).unwrap();
                let out = conjugate_gradient(&obj, p.optimizer.initial_theta.as_ref().unwrap(), &p.optimizer).unwrap();
                for w in out.cost_trace.windows(2) {
                    prop_assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
                }
                prop_assert_eq!(out.cost, *out.cost_trace.last().unwrap());
            }
        }
    }
}
