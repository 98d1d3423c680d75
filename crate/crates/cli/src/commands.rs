use std::path::Path;

use anyhow::Context;
use lwrfit::edie::{edie_grid, edie_matrices, estimate_rho_max, highd_like_fixture, parse_trajectories};
use lwrfit::estimation::{fundamental_diagram, minimize, write_fd_points_csv, EstimationProblem, FdPoint, FdSource};
use lwrfit::gradients::gradcheck as run_gradcheck;
use lwrfit::grid::{minimal_p_t, normalize, read_matrix_csv, write_matrix_csv};
use lwrfit::synth::{generate, rollout_dataset, two_regime_dataset};
use lwrfit::{ControlField, DensityMatrix, Execution, SubdivisionSpec};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{RunConfig, SynthSource};
use crate::{Failure, Outcome, UsageExt};

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).runtime()?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).runtime()
}

/// `density_matrix.csv` for the first grid, plus `density_matrix_<n_t>x<n_x>.csv`
/// for every grid when several are requested.
fn matrix_paths(out: &Path, grids: &[(usize, usize)]) -> Vec<Vec<std::path::PathBuf>> {
    grids
        .iter()
        .enumerate()
        .map(|(k, &(n_t, n_x))| {
            let mut paths = Vec::new();
            if k == 0 {
                paths.push(out.join("density_matrix.csv"));
            }
            if grids.len() > 1 {
                paths.push(out.join(format!("density_matrix_{n_t}x{n_x}.csv")));
            }
            paths
        })
        .collect()
}

pub fn synth(cfg: &RunConfig, out: &Path, exec: Execution) -> Outcome {
    let s = &cfg.synth;
    s.validate().usage()?;
    let grids = &s.reference.grids;

    if s.source == SynthSource::TwoRegime {
        for ((n_t, n_x), paths) in grids.iter().zip(matrix_paths(out, grids)) {
            let (data, control) = two_regime_dataset(*n_t, *n_x).usage()?;
            for p in &paths {
                data.write_csv(p).runtime()?;
            }
            if paths.iter().any(|p| p.ends_with("density_matrix.csv")) {
                write_json(&out.join("true_control.json"), &control)?;
            }
        }
        println!("two-regime dataset written to {}", out.display());
        return Ok(());
    }

    let generated = generate(&s.reference, exec).runtime()?;
    write_matrix_csv(out.join("reference_solution.csv"), &generated.reference_grid, generated.reference.view()).runtime()?;
    for (m, paths) in generated.matrices.iter().zip(matrix_paths(out, grids)) {
        let matrix = match s.source {
            SynthSource::Rollout => {
                let r = &s.rollout;
                let g = m.grid();
                let control = ControlField::constant(r.c, g.n_t, g.n_x).usage()?;
                let spec = SubdivisionSpec::new(r.p_t, r.p_x).usage()?;
                rollout_dataset(m, spec, r.scheme, &control).runtime()?
            }
            _ => m.clone(),
        };
        for p in &paths {
            matrix.write_csv(p).runtime()?;
        }
    }
    let shapes: Vec<String> = grids.iter().map(|(t, x)| format!("{t}x{x}")).collect();
    println!("reference solution and density matrices ({}) written to {}", shapes.join(", "), out.display());
    Ok(())
}

/// Density matrix in `[0, 1]` plus the raw (physical) densities it came from.
fn load_density(cfg: &RunConfig, out: &Path) -> Result<(DensityMatrix, Array2<f64>), Failure> {
    let e = &cfg.estimate;
    let input = e.input.clone().unwrap_or_else(|| out.join("density_matrix.csv"));
    match e.rho_max {
        Some(rho_max) => {
            let (grid, raw) = read_matrix_csv(&input).with_context(|| format!("reading {}", input.display())).runtime()?;
            let (data, report) = normalize(grid, raw.view(), rho_max).runtime()?;
            if report.clamped > 0 {
                log::warn!("{} entries exceeded rho_max and were clamped", report.clamped);
            }
            if report.all_zero {
                log::warn!("every density entry is zero");
            }
            Ok((data, raw))
        }
        None => {
            let data = DensityMatrix::read(&input).with_context(|| format!("reading {}", input.display())).runtime()?;
            let raw = data.values().clone();
            Ok((data, raw))
        }
    }
}

#[derive(Serialize)]
struct ResultDoc<'a> {
    config: &'a RunConfig,
    #[serde(flatten)]
    result: &'a lwrfit::estimation::EstimationResult,
}

pub fn estimate(cfg: &RunConfig, out: &Path, exec: Execution) -> Outcome {
    let e = &cfg.estimate;
    e.validate().usage()?;
    let (data, raw) = load_density(cfg, out)?;
    let grid = *data.grid();
    let p_t = match e.p_t {
        Some(p) => p,
        None => minimal_p_t(&grid, e.p_x, e.v_max).usage()?,
    };
    let spec = SubdivisionSpec::new(p_t, e.p_x).usage()?;
    let mut problem = EstimationProblem::new(data, e.scheme, e.mode, spec);
    problem.observed_cols = e.observed.columns(grid.n_x);
    problem.lambda = e.lambda.clone();
    problem.optimizer = e.optimizer.clone();
    problem.rho_max = e.rho_max.unwrap_or(1.0);
    problem.validate().usage()?;

    let flow = match &e.flow {
        Some(path) => {
            let (fg, flow) = read_matrix_csv(path).with_context(|| format!("reading {}", path.display())).runtime()?;
            if flow.dim() != raw.dim() || fg.n_t != grid.n_t || fg.n_x != grid.n_x {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "flow matrix is {:?}, density matrix is {:?}",
                    flow.dim(),
                    raw.dim()
                )));
            }
            Some(flow)
        }
        None => None,
    };

    let result = minimize(&problem, exec).runtime()?;
    write_json(&out.join("result.json"), &ResultDoc { config: cfg, result: &result })?;
    result.fitted_density().write_csv(out.join("fitted_density.csv")).runtime()?;
    let points = fundamental_diagram(&result, flow.as_ref().map(|f| (&raw, f)));
    write_fd_points_csv(out.join("fd_points.csv"), &points).runtime()?;

    let speeds = if result.mode.is_varying() {
        let lo = result.v_m_star.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = result.v_m_star.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        format!("v_m* mean {:.6} range [{lo:.6}, {hi:.6}] lambda {:.3e}", result.mean_v_m(), result.lambda)
    } else {
        format!("v_m* {:.6}", result.v_m_star[0])
    };
    println!(
        "{} {} p=({},{}) {speeds} rmse {:.6} (observed {:.6}) cost {:.3e} iterations {}{}",
        result.kind,
        result.mode,
        spec.p_t,
        spec.p_x,
        result.rmse_full,
        result.rmse_observed,
        result.cost,
        result.iterations,
        if result.converged { "" } else if result.stalled { " (line search stalled)" } else { " (not converged)" },
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckDoc<'a> {
    config: &'a lwrfit::gradients::GradcheckConfig,
    #[serde(flatten)]
    report: &'a lwrfit::gradients::GradcheckReport,
}

pub fn gradcheck(cfg: &RunConfig, out: &Path, exec: Execution) -> Outcome {
    let g = &cfg.gradcheck;
    for &kind in &g.schemes {
        if !kind.is_differentiable() {
            return Err(Failure::Usage(lwrfit::Error::UnsupportedScheme(kind).into()));
        }
    }
    let report = run_gradcheck(g, exec).usage()?;
    write_json(&out.join("gradcheck.json"), &GradcheckDoc { config: g, report: &report })?;
    for (mode, s) in &report.per_mode {
        println!(
            "{mode:<10} cases {:>4}  fp-fd {:.2e}  bp-fd {:.2e}  fp-bp {:.2e}",
            s.cases, s.max_fp_vs_fd, s.max_bp_vs_fd, s.max_fp_vs_bp
        );
    }
    let failed = report.cases.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} gradient checks exceed the tolerance {:e}",
            report.cases.len(),
            report.tolerance
        )));
    }
    println!("all {} gradient checks passed", report.cases.len());
    Ok(())
}

#[derive(Serialize)]
struct EdieDoc<'a> {
    config: &'a crate::config::EdieSection,
    vehicles: usize,
    dropped: usize,
    grid: lwrfit::Grid,
    rho_max: Option<f64>,
}

pub fn edie(cfg: &RunConfig, out: &Path, exec: Execution) -> Outcome {
    let e = &cfg.edie;
    e.validate().usage()?;
    let grid = edie_grid(e.n_t, e.n_x, e.dt, e.dx, e.t_start, e.x_start).usage()?;
    let mut mapping = e.mapping();
    if e.lanes.is_none() {
        // lengths are only needed for the maximal density
        mapping.length_col = None;
    }
    let trajs = match &e.input {
        Some(path) => parse_trajectories(path, &mapping).runtime()?,
        None if e.mapping.is_none() => highd_like_fixture().runtime()?,
        None => lwrfit::edie::parse_trajectories_str(lwrfit::edie::HIGHD_LIKE_TRACKS, Path::new("highd_like_tracks.csv"), &mapping).runtime()?,
    };
    let rho_max = e.lanes.map(|lanes| estimate_rho_max(&trajs, lanes)).transpose().runtime()?;
    let m = edie_matrices(&trajs, &grid, exec).runtime()?;

    write_matrix_csv(out.join("density.csv"), &grid, m.density.view()).runtime()?;
    write_matrix_csv(out.join("flow.csv"), &grid, m.flow.view()).runtime()?;
    let points: Vec<FdPoint> = m
        .density
        .indexed_iter()
        .map(|((i, j), &rho)| FdPoint {
            source: FdSource::Data,
            i,
            j,
            density: rho,
            flow: m.flow[[i, j]],
            v_m: f64::NAN,
        })
        .collect();
    write_fd_points_csv(out.join("fd_points.csv"), &points).runtime()?;
    write_json(
        &out.join("edie.json"),
        &EdieDoc {
            config: e,
            vehicles: trajs.len(),
            dropped: trajs.dropped,
            grid,
            rho_max,
        },
    )?;

    let rho = rho_max.map_or(String::new(), |r| format!(", rho_max {r:.4} veh/m"));
    println!("{} vehicles on a {}x{} grid{rho}", trajs.len(), grid.n_t, grid.n_x);
    Ok(())
}
