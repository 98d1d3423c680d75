//! Synthetic ground truth: a fine Godunov solution of the normalized LWR
//! equation and its discretization into coarse density matrices, plus
//! datasets generated by the TRM rollout itself.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{restrict, DensityMatrix, Grid, SubdivisionSpec};
use crate::rollout::{run, RolloutPlan};
use crate::schemes::{simulate, Boundary, ControlField, ParamMode, SchemeKind};

/// Initial profile `0.5 exp(-10 x^2) + 0.2 (1 + cos(10 pi x) exp(-(3x^2 + x)))`.
pub fn u0(x: f64) -> f64 {
    0.5 * (-10.0 * x * x).exp() + 0.2 * (1.0 + (10.0 * std::f64::consts::PI * x).cos() * (-(3.0 * x * x + x)).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Speed of the ground truth.
    pub v_bar: f64,
    /// Cell width of the reference solve.
    pub dx: f64,
    /// Reference time step as a fraction of `dx / v_bar`.
    pub dt_factor: f64,
    pub domain: (f64, f64),
    pub crop: (f64, f64),
    pub t_end: f64,
    /// `(n_t, n_x)` of each requested density matrix.
    pub grids: Vec<(usize, usize)>,
    /// Rows kept in the exported reference solution (every `stride`-th step).
    pub reference_stride: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            v_bar: 1.0,
            dx: 1e-3,
            dt_factor: 0.25,
            domain: (-1.5, 1.5),
            crop: (-1.0, 1.0),
            t_end: 1.0,
            grids: vec![(51, 51)],
            reference_stride: 40,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.v_bar > 0.0 && self.v_bar.is_finite()) {
            return bad(format!("v_bar must be positive, got {}", self.v_bar));
        }
        if !(self.dx > 0.0) || !(self.dt_factor > 0.0 && self.dt_factor <= 0.5) {
            return bad(format!("dx = {}, dt_factor = {} (need dx > 0, 0 < dt_factor <= 0.5)", self.dx, self.dt_factor));
        }
        let (a, b) = self.domain;
        let (c, d) = self.crop;
        if !(a < c && c < d && d < b) {
            return bad(format!("crop {:?} must lie strictly inside domain {:?}", self.crop, self.domain));
        }
        if !(self.t_end > 0.0) {
            return bad(format!("t_end = {}", self.t_end));
        }
        if self.grids.is_empty() {
            return bad("no output grids requested".into());
        }
        for &(n_t, n_x) in &self.grids {
            self.data_grid(n_t, n_x)?;
        }
        if self.reference_stride == 0 {
            return bad("reference_stride must be positive".into());
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.dt_factor * self.dx / self.v_bar
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt()).round() as usize
    }

    pub fn reference_grid(&self) -> Result<Grid> {
        let (a, b) = self.domain;
        let n_x = ((b - a) / self.dx).round() as usize;
        let dt = self.t_end / self.steps() as f64;
        Grid::with_origin(self.steps() + 1, n_x, dt, (b - a) / n_x as f64, 0.0, a + 0.5 * (b - a) / n_x as f64)
    }

    /// Data grid with `n_x` cells tiling the crop interval and `n_t` times
    /// spanning `[0, t_end]`.
    pub fn data_grid(&self, n_t: usize, n_x: usize) -> Result<Grid> {
        let (c, d) = self.crop;
        let dx = (d - c) / n_x as f64;
        Grid::with_origin(n_t, n_x, self.t_end / n_t.saturating_sub(1).max(1) as f64, dx, 0.0, c + 0.5 * dx)
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    /// Cropped reference rows every `reference_stride` steps.
    pub reference_grid: Grid,
    pub reference: Array2<f64>,
    pub matrices: Vec<DensityMatrix>,
}

/// Average of `row` (cells of width `dx` starting at `x_start`) over
/// `[lo, hi]`, weighted by overlap length.
fn overlap_mean(row: &[f64], x_start: f64, dx: f64, lo: f64, hi: f64) -> f64 {
    let first = (((lo - x_start) / dx).floor().max(0.0)) as usize;
    let last = (((hi - x_start) / dx).ceil() as usize).min(row.len());
    let mut acc = 0.0;
    for (k, &v) in row.iter().enumerate().take(last).skip(first) {
        let a = x_start + k as f64 * dx;
        let w = (hi.min(a + dx) - lo.max(a)).max(0.0);
        acc += w * v;
    }
    acc / (hi - lo)
}

/// Solves the reference problem and discretizes it onto every requested grid.
pub fn generate(config: &SynthConfig, exec: Execution) -> Result<SynthOutput> {
    config.validate()?;
    let fine = config.reference_grid()?;
    let ic: Vec<f64> = (0..fine.n_x).map(|k| u0(fine.center(k))).collect();
    let steps = config.steps();

    // rows bracketing each requested time
    let mut wanted: BTreeMap<usize, Option<Vec<f64>>> = BTreeMap::new();
    let grids: Vec<Grid> = config
        .grids
        .iter()
        .map(|&(n_t, n_x)| config.data_grid(n_t, n_x))
        .collect::<Result<_>>()?;
    for g in &grids {
        for i in 0..g.n_t {
            let s = g.time(i) / fine.dt;
            let lo = (s.floor() as usize).min(steps);
            wanted.insert(lo, None);
            wanted.insert((lo + 1).min(steps), None);
        }
    }
    let x_start = fine.x0 - 0.5 * fine.dx;
    let (crop_lo, crop_hi) = config.crop;
    let k_lo = ((crop_lo - x_start) / fine.dx).round() as usize;
    let k_hi = ((crop_hi - x_start) / fine.dx).round() as usize;
    let mut reference_rows = Vec::new();
    simulate(SchemeKind::Godunov, &ic, fine.dt / fine.dx * config.v_bar, steps, Boundary::Reflexive, |m, row| {
        if let Some(slot) = wanted.get_mut(&m) {
            *slot = Some(row.to_vec());
        }
        if m % config.reference_stride == 0 {
            reference_rows.push(row[k_lo..k_hi].to_vec());
        }
    })?;
    let rows_at = |t: f64| -> Vec<f64> {
        let s = t / fine.dt;
        let lo = (s.floor() as usize).min(steps);
        let hi = (lo + 1).min(steps);
        let w = (s - lo as f64).clamp(0.0, 1.0);
        let a = wanted[&lo].as_ref().expect("row recorded");
        let b = wanted[&hi].as_ref().expect("row recorded");
        a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
    };
    let matrices = exec
        .map(&grids, |g| {
            let values = Array2::from_shape_fn(g.shape(), |_| 0.0);
            let mut values = values;
            for i in 0..g.n_t {
                let row = rows_at(g.time(i));
                for j in 0..g.n_x {
                    let lo = g.center(j) - 0.5 * g.dx;
                    values[[i, j]] = overlap_mean(&row, x_start, fine.dx, lo, lo + g.dx);
                }
            }
            DensityMatrix::new(*g, values)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n_ref = reference_rows.len();
    let reference = Array2::from_shape_vec(
        (n_ref, k_hi - k_lo),
        reference_rows.into_iter().flatten().collect(),
    )
    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let reference_grid = Grid::with_origin(
        n_ref,
        k_hi - k_lo,
        fine.dt * config.reference_stride as f64,
        fine.dx,
        0.0,
        fine.center(k_lo),
    )?;
    Ok(SynthOutput {
        reference_grid,
        reference,
        matrices,
    })
}

/// Density matrix produced by the rollout itself: initial row and boundary
/// columns come from `base`, interior cells from `control`.
pub fn rollout_dataset(base: &DensityMatrix, spec: SubdivisionSpec, kind: SchemeKind, control: &ControlField) -> Result<DensityMatrix> {
    let plan = RolloutPlan::new(base.clone(), spec, kind)?;
    let fine = run(&plan, control)?;
    DensityMatrix::new(*base.grid(), restrict(fine.view(), spec)?)
}

/// Free flow that turns into congestion: a time-decreasing TRM control
/// with a downstream boundary that fills up in the second half.
///
/// Returns the data and the (time-varying) control that generated it.
pub fn two_regime_dataset(n_t: usize, n_x: usize) -> Result<(DensityMatrix, ControlField)> {
    let grid = Grid::new(n_t, n_x, 1.0, 1.0)?;
    let half = (n_t - 1) as f64 / 2.0;
    let base = Array2::from_shape_fn((n_t, n_x), |(i, j)| {
        let s = (i as f64 - half).max(0.0) / half;
        if j + 1 == n_x {
            0.15 + 0.75 * s
        } else if j == 0 {
            0.3
        } else {
            0.15
        }
    });
    let base = DensityMatrix::new(grid, base)?;
    let control = ControlField::from_fn(ParamMode::Time, n_t, n_x, |_, n| {
        let s = (n as f64 - half).max(0.0) / half;
        0.42 - 0.34 * s
    })?;
    let data = rollout_dataset(&base, SubdivisionSpec::default(), SchemeKind::Trm, &control)?;
    Ok((data, control))
}
