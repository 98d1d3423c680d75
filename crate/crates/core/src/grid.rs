//! Uniform space-time grids, normalized density matrices and the multilevel
//! subdivision that links a data grid to a finer scheme grid.
//!
//! Matrices are stored time-by-space (row `i` is time `t_i`, column `j` is
//! cell `j`); row 0 is the initial time.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values this far outside `[0, 1]` are treated as float drift and clamped.
pub const DOMAIN_TOL: f64 = 1e-12;

/// A uniform grid of `n_t` time stamps and `n_x` cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n_t: usize,
    pub n_x: usize,
    /// Seconds per time step.
    pub dt: f64,
    /// Meters per cell.
    pub dx: f64,
    /// Time of row 0.
    #[serde(default)]
    pub t0: f64,
    /// Center of cell 0.
    #[serde(default)]
    pub x0: f64,
}

impl Grid {
    pub fn new(n_t: usize, n_x: usize, dt: f64, dx: f64) -> Result<Self> {
        Self::with_origin(n_t, n_x, dt, dx, 0.0, 0.0)
    }

    pub fn with_origin(n_t: usize, n_x: usize, dt: f64, dx: f64, t0: f64, x0: f64) -> Result<Self> {
        let grid = Grid {
            n_t,
            n_x,
            dt,
            dx,
            t0,
            x0,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t < 2 {
            return Err(Error::InvalidGrid(format!("n_t = {} (need at least 2)", self.n_t)));
        }
        if self.n_x < 3 {
            return Err(Error::InvalidGrid(format!(
                "n_x = {} (need at least 3 so that one interior cell exists)",
                self.n_x
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidGrid(format!("dt = {}", self.dt)));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::InvalidGrid(format!("dx = {}", self.dx)));
        }
        if !(self.t0.is_finite() && self.x0.is_finite()) {
            return Err(Error::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn center(&self, j: usize) -> f64 {
        self.x0 + j as f64 * self.dx
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_t, self.n_x)
    }

    /// The scheme grid obtained by subdividing every step and every cell.
    pub fn refine(&self, spec: SubdivisionSpec) -> Grid {
        let (n_t, n_x) = spec.fine_shape(self);
        let dx = self.dx / spec.p_x as f64;
        Grid {
            n_t,
            n_x,
            dt: self.dt / spec.p_t as f64,
            dx,
            t0: self.t0,
            x0: self.x0 - 0.5 * self.dx + 0.5 * dx,
        }
    }
}

/// Maximal density and a reference speed used to size time steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadParams {
    /// Vehicles per meter.
    pub rho_max: f64,
    /// Meters per second.
    pub v_ref: f64,
}

impl RoadParams {
    pub fn new(rho_max: f64, v_ref: f64) -> Result<Self> {
        if !(rho_max > 0.0 && rho_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho_max = {rho_max}")));
        }
        if !(v_ref > 0.0 && v_ref.is_finite()) {
            return Err(Error::InvalidArgument(format!("v_ref = {v_ref}")));
        }
        Ok(RoadParams { rho_max, v_ref })
    }
}

/// Number of time (`p_t`) and space (`p_x`) subdivisions of the data grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubdivisionSpec {
    pub p_t: usize,
    pub p_x: usize,
}

impl Default for SubdivisionSpec {
    fn default() -> Self {
        SubdivisionSpec { p_t: 1, p_x: 1 }
    }
}

impl SubdivisionSpec {
    pub fn new(p_t: usize, p_x: usize) -> Result<Self> {
        if p_t == 0 || p_x == 0 {
            return Err(Error::InvalidArgument(format!(
                "subdivisions must be positive (p_t = {p_t}, p_x = {p_x})"
            )));
        }
        Ok(SubdivisionSpec { p_t, p_x })
    }

    /// `(p_t (n_t - 1) + 1, p_x n_x)`.
    pub fn fine_shape(&self, coarse: &Grid) -> (usize, usize) {
        (self.p_t * (coarse.n_t - 1) + 1, self.p_x * coarse.n_x)
    }

    /// Coarse shape matching a fine shape, if the fine shape is compatible.
    pub fn coarse_shape(&self, fine: (usize, usize)) -> Result<(usize, usize)> {
        let (rows, cols) = fine;
        if rows == 0 || (rows - 1) % self.p_t != 0 || cols % self.p_x != 0 {
            return Err(Error::ShapeMismatch(format!(
                "fine shape {rows}x{cols} is incompatible with p_t = {}, p_x = {}",
                self.p_t, self.p_x
            )));
        }
        Ok(((rows - 1) / self.p_t + 1, cols / self.p_x))
    }
}

/// Normalized cell-average densities on a grid, every entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    grid: Grid,
    values: Array2<f64>,
}

impl DensityMatrix {
    /// Entries within [`DOMAIN_TOL`] of `[0, 1]` are clamped; anything
    /// further out is a [`Error::Domain`].
    pub fn new(grid: Grid, mut values: Array2<f64>) -> Result<Self> {
        grid.validate()?;
        if values.dim() != grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "values are {:?}, grid is {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        for v in values.iter_mut() {
            *v = clamp_unit(*v)?;
        }
        Ok(DensityMatrix { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, Array2::from_elem(grid.shape(), value))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Same values, different grid metadata (shape must agree).
    pub fn with_grid(&self, grid: Grid) -> Result<Self> {
        Self::new(grid, self.values.clone())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(path, &self.grid, self.values.view())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (grid, values) = read_matrix_csv(path)?;
        Self::new(grid, values)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MatrixDoc::from_parts(&self.grid, self.values.view()))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MatrixDoc = serde_json::from_str(text)?;
        let (grid, values) = doc.into_parts()?;
        Self::new(grid, values)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Reads `.json` as JSON and anything else as CSV.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_json(path) {
            Self::read_json(path)
        } else {
            Self::read_csv(path)
        }
    }
}

pub(crate) fn clamp_unit(v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else if (-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&v) {
        Ok(v.clamp(0.0, 1.0))
    } else {
        Err(Error::Domain { value: v })
    }
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Outcome of [`normalize`] besides the matrix itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NormalizeReport {
    /// Entries that exceeded `rho_max` and were clamped to 1.
    pub clamped: usize,
    /// Every entry is zero; estimation on such data is degenerate.
    pub all_zero: bool,
}

/// Divides raw densities (vehicles per meter) by `rho_max`.
pub fn normalize(grid: Grid, raw: ArrayView2<f64>, rho_max: f64) -> Result<(DensityMatrix, NormalizeReport)> {
    if !(rho_max > 0.0 && rho_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho_max = {rho_max}")));
    }
    let mut report = NormalizeReport::default();
    let mut values = Array2::zeros(raw.dim());
    for (out, &r) in values.iter_mut().zip(raw.iter()) {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidArgument(format!("raw density {r} is negative or not finite")));
        }
        let u = r / rho_max;
        *out = if u > 1.0 {
            report.clamped += 1;
            1.0
        } else {
            u
        };
    }
    report.all_zero = raw.iter().all(|&r| r == 0.0);
    if report.clamped > 0 {
        log::warn!("{} density entries exceeded rho_max and were clamped", report.clamped);
    }
    if report.all_zero {
        log::warn!("density matrix is identically zero");
    }
    Ok((DensityMatrix::new(grid, values)?, report))
}

/// Averages `p_x` consecutive fine cells of one row into `out`.
pub(crate) fn average_row(fine: &[f64], p_x: usize, out: &mut [f64]) {
    let scale = 1.0 / p_x as f64;
    for (o, chunk) in out.iter_mut().zip(fine.chunks_exact(p_x)) {
        *o = chunk.iter().sum::<f64>() * scale;
    }
}

/// Samples fine rows `i p_t` and averages each group of `p_x` subcells.
pub fn restrict(fine: ArrayView2<f64>, spec: SubdivisionSpec) -> Result<Array2<f64>> {
    let (n_t, n_x) = spec.coarse_shape(fine.dim())?;
    let mut coarse = Array2::zeros((n_t, n_x));
    for i in 0..n_t {
        let row = fine.row(i * spec.p_t);
        let row = row.to_vec();
        let mut out = coarse.row_mut(i);
        average_row(&row, spec.p_x, out.as_slice_mut().expect("contiguous row"));
    }
    Ok(coarse)
}

/// Replicates every coarse cell over its subcells and interpolates linearly
/// in time between coarse rows.
pub fn prolong(coarse: ArrayView2<f64>, spec: SubdivisionSpec) -> Array2<f64> {
    let (n_t, n_x) = coarse.dim();
    let rows = spec.p_t * (n_t.max(1) - 1) + 1;
    let mut fine = Array2::zeros((rows, n_x * spec.p_x));
    for m in 0..rows {
        let n = (m / spec.p_t).min(n_t - 1);
        let l = m - n * spec.p_t;
        let a = l as f64 / spec.p_t as f64;
        for j in 0..n_x {
            let v = if l == 0 {
                coarse[[n, j]]
            } else {
                coarse[[n, j]] + a * (coarse[[n + 1, j]] - coarse[[n, j]])
            };
            for q in 0..spec.p_x {
                fine[[m, j * spec.p_x + q]] = v;
            }
        }
    }
    fine
}

/// Upper bound on `dt/dx` for a maximal speed `v_max`: `1 / (2 v_max)`.
pub fn cfl_max_ratio(v_max: f64) -> f64 {
    1.0 / (2.0 * v_max)
}

/// Smallest `p_t >= 1` with `(dt/dx)(p_x/p_t) <= 1/(2 v_max)`.
pub fn minimal_p_t(grid: &Grid, p_x: usize, v_max: f64) -> Result<usize> {
    if !(v_max > 0.0 && v_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("v_max = {v_max}")));
    }
    if p_x == 0 {
        return Err(Error::InvalidArgument("p_x must be positive".into()));
    }
    let bound = cfl_max_ratio(v_max);
    let ratio = |p_t: usize| grid.dt / grid.dx * (p_x as f64 / p_t as f64);
    let mut p_t = (2.0 * v_max * grid.dt * p_x as f64 / grid.dx).ceil().max(1.0) as usize;
    while ratio(p_t) > bound {
        p_t += 1;
    }
    while p_t > 1 && ratio(p_t - 1) <= bound {
        p_t -= 1;
    }
    Ok(p_t)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixDoc {
    grid: Grid,
    values: Vec<Vec<f64>>,
}

impl MatrixDoc {
    fn from_parts(grid: &Grid, values: ArrayView2<f64>) -> Self {
        MatrixDoc {
            grid: *grid,
            values: values.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn into_parts(self) -> Result<(Grid, Array2<f64>)> {
        let n_t = self.values.len();
        let n_x = self.values.first().map_or(0, Vec::len);
        if self.values.iter().any(|r| r.len() != n_x) {
            return Err(Error::ShapeMismatch("ragged value rows".into()));
        }
        let flat: Vec<f64> = self.values.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((n_t, n_x), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok((self.grid, values))
    }
}

/// JSON `{grid, values}` for an arbitrary grid matrix.
pub fn matrix_to_json(grid: &Grid, values: ArrayView2<f64>) -> Result<String> {
    Ok(serde_json::to_string_pretty(&MatrixDoc::from_parts(grid, values))?)
}

/// Writes `t,<cell centers...>` followed by one row per time stamp. Floats
/// use the shortest representation that round-trips.
pub fn write_matrix_csv(path: impl AsRef<Path>, grid: &Grid, values: ArrayView2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut line = String::from("t");
    for j in 0..values.ncols() {
        write!(line, ",{}", grid.center(j)).unwrap();
    }
    writeln!(w, "{line}")?;
    for (i, row) in values.rows().into_iter().enumerate() {
        line.clear();
        write!(line, "{}", grid.time(i)).unwrap();
        for v in row {
            write!(line, ",{v}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_matrix_csv`]; the grid is recovered from the header
/// and the time column.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(Grid, Array2<f64>)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: display.clone(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(File::open(path)?));
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("t") || header.len() < 2 {
        return Err(parse_err(1, "header must start with `t` followed by cell centers".into()));
    }
    let centers = header
        .iter()
        .skip(1)
        .map(|s| s.parse::<f64>().map_err(|e| parse_err(1, format!("cell center `{s}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let n_x = centers.len();
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != n_x + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", n_x + 1, rec.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            let v = field
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("field `{field}`: {e}")))?;
            if c == 0 {
                times.push(v);
            } else {
                flat.push(v);
            }
        }
    }
    let n_t = times.len();
    if n_t < 2 || n_x < 2 {
        return Err(parse_err(1, format!("matrix {n_t}x{n_x} is too small to infer a grid")));
    }
    let dt = (times[n_t - 1] - times[0]) / (n_t - 1) as f64;
    let dx = (centers[n_x - 1] - centers[0]) / (n_x - 1) as f64;
    let grid = Grid::with_origin(n_t, n_x, dt, dx, times[0], centers[0])?;
    let values = Array2::from_shape_vec((n_t, n_x), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok((grid, values))
}
