//! Trajectory ingestion and Edie's generalized density and flow.
//!
//! Each cell of the output grid is the space-time rectangle
//! `[t_i - dt/2, t_i + dt/2) x [x_j - dx/2, x_j + dx/2)`. Trajectories are
//! linear between samples and every segment is clipped exactly against the
//! rectangles it crosses.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::Grid;

/// Tracks in the layout of the highD dataset (frames at 5 Hz, vehicle
/// length in the `width` column), two lanes, one travel direction.
pub const HIGHD_LIKE_TRACKS: &str = include_str!("../fixtures/highd_like_tracks.csv");

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Seconds,
    Milliseconds,
    /// Frame indices; needs `frame_rate`.
    Frames,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionUnit {
    #[default]
    Meters,
    Kilometers,
    Feet,
}

impl PositionUnit {
    fn to_meters(self) -> f64 {
        match self {
            PositionUnit::Meters => 1.0,
            PositionUnit::Kilometers => 1000.0,
            PositionUnit::Feet => 0.3048,
        }
    }
}

/// Travel direction along the position axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Increasing,
    Decreasing,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Increasing => 1.0,
            Direction::Decreasing => -1.0,
        }
    }
}

/// Names the CSV columns holding trajectory data and their units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMapping {
    pub id_col: String,
    pub t_col: String,
    pub x_col: String,
    pub length_col: Option<String>,
    pub time_unit: TimeUnit,
    pub frame_rate: Option<f64>,
    pub position_unit: PositionUnit,
    pub direction: Direction,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            id_col: "id".into(),
            t_col: "t".into(),
            x_col: "x".into(),
            length_col: Some("length".into()),
            time_unit: TimeUnit::Seconds,
            frame_rate: None,
            position_unit: PositionUnit::Meters,
            direction: Direction::Increasing,
        }
    }
}

impl ColumnMapping {
    /// Mapping for highD `tracks.csv` files at the given frame rate.
    pub fn highd(frame_rate: f64) -> Self {
        ColumnMapping {
            id_col: "id".into(),
            t_col: "frame".into(),
            x_col: "x".into(),
            length_col: Some("width".into()),
            time_unit: TimeUnit::Frames,
            frame_rate: Some(frame_rate),
            position_unit: PositionUnit::Meters,
            direction: Direction::Increasing,
        }
    }

    fn seconds_per_unit(&self) -> Result<f64> {
        match self.time_unit {
            TimeUnit::Seconds => Ok(1.0),
            TimeUnit::Milliseconds => Ok(1e-3),
            TimeUnit::Frames => match self.frame_rate {
                Some(r) if r > 0.0 && r.is_finite() => Ok(1.0 / r),
                other => Err(Error::InvalidArgument(format!(
                    "time_unit = frames needs a positive frame_rate (got {other:?})"
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: String,
    /// Meters.
    pub length: Option<f64>,
    /// `(t, x)` in seconds and meters, strictly increasing in `t`.
    pub samples: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub vehicles: Vec<Vehicle>,
    pub direction: Direction,
    /// Vehicles discarded for having fewer than two samples.
    pub dropped: usize,
}

impl TrajectorySet {
    /// Builds a set from in-memory vehicles, sorting samples and vehicles.
    pub fn from_vehicles(vehicles: Vec<Vehicle>, direction: Direction) -> Result<Self> {
        let mut kept = Vec::with_capacity(vehicles.len());
        let mut dropped = 0;
        for mut v in vehicles {
            v.samples.sort_by(|a, b| a.0.total_cmp(&b.0));
            if v.samples.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidArgument(format!("vehicle {} has repeated timestamps", v.id)));
            }
            if v.samples.len() < 2 {
                dropped += 1;
            } else {
                kept.push(v);
            }
        }
        kept.sort_by(|a, b| id_key(&a.id).cmp(&id_key(&b.id)));
        Ok(TrajectorySet {
            vehicles: kept,
            direction,
            dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    /// Sum over vehicles of the time spent inside `[t_lo, t_hi] x [x_lo, x_hi]`.
    pub fn time_inside(&self, t_lo: f64, t_hi: f64, x_lo: f64, x_hi: f64) -> f64 {
        let mut total = 0.0;
        for v in &self.vehicles {
            for w in v.samples.windows(2) {
                if let Some((s0, s1)) = clip_segment(w[0], w[1], t_lo, t_hi, x_lo, x_hi) {
                    total += (s1 - s0) * (w[1].0 - w[0].0);
                }
            }
        }
        total
    }
}

fn id_key(id: &str) -> (Option<i64>, &str) {
    (id.parse().ok(), id)
}

fn parse_field(raw: &str, path: &Path, line: u64, col: &str) -> Result<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: line as usize,
        msg: format!("column `{col}`: cannot parse `{raw}` as a number"),
    })
}

/// Reads a trajectory CSV with a header row.
pub fn parse_trajectories(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<TrajectorySet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_trajectories_str(&text, path, mapping)
}

/// As [`parse_trajectories`] on in-memory text; `origin` only labels errors.
pub fn parse_trajectories_str(text: &str, origin: &Path, mapping: &ColumnMapping) -> Result<TrajectorySet> {
    let to_s = mapping.seconds_per_unit()?;
    let to_m = mapping.position_unit.to_meters();
    if text.trim().is_empty() {
        log::warn!("{}: no trajectory rows", origin.display());
        return Ok(TrajectorySet {
            direction: mapping.direction,
            ..Default::default()
        });
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_i = find(&mapping.id_col)?;
    let t_i = find(&mapping.t_col)?;
    let x_i = find(&mapping.x_col)?;
    let len_i = mapping.length_col.as_deref().map(find).transpose()?;

    // (t, x, line, length) per sample
    type Samples = Vec<(f64, f64, u64, Option<f64>)>;
    let mut by_id: BTreeMap<String, Samples> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: usize| {
            record.get(i).ok_or_else(|| Error::Parse {
                path: origin.display().to_string(),
                line: line as usize,
                msg: format!("missing field {}", i + 1),
            })
        };
        let id = get(id_i)?.to_string();
        let t = parse_field(get(t_i)?, origin, line, &mapping.t_col)? * to_s;
        let x = parse_field(get(x_i)?, origin, line, &mapping.x_col)? * to_m;
        let length = match len_i {
            Some(i) => Some(parse_field(get(i)?, origin, line, mapping.length_col.as_deref().unwrap())? * to_m),
            None => None,
        };
        by_id.entry(id).or_default().push((t, x, line, length));
    }

    let mut vehicles = Vec::with_capacity(by_id.len());
    for (id, mut raw) in by_id {
        raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut samples: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for &(t, x, line, _) in &raw {
            match samples.last() {
                Some(&(tp, xp)) if tp == t && xp == x => {}
                Some(&(tp, _)) if tp == t => {
                    return Err(Error::Parse {
                        path: origin.display().to_string(),
                        line: line as usize,
                        msg: format!("vehicle {id} has two positions at t = {t}"),
                    })
                }
                _ => samples.push((t, x)),
            }
        }
        // length of the earliest sample, so row order does not matter
        let length = raw[0].3;
        vehicles.push(Vehicle { id, length, samples });
    }
    let set = TrajectorySet::from_vehicles(vehicles, mapping.direction)?;
    if set.dropped > 0 {
        log::warn!("{}: dropped {} vehicles with fewer than two samples", origin.display(), set.dropped);
    }
    Ok(set)
}

/// Edie density (vehicles per meter) and flow (vehicles per second).
#[derive(Clone, Debug, PartialEq)]
pub struct EdieMatrices {
    pub grid: Grid,
    pub density: Array2<f64>,
    pub flow: Array2<f64>,
}

/// Grid whose cells tile `[t_start, t_start + n_t dt) x [x_start, x_start + n_x dx)`.
///
/// Any positive shape is accepted here; only matrices that feed an
/// estimation need the minimum sizes of [`Grid::validate`].
pub fn edie_grid(n_t: usize, n_x: usize, dt: f64, dx: f64, t_start: f64, x_start: f64) -> Result<Grid> {
    let grid = Grid {
        n_t,
        n_x,
        dt,
        dx,
        t0: t_start + 0.5 * dt,
        x0: x_start + 0.5 * dx,
    };
    check_edie_grid(&grid)?;
    Ok(grid)
}

fn check_edie_grid(g: &Grid) -> Result<()> {
    let finite = [g.dt, g.dx, g.t0, g.x0].iter().all(|v| v.is_finite());
    if g.n_t == 0 || g.n_x == 0 || !(g.dt > 0.0) || !(g.dx > 0.0) || !finite {
        return Err(Error::InvalidGrid(format!(
            "{}x{} cells with dt = {}, dx = {}",
            g.n_t, g.n_x, g.dt, g.dx
        )));
    }
    Ok(())
}

/// Parameter interval `[s0, s1]` of the segment `a -> b` inside the closed
/// rectangle, if it has positive length or the segment is stationary inside
/// the half-open position interval.
pub(crate) fn clip_segment(a: (f64, f64), b: (f64, f64), t_lo: f64, t_hi: f64, x_lo: f64, x_hi: f64) -> Option<(f64, f64)> {
    let (dt, dx) = (b.0 - a.0, b.1 - a.1);
    let mut s0: f64 = 0.0;
    let mut s1: f64 = 1.0;
    for (p, q) in [(-dt, a.0 - t_lo), (dt, t_hi - a.0)] {
        if !clip_edge(p, q, &mut s0, &mut s1) {
            return None;
        }
    }
    if dx == 0.0 {
        if !(a.1 >= x_lo && a.1 < x_hi) {
            return None;
        }
    } else {
        for (p, q) in [(-dx, a.1 - x_lo), (dx, x_hi - a.1)] {
            if !clip_edge(p, q, &mut s0, &mut s1) {
                return None;
            }
        }
    }
    (s1 > s0).then_some((s0, s1))
}

fn clip_edge(p: f64, q: f64, s0: &mut f64, s1: &mut f64) -> bool {
    if p == 0.0 {
        return q >= 0.0;
    }
    let r = q / p;
    if p < 0.0 {
        if r > *s1 {
            return false;
        }
        *s0 = s0.max(r);
    } else {
        if r < *s0 {
            return false;
        }
        *s1 = s1.min(r);
    }
    true
}

const VEHICLES_PER_CHUNK: usize = 32;

fn accumulate(vehicles: &[Vehicle], grid: &Grid, sign: f64) -> (Array2<f64>, Array2<f64>) {
    let (n_t, n_x) = grid.shape();
    let mut time = Array2::zeros((n_t, n_x));
    let mut dist = Array2::zeros((n_t, n_x));
    let t_start = grid.t0 - 0.5 * grid.dt;
    let x_start = grid.x0 - 0.5 * grid.dx;
    let index_range = |lo: f64, hi: f64, start: f64, step: f64, n: usize| {
        let a = ((lo - start) / step).floor().max(0.0) as usize;
        let b = (((hi - start) / step).floor() + 1.0).clamp(0.0, n as f64) as usize;
        a..b
    };
    for v in vehicles {
        for w in v.samples.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (t_min, t_max) = (a.0, b.0);
            let (x_min, x_max) = (a.1.min(b.1), a.1.max(b.1));
            if t_max < t_start || x_max < x_start {
                continue;
            }
            for i in index_range(t_min, t_max, t_start, grid.dt, n_t) {
                let t_lo = t_start + i as f64 * grid.dt;
                for j in index_range(x_min, x_max, x_start, grid.dx, n_x) {
                    let x_lo = x_start + j as f64 * grid.dx;
                    if let Some((s0, s1)) = clip_segment(a, b, t_lo, t_lo + grid.dt, x_lo, x_lo + grid.dx) {
                        time[[i, j]] += (s1 - s0) * (b.0 - a.0);
                        dist[[i, j]] += sign * (s1 - s0) * (b.1 - a.1);
                    }
                }
            }
        }
    }
    (time, dist)
}

/// Density `sum(time) / (dt dx)` and flow `sum(distance) / (dt dx)` per cell.
///
/// Vehicles are processed in fixed-size chunks whose partial sums are added
/// in order, so results do not depend on the execution mode.
pub fn edie_matrices(trajs: &TrajectorySet, grid: &Grid, exec: Execution) -> Result<EdieMatrices> {
    check_edie_grid(grid)?;
    let sign = trajs.direction.sign();
    let partials = exec.map_chunks(&trajs.vehicles, VEHICLES_PER_CHUNK, |chunk| accumulate(chunk, grid, sign));
    let area = grid.dt * grid.dx;
    let mut density = Array2::zeros(grid.shape());
    let mut flow = Array2::zeros(grid.shape());
    for (time, dist) in partials {
        density += &time;
        flow += &dist;
    }
    density /= area;
    flow /= area;
    Ok(EdieMatrices {
        grid: *grid,
        density,
        flow,
    })
}

/// Lanes divided by the mean vehicle length.
pub fn estimate_rho_max(trajs: &TrajectorySet, lanes: usize) -> Result<f64> {
    if lanes == 0 {
        return Err(Error::InvalidArgument("lane count must be positive".into()));
    }
    let lengths: Vec<f64> = trajs
        .vehicles
        .iter()
        .filter_map(|v| v.length)
        .filter(|l| *l > 0.0 && l.is_finite())
        .collect();
    if lengths.is_empty() {
        if !trajs.is_empty() && trajs.vehicles.iter().all(|v| v.length.is_none()) {
            return Err(Error::MissingColumn("vehicle length".into()));
        }
        return Err(Error::NoVehicles);
    }
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    Ok(lanes as f64 / mean)
}

/// Loads [`HIGHD_LIKE_TRACKS`].
pub fn highd_like_fixture() -> Result<TrajectorySet> {
    parse_trajectories_str(HIGHD_LIKE_TRACKS, Path::new("highd_like_tracks.csv"), &ColumnMapping::highd(5.0))
}

/// Vehicles at constant `speed`, entering `x = x_start` every `headway / speed`
/// seconds, sampled every `sample_dt` over `[0, duration]`.
pub fn uniform_fleet(speed: f64, headway: f64, x_start: f64, duration: f64, sample_dt: f64) -> Vec<Vehicle> {
    let gap = headway / speed;
    let steps = (duration / sample_dt).round() as usize;
    let mut vehicles = Vec::new();
    // vehicles already on the road at t = 0 have negative entry times
    let earliest = -(duration * speed / headway).ceil() as i64 - 1;
    for (k, e) in (earliest..).enumerate() {
        let t_enter = e as f64 * gap;
        if t_enter > duration {
            break;
        }
        let samples = (0..=steps)
            .map(|s| {
                let t = s as f64 * sample_dt;
                (t, x_start + speed * (t - t_enter))
            })
            .collect();
        vehicles.push(Vehicle {
            id: k.to_string(),
            length: Some(4.5),
            samples,
        });
    }
    vehicles
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(samples: Vec<(f64, f64)>) -> TrajectorySet {
        TrajectorySet::from_vehicles(
            vec![Vehicle {
                id: "1".into(),
                length: Some(5.0),
                samples,
            }],
            Direction::Increasing,
        )
        .unwrap()
    }

    #[test]
    fn one_vehicle_crossing_one_cell() {
        let (dt, dx, v) = (10.0, 20.0, 4.0);
        let grid = edie_grid(1, 3, dt, dx, 0.0, 0.0).unwrap();
        // crosses cell 1 (x in [20, 40)) between t = 2 and t = 7
        let set = single(vec![(2.0 - 5.0, 20.0 - 5.0 * v), (2.0 + 15.0, 20.0 + 15.0 * v)]);
        let m = edie_matrices(&set, &grid, Execution::Sequential).unwrap();
        assert!((m.density[[0, 1]] - 1.0 / (v * dt)).abs() < 1e-14);
        assert!((m.flow[[0, 1]] - 1.0 / dt).abs() < 1e-14);
    }

    #[test]
    fn parked_vehicles() {
        let grid = edie_grid(2, 2, 5.0, 10.0, 0.0, 0.0).unwrap();
        let vehicles = (0..3)
            .map(|k| Vehicle {
                id: k.to_string(),
                length: None,
                samples: vec![(-1.0, 12.0 + k as f64), (11.0, 12.0 + k as f64)],
            })
            .collect();
        let set = TrajectorySet::from_vehicles(vehicles, Direction::Increasing).unwrap();
        let m = edie_matrices(&set, &grid, Execution::Sequential).unwrap();
        for i in 0..2 {
            assert!((m.density[[i, 1]] - 3.0 / 10.0).abs() < 1e-15);
            assert_eq!(m.density[[i, 0]], 0.0);
            assert_eq!(m.flow[[i, 1]], 0.0);
        }
    }

    #[test]
    fn vehicle_on_a_cell_edge_is_counted_once() {
        let grid = edie_grid(1, 2, 5.0, 10.0, 0.0, 0.0).unwrap();
        let set = single(vec![(0.0, 10.0), (5.0, 10.0)]);
        let m = edie_matrices(&set, &grid, Execution::Sequential).unwrap();
        assert_eq!(m.density.sum() * 50.0, 5.0);
        assert_eq!(m.density[[0, 1]], 0.1);
    }

    #[test]
    fn uniform_fleet_converges_to_steady_state() {
        let (v, h) = (25.0, 200.0);
        let (x_lo, dx) = (100.0, 50.0);
        for dt in [100.0, 1000.0, 10000.0] {
            let fleet = TrajectorySet::from_vehicles(uniform_fleet(v, h, 0.0, dt, 1.0), Direction::Increasing).unwrap();
            let grid = edie_grid(1, 1, dt, dx, 0.0, x_lo).unwrap();
            let m = edie_matrices(&fleet, &grid, Execution::Sequential).unwrap();
            // brute force: each vehicle is in the band for an interval of length dx / v
            let mut time = 0.0;
            for veh in &fleet.vehicles {
                let t_enter = -veh.samples[0].1 / v;
                let (a, b) = (t_enter + x_lo / v, t_enter + (x_lo + dx) / v);
                time += (b.min(dt) - a.max(0.0)).max(0.0);
            }
            assert!((m.density[[0, 0]] - time / (dt * dx)).abs() < 1e-12);
            assert!((m.flow[[0, 0]] - v * time / (dt * dx)).abs() < 1e-10);
            assert!((m.density[[0, 0]] - 1.0 / h).abs() <= 1.0 / (v * dt) + 1e-12, "{dt}");
        }
    }

    #[test]
    fn decreasing_direction_flips_flow_sign_only() {
        let grid = edie_grid(1, 3, 10.0, 20.0, 0.0, 0.0).unwrap();
        let samples = vec![(-10.0, 80.0), (20.0, -40.0)];
        let inc = TrajectorySet::from_vehicles(
            vec![Vehicle { id: "a".into(), length: None, samples: samples.clone() }],
            Direction::Increasing,
        )
        .unwrap();
        let dec = TrajectorySet { direction: Direction::Decreasing, ..inc.clone() };
        let a = edie_matrices(&inc, &grid, Execution::Sequential).unwrap();
        let b = edie_matrices(&dec, &grid, Execution::Sequential).unwrap();
        assert_eq!(a.density, b.density);
        assert_eq!(a.flow, -&b.flow);
        assert!(b.flow.iter().all(|&q| q >= 0.0));
    }

    #[test]
    fn rho_max_examples() {
        let make = |lengths: &[f64]| {
            TrajectorySet::from_vehicles(
                lengths
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| Vehicle {
                        id: k.to_string(),
                        length: Some(l),
                        samples: vec![(0.0, 0.0), (1.0, 1.0)],
                    })
                    .collect(),
                Direction::Increasing,
            )
            .unwrap()
        };
        assert!((estimate_rho_max(&make(&[5.0, 5.0, 5.0]), 1).unwrap() - 0.2).abs() < 1e-15);
        assert!((estimate_rho_max(&make(&[4.0, 6.0]), 2).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(estimate_rho_max(&make(&[]), 1), Err(Error::NoVehicles)));
        let fixture = highd_like_fixture().unwrap();
        assert_eq!(fixture.dropped, 0);
        let rho = estimate_rho_max(&fixture, 2).unwrap();
        assert_eq!(format!("{rho:.3}"), "0.490");
    }

    const TWO_BY_THREE: &str = "id,t,x,length\n1,0,0,4\n1,1,10,4\n1,2,20,4\n2,0,5,6\n2,1,15,6\n2,2,25,6\n";

    #[test]
    fn parses_hand_fixture() {
        let set = parse_trajectories_str(TWO_BY_THREE, Path::new("mem"), &ColumnMapping::default()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.vehicles[0].samples, vec![(0.0, 0.0), (1.0, 10.0), (2.0, 20.0)]);
        assert_eq!(set.vehicles[1].length, Some(6.0));

        let mut lines: Vec<&str> = TWO_BY_THREE.lines().skip(1).collect();
        lines.reverse();
        lines.swap(0, 3);
        let shuffled = format!("id,t,x,length\n{}\n", lines.join("\n"));
        assert_eq!(parse_trajectories_str(&shuffled, Path::new("mem"), &ColumnMapping::default()).unwrap(), set);
    }

    #[test]
    fn parse_edge_cases() {
        let m = ColumnMapping::default();
        let empty = parse_trajectories_str("", Path::new("mem"), &m).unwrap();
        assert!(empty.is_empty());

        let short = parse_trajectories_str("id,t,x,length\n1,0,0,4\n2,0,0,4\n2,1,3,4\n", Path::new("mem"), &m).unwrap();
        assert_eq!((short.len(), short.dropped), (1, 1));

        let err = parse_trajectories_str("id,t,x\n1,0,0\n", Path::new("mem"), &m).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "length"));

        let err = parse_trajectories_str("id,t,x,length\n1,0,0,4\n1,zz,3,4\n", Path::new("f.csv"), &m).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");

        let frames = ColumnMapping {
            t_col: "frame".into(),
            time_unit: TimeUnit::Frames,
            frame_rate: Some(25.0),
            position_unit: PositionUnit::Kilometers,
            length_col: None,
            ..Default::default()
        };
        let set = parse_trajectories_str("id,frame,x\n7,50,1.5\n7,75,1.6\n", Path::new("mem"), &frames).unwrap();
        assert_eq!(set.vehicles[0].samples, vec![(2.0, 1500.0), (3.0, 1600.0)]);
        assert_eq!(set.vehicles[0].length, None);
        assert!(matches!(estimate_rho_max(&set, 1), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn fixture_matrices_have_requested_shape() {
        let set = highd_like_fixture().unwrap();
        let grid = edie_grid(60, 11, 2.0, 400.0 / 11.0, 0.0, 10.0).unwrap();
        let seq = edie_matrices(&set, &grid, Execution::Sequential).unwrap();
        let par = edie_matrices(&set, &grid, Execution::Parallel).unwrap();
        assert_eq!(seq.density.dim(), (60, 11));
        assert_eq!(seq, par);
        assert!(seq.density.iter().all(|&d| d >= 0.0) && seq.flow.iter().all(|&q| q >= 0.0));
    }

    fn random_vehicle() -> impl Strategy<Value = Vec<(f64, f64)>> {
        (
            -20.0f64..50.0,
            -100.0f64..300.0,
            prop::collection::vec((0.1f64..8.0, -5.0f64..40.0), 1..12),
        )
            .prop_map(|(t0, x0, steps)| {
                let mut s = vec![(t0, x0)];
                for (dt, v) in steps {
                    let &(t, x) = s.last().unwrap();
                    s.push((t + dt, x + v * dt));
                }
                s
            })
    }

    proptest! {
        #[test]
        fn clipping_conserves_time(trajs in prop::collection::vec(random_vehicle(), 1..6)) {
            let vehicles = trajs.into_iter().enumerate().map(|(k, samples)| Vehicle { id: k.to_string(), length: None, samples }).collect();
            let set = TrajectorySet::from_vehicles(vehicles, Direction::Increasing).unwrap();
            let grid = edie_grid(7, 9, 5.0, 25.0, -5.0, 0.0).unwrap();
            let m = edie_matrices(&set, &grid, Execution::Sequential).unwrap();
            let inside = set.time_inside(-5.0, 30.0, 0.0, 225.0);
            prop_assert!((m.density.sum() * 125.0 - inside).abs() <= 1e-10 * (1.0 + inside));
        }

        #[test]
        fn density_is_additive(trajs in prop::collection::vec(random_vehicle(), 1..6)) {
            let vehicles = trajs.into_iter().enumerate().map(|(k, samples)| Vehicle { id: k.to_string(), length: None, samples }).collect();
            let set = TrajectorySet::from_vehicles(vehicles, Direction::Increasing).unwrap();
            let fine = edie_matrices(&set, &edie_grid(6, 8, 2.5, 12.5, 0.0, 0.0).unwrap(), Execution::Sequential).unwrap();
            let coarse = edie_matrices(&set, &edie_grid(3, 4, 5.0, 25.0, 0.0, 0.0).unwrap(), Execution::Sequential).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    let mean = (0..2).flat_map(|a| (0..2).map(move |b| (a, b)))
                        .map(|(a, b)| fine.density[[2 * i + a, 2 * j + b]]).sum::<f64>() / 4.0;
                    prop_assert!((mean - coarse.density[[i, j]]).abs() <= 1e-10);
                    let qmean = (0..2).flat_map(|a| (0..2).map(move |b| (a, b)))
                        .map(|(a, b)| fine.flow[[2 * i + a, 2 * j + b]]).sum::<f64>() / 4.0;
                    prop_assert!((qmean - coarse.flow[[i, j]]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn flow_over_density_is_speed(v in 1.0f64..40.0, h in 20.0f64..300.0, x0 in -50.0f64..50.0) {
            let fleet = TrajectorySet::from_vehicles(uniform_fleet(v, h, x0, 60.0, 0.7), Direction::Increasing).unwrap();
            let m = edie_matrices(&fleet, &edie_grid(5, 6, 10.0, 30.0, 0.0, 0.0).unwrap(), Execution::Sequential).unwrap();
            for (d, q) in m.density.iter().zip(m.flow.iter()) {
                if *d > 0.0 {
                    prop_assert!((q / d - v).abs() <= 1e-8);
                }
            }
        }
    }
}
