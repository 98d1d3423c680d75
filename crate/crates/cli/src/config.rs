//! Run configuration: one section per command, loaded from TOML or JSON and
//! then patched by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use lwrfit::edie::ColumnMapping;
use lwrfit::estimation::{Lambda, OptimizerSettings};
use lwrfit::gradients::GradcheckConfig;
use lwrfit::synth::SynthConfig;
use lwrfit::{ParamMode, SchemeKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub estimate: EstimateSection,
    pub gradcheck: GradcheckConfig,
    pub edie: EdieSection,
}

impl RunConfig {
    /// `.json` files are read as JSON, everything else as TOML.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let is_json = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SynthSource {
    /// Fine Godunov solve of the reference problem.
    #[default]
    Godunov,
    /// The Godunov matrix supplies initial and boundary values, the interior
    /// comes from a rollout with a constant coefficient.
    Rollout,
    /// Free flow followed by congestion, from a time-varying TRM rollout.
    TwoRegime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub scheme: SchemeKind,
    /// Constant interface coefficient, in `(0, 1/2)`.
    pub c: f64,
    pub p_t: usize,
    pub p_x: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            scheme: SchemeKind::Trm,
            c: 0.3,
            p_t: 1,
            p_x: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub source: SynthSource,
    pub reference: SynthConfig,
    pub rollout: RolloutSection,
}

impl SynthSection {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.reference.validate()?;
        if self.source == SynthSource::Rollout {
            let r = &self.rollout;
            if !(r.c > 0.0 && r.c < 0.5) {
                bail!("rollout coefficient c = {} must lie in (0, 1/2)", r.c);
            }
            lwrfit::SubdivisionSpec::new(r.p_t, r.p_x)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservedName {
    /// Every interior column.
    All,
    /// Only column `(n_x - 1) / 2`.
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observed {
    Named(ObservedName),
    Columns(Vec<usize>),
}

impl Default for Observed {
    fn default() -> Self {
        Observed::Named(ObservedName::All)
    }
}

impl Observed {
    pub fn columns(&self, n_x: usize) -> Vec<usize> {
        match self {
            Observed::Named(ObservedName::All) => lwrfit::rollout::interior_columns(n_x),
            Observed::Named(ObservedName::Center) => vec![(n_x - 1) / 2],
            Observed::Columns(c) => c.clone(),
        }
    }
}

impl FromStr for Observed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Observed::Named(ObservedName::All)),
            "center" => Ok(Observed::Named(ObservedName::Center)),
            list => list
                .split(',')
                .map(|c| c.trim().parse::<usize>().map_err(|e| format!("column `{c}`: {e}")))
                .collect::<Result<Vec<_>, _>>()
                .map(Observed::Columns),
        }
    }
}

impl fmt::Display for Observed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observed::Named(ObservedName::All) => f.write_str("all"),
            Observed::Named(ObservedName::Center) => f.write_str("center"),
            Observed::Columns(c) => {
                let parts: Vec<String> = c.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// `auto`, a single weight, or a comma separated list of candidates.
pub fn parse_lambda(s: &str) -> Result<Lambda, String> {
    if s == "auto" {
        return Ok(Lambda::Auto);
    }
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("lambda `{v}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(if values.len() == 1 {
        Lambda::Fixed(values[0])
    } else {
        Lambda::Grid(values)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    /// Density matrix (CSV or JSON). Defaults to `density_matrix.csv` in the
    /// output directory.
    pub input: Option<PathBuf>,
    pub scheme: SchemeKind,
    pub mode: ParamMode,
    pub p_x: usize,
    /// Time subdivisions; the smallest CFL-admissible value when absent.
    pub p_t: Option<usize>,
    /// Speed bound used to pick `p_t`, in grid units.
    pub v_max: f64,
    pub observed: Observed,
    pub lambda: Lambda,
    /// When set the input holds raw densities that are divided by this value.
    pub rho_max: Option<f64>,
    /// Raw flow matrix on the same grid; adds data points to `fd_points.csv`.
    pub flow: Option<PathBuf>,
    pub optimizer: OptimizerSettings,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection {
            input: None,
            scheme: SchemeKind::Trm,
            mode: ParamMode::Constant,
            p_x: 1,
            p_t: None,
            v_max: 1.0,
            observed: Observed::default(),
            lambda: Lambda::Auto,
            rho_max: None,
            flow: None,
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl EstimateSection {
    pub fn validate(&self) -> anyhow::Result<()> {
        if !self.scheme.is_differentiable() {
            return Err(lwrfit::Error::UnsupportedScheme(self.scheme).into());
        }
        if self.scheme == SchemeKind::LaxFriedrichs && self.mode.is_varying() {
            bail!("varying parametrizations are only available with the trm scheme");
        }
        if self.p_x == 0 || self.p_t == Some(0) {
            bail!("subdivisions must be positive");
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            bail!("v_max = {} must be positive", self.v_max);
        }
        if let Some(r) = self.rho_max {
            if !(r > 0.0 && r.is_finite()) {
                bail!("rho_max = {r} must be positive");
            }
        }
        if self.flow.is_some() && self.rho_max.is_none() {
            bail!("a flow matrix needs rho_max so densities can be compared in physical units");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdieSection {
    /// Trajectory CSV; the bundled highD-like fixture when absent.
    pub input: Option<PathBuf>,
    /// Column mapping; highD `tracks.csv` at 5 Hz for the fixture and plain
    /// `id,t,x,length` otherwise.
    pub mapping: Option<ColumnMapping>,
    pub n_t: usize,
    pub n_x: usize,
    /// Seconds.
    pub dt: f64,
    /// Meters.
    pub dx: f64,
    pub t_start: f64,
    pub x_start: f64,
    /// Lane count; when set the maximal density is estimated from vehicle
    /// lengths.
    pub lanes: Option<usize>,
}

impl Default for EdieSection {
    fn default() -> Self {
        EdieSection {
            input: None,
            mapping: None,
            n_t: 60,
            n_x: 11,
            dt: 2.0,
            dx: 400.0 / 11.0,
            t_start: 0.0,
            x_start: 10.0,
            lanes: None,
        }
    }
}

impl EdieSection {
    pub fn mapping(&self) -> ColumnMapping {
        match (&self.mapping, &self.input) {
            (Some(m), _) => m.clone(),
            (None, None) => ColumnMapping::highd(5.0),
            (None, Some(_)) => ColumnMapping::default(),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        lwrfit::edie::edie_grid(self.n_t, self.n_x, self.dt, self.dx, self.t_start, self.x_start)?;
        if self.lanes == Some(0) {
            bail!("lanes must be positive");
        }
        Ok(())
    }
}
