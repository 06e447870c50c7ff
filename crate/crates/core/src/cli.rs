//! Scenario files, initial-state construction, CSV persistence and the
//! command-line front end.
//!
//! Trajectory CSV columns, one row per (sample, agent):
//! `t, agent, species, x_0..x_{d-1}, v_0..v_{d-1}, O_0_0..O_{d-1}_{d-1}, W_0_0..W_{d-1}_{d-1}`
//! with matrices row-major. Diagnostics CSV columns are [`DiagnosticsRow::COLUMNS`].
//! Every float is written with 17 significant digits.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{
    default_fit_window, diameter_rotations, fit_decay_rate, lohe_diameter_bound, predicted_rate_order1,
    predicted_rate_order2, DiagnosticsRow,
};
use crate::dynamics::{ModelParams, Variant};
use crate::ensemble::{AgentState, EnsembleState, Point, ReferenceShape, VertexCloud};
use crate::integrate::{integrate, IntegrateError, IntegrationSettings, Trajectory};
use crate::matso::{project_to_rotation, random_rotation_with, random_skew_with, Matrix, Rotation, SkewMatrix};

/// Allowed energy increase between consecutive samples before it counts as a violation.
pub const ENERGY_SLACK: f64 = 1e-10;
/// Allowed excess over the first-order rotation-diameter bound.
pub const BOUND_SLACK: f64 = 1e-8;
/// Bisection steps used to meet a rotation-spread cap.
const SPREAD_BISECTIONS: usize = 60;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    /// Dotted path to the offending key (`.` for the document root).
    pub path: String,
    pub message: String,
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.to_owned(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(alias = "kappa1")]
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa2: Option<f64>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub rest_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeSpec {
    /// Regular polygon in the first two coordinates.
    RegularPolygon { vertices: usize, circumradius: f64 },
    /// `d + 1` equidistant vertices spanning all of R^d.
    RegularSimplex { circumradius: f64 },
    /// Vertex coordinates; the centroid is subtracted.
    Explicit { vertices: Vec<Vec<f64>> },
}

impl ShapeSpec {
    pub fn build(&self, d: usize) -> Result<ReferenceShape, String> {
        let points: Vec<Point> = match *self {
            ShapeSpec::RegularPolygon { vertices, circumradius } => {
                if d < 2 {
                    return Err(format!("a polygon needs d >= 2, got d = {d}"));
                }
                if vertices < 3 {
                    return Err(format!("a polygon needs at least 3 vertices, got {vertices}"));
                }
                check_radius(circumradius)?;
                (0..vertices)
                    .map(|k| {
                        let phi = std::f64::consts::TAU * k as f64 / vertices as f64;
                        let mut p = Point::zeros(d);
                        p[0] = circumradius * phi.cos();
                        p[1] = circumradius * phi.sin();
                        p
                    })
                    .collect()
            }
            ShapeSpec::RegularSimplex { circumradius } => {
                check_radius(circumradius)?;
                regular_simplex(d, circumradius)
            }
            ShapeSpec::Explicit { ref vertices } => {
                if let Some(bad) = vertices.iter().find(|v| v.len() != d) {
                    return Err(format!("vertex has {} coordinates, expected {d}", bad.len()));
                }
                vertices.iter().map(|v| Point::from_column_slice(v)).collect()
            }
        };
        ReferenceShape::from_vertices(&VertexCloud::new(points)).map_err(|e| e.to_string())
    }
}

fn check_radius(r: f64) -> Result<(), String> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(format!("circumradius must be positive, got {r}"))
    }
}

/// Vertices of the regular simplex in R^d with the given circumradius, via the
/// Helmert basis of the sum-zero hyperplane in R^{d+1}.
fn regular_simplex(d: usize, circumradius: f64) -> Vec<Point> {
    let norm = (d as f64 / (d as f64 + 1.0)).sqrt();
    (0..=d)
        .map(|j| {
            Point::from_fn(d, |row, _| {
                let k = row + 1;
                let h = if j < k {
                    1.0
                } else if j == k {
                    -(k as f64)
                } else {
                    0.0
                };
                circumradius * h / ((k * (k + 1)) as f64).sqrt() / norm
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub seed: u64,
    #[serde(default = "InitConfig::default_box")]
    pub box_half_width: f64,
    #[serde(default = "InitConfig::default_speed")]
    pub speed_scale: f64,
    #[serde(default = "InitConfig::default_speed")]
    pub angular_speed_scale: f64,
    /// Upper bound on the initial Frobenius rotation diameter of each species.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread_cap: Option<f64>,
}

impl InitConfig {
    fn default_box() -> f64 {
        2.0
    }

    fn default_speed() -> f64 {
        0.5
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            box_half_width: Self::default_box(),
            speed_scale: Self::default_speed(),
            angular_speed_scale: Self::default_speed(),
            spread_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub trajectory: PathBuf,
    pub diagnostics: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trajectory: "trajectory.csv".into(),
            diagnostics: "diagnostics.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub model: Variant,
    pub d: usize,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "N1", default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<usize>,
    #[serde(rename = "N2", default, skip_serializing_if = "Option::is_none")]
    pub n2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
    pub params: ParamsConfig,
    pub shape: ShapeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape2: Option<ShapeSpec>,
    pub init: InitConfig,
    #[serde(default)]
    pub integration: IntegrationSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Parses and validates a TOML scenario, filling `params.m`/`params.gamma` defaults.
pub fn parse_config(document: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = toml::Deserializer::parse(document).map_err(|e| invalid(".", e.message()))?;
    let mut config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        invalid(&path, e.into_inner().message())
    })?;
    config.fill_defaults();
    config.validate()?;
    Ok(config)
}

pub fn to_toml(config: &ScenarioConfig) -> String {
    toml::to_string(config).expect("scenario configs always serialise")
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        context: path.display().to_string(),
        source,
    })?;
    parse_config(&text).map_err(CliError::Config)
}

impl ScenarioConfig {
    pub fn fill_defaults(&mut self) {
        let (m, gamma) = match self.model {
            Variant::Order1 => (0.0, 1.0),
            _ => (1.0, 1.0),
        };
        self.params.m.get_or_insert(m);
        self.params.gamma.get_or_insert(gamma);
    }

    /// Agents per species.
    pub fn counts(&self) -> Vec<usize> {
        match self.model {
            Variant::Hetero => vec![self.n1.unwrap_or(0), self.n2.unwrap_or(0)],
            _ => vec![self.n.unwrap_or(0)],
        }
    }

    pub fn shapes(&self) -> Result<Vec<ReferenceShape>, ConfigError> {
        let mut shapes = vec![self.shape.build(self.d).map_err(|m| invalid("shape", m))?];
        if self.model == Variant::Hetero {
            let second = self.shape2.as_ref().ok_or_else(|| invalid("shape2", "required by the hetero model"))?;
            shapes.push(second.build(self.d).map_err(|m| invalid("shape2", m))?);
        }
        Ok(shapes)
    }

    pub fn model_params(&self) -> ModelParams {
        let p = &self.params;
        ModelParams {
            m: p.m.unwrap_or(1.0),
            gamma: p.gamma.unwrap_or(1.0),
            kappa: p.kappa,
            kappa2: p.kappa2.unwrap_or(0.0),
            rest_length: p.rest_length.unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 {
            return Err(invalid("d", "dimension must be at least 1"));
        }
        let hetero = self.model == Variant::Hetero;
        let forbid = |present: bool, path: &str| {
            if present {
                Err(invalid(path, format!("not used by the {} model", self.model)))
            } else {
                Ok(())
            }
        };
        let count = |value: Option<usize>, path: &str| match value {
            None => Err(invalid(path, format!("required by the {} model", self.model))),
            Some(0) => Err(invalid(path, "agent count must be positive")),
            Some(_) => Ok(()),
        };
        if hetero {
            forbid(self.n.is_some(), "N")?;
            count(self.n1, "N1")?;
            count(self.n2, "N2")?;
            if self.shape2.is_none() {
                return Err(invalid("shape2", "required by the hetero model"));
            }
        } else {
            count(self.n, "N")?;
            forbid(self.n1.is_some(), "N1")?;
            forbid(self.n2.is_some(), "N2")?;
            forbid(self.shape2.is_some(), "shape2")?;
        }

        match (self.model, &self.scales) {
            (Variant::Similar, None) => return Err(invalid("scales", "required by the similar model")),
            (Variant::Similar, Some(scales)) => {
                let n = self.n.unwrap_or(0);
                if scales.len() != n {
                    return Err(invalid("scales", format!("expected {n} scales, got {}", scales.len())));
                }
                if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                    return Err(invalid("scales", format!("scales must be positive, got {s}")));
                }
            }
            (_, scales) => forbid(scales.is_some(), "scales")?,
        }

        let p = &self.params;
        let nonneg = |value: f64, path: &str| {
            if value >= 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(invalid(path, format!("must be non-negative, got {value}")))
            }
        };
        nonneg(p.kappa, "params.kappa")?;
        let m = p.m.unwrap_or(0.0);
        let gamma = p.gamma.unwrap_or(1.0);
        nonneg(m, "params.m")?;
        nonneg(gamma, "params.gamma")?;
        if self.model == Variant::Order1 {
            if m != 0.0 {
                return Err(invalid("params.m", "the order1 model has no inertia (m = 0)"));
            }
            if gamma != 1.0 {
                return Err(invalid("params.gamma", "the order1 model is normalised to gamma = 1"));
            }
        } else if m <= 0.0 {
            return Err(invalid("params.m", format!("the {} model needs m > 0", self.model)));
        }
        if hetero {
            let k2 = p.kappa2.ok_or_else(|| invalid("params.kappa2", "required by the hetero model"))?;
            nonneg(k2, "params.kappa2")?;
            let l = p.rest_length.ok_or_else(|| invalid("params.L", "required by the hetero model"))?;
            if !(l > 0.0 && l.is_finite()) {
                return Err(invalid("params.L", format!("rest length must be positive, got {l}")));
            }
        } else {
            forbid(p.kappa2.is_some(), "params.kappa2")?;
            forbid(p.rest_length.is_some(), "params.L")?;
        }

        let init = &self.init;
        nonneg(init.box_half_width, "init.box_half_width")?;
        nonneg(init.speed_scale, "init.speed_scale")?;
        nonneg(init.angular_speed_scale, "init.angular_speed_scale")?;
        if let Some(cap) = init.spread_cap {
            if !(cap >= 0.0) {
                return Err(invalid("init.spread_cap", format!("unreachable rotation-spread cap {cap}")));
            }
            if self.model == Variant::Order1 && cap >= 1.0 {
                return Err(invalid(
                    "init.spread_cap",
                    format!("first-order runs need a spread cap below 1, got {cap}"),
                ));
            }
        }

        self.integration.validate().map_err(|e| invalid("integration", e.to_string()))?;
        self.shapes()?;
        Ok(())
    }
}

/// Initial ensemble: box-uniform centroids, Gaussian velocities, Haar rotations
/// (optionally contracted toward each species' first rotation) and Gaussian skew W.
pub fn build_initial(config: &ScenarioConfig) -> Result<EnsembleState, ConfigError> {
    config.validate()?;
    let d = config.d;
    let shapes = config.shapes()?;
    let init = &config.init;
    let first_order = config.model == Variant::Order1;
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let mut agents = Vec::new();
    let mut species = Vec::new();
    for (s, &n) in config.counts().iter().enumerate() {
        let start = agents.len();
        for _ in 0..n {
            let half = init.box_half_width;
            let centroid = Point::from_fn(d, |_, _| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 });
            let velocity = Point::from_fn(d, |_, _| init.speed_scale * rng.sample::<f64, _>(StandardNormal));
            let rotation = random_rotation_with(&mut rng, d);
            let angular = random_skew_with(&mut rng, d, init.angular_speed_scale);
            let still = first_order || init.angular_speed_scale == 0.0;
            agents.push(AgentState {
                velocity: if first_order { Point::zeros(d) } else { velocity },
                angular: if still { SkewMatrix::zeros(d) } else { angular },
                ..AgentState::at_rest(centroid, rotation)
            });
            species.push(s);
        }
        if let Some(cap) = init.spread_cap {
            contract_rotations(&mut agents[start..], cap);
        }
    }
    if let Some(scales) = &config.scales {
        for (a, &s) in agents.iter_mut().zip(scales) {
            a.scale = s;
        }
    }
    EnsembleState::with_species(agents, species, shapes).map_err(|e| invalid("init", e.to_string()))
}

/// Replaces `O^i` by `P((1−λ)O^1 + λO^i)` with the largest λ found by bisection
/// for which the rotation diameter stays within `cap`.
fn contract_rotations(agents: &mut [AgentState], cap: f64) {
    let Some(anchor) = agents.first().map(|a| a.rotation.clone()) else {
        return;
    };
    let originals: Vec<Matrix> = agents.iter().map(|a| a.rotation.as_matrix().clone()).collect();
    let blend = |lambda: f64| -> Option<Vec<Rotation>> {
        originals
            .iter()
            .enumerate()
            .map(|(i, o)| {
                if i == 0 || lambda == 0.0 {
                    Some(anchor.clone())
                } else {
                    project_to_rotation(&(anchor.as_matrix() * (1.0 - lambda) + o * lambda)).ok()
                }
            })
            .collect()
    };
    let feasible = |lambda: f64| blend(lambda).filter(|r| diameter_rotations(r) <= cap);
    if feasible(1.0).is_some() {
        return;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = blend(0.0).expect("λ = 0 needs no projection");
    for _ in 0..SPREAD_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        match feasible(mid) {
            Some(r) => {
                lo = mid;
                best = r;
            }
            None => hi = mid,
        }
    }
    for (a, r) in agents.iter_mut().zip(best) {
        a.rotation = r;
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trajectory_header(d: usize) -> String {
    let mut cols = vec!["t".to_owned(), "agent".to_owned(), "species".to_owned()];
    cols.extend((0..d).map(|k| format!("x_{k}")));
    cols.extend((0..d).map(|k| format!("v_{k}")));
    for name in ["O", "W"] {
        for i in 0..d {
            cols.extend((0..d).map(|j| format!("{name}_{i}_{j}")));
        }
    }
    cols.join(",")
}

pub fn write_trajectory<W: Write>(out: &mut W, trajectory: &Trajectory) -> io::Result<()> {
    let d = trajectory.first().state.dim();
    writeln!(out, "{}", trajectory_header(d))?;
    for sample in &trajectory.samples {
        let state = &sample.state;
        for (i, a) in state.agents().iter().enumerate() {
            let mut fields = vec![num(sample.t), i.to_string(), state.species()[i].to_string()];
            fields.extend(a.centroid.iter().map(|&x| num(x)));
            fields.extend(a.velocity.iter().map(|&x| num(x)));
            for m in [a.rotation.as_matrix(), a.angular.as_matrix()] {
                for r in 0..d {
                    fields.extend((0..d).map(|c| num(m[(r, c)])));
                }
            }
            writeln!(out, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

pub fn write_diagnostics<W: Write>(out: &mut W, rows: &[DiagnosticsRow]) -> io::Result<()> {
    writeln!(out, "{}", DiagnosticsRow::COLUMNS.join(","))?;
    for row in rows {
        let fields: Vec<String> = row.values().iter().map(|&x| num(x)).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn read_diagnostics<R: BufRead>(input: R) -> Result<Vec<DiagnosticsRow>, String> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or("empty diagnostics file")?
        .map_err(|e| e.to_string())?;
    let names: Vec<&str> = header.trim().split(',').collect();
    let index: Vec<usize> = DiagnosticsRow::COLUMNS
        .iter()
        .map(|col| {
            names
                .iter()
                .position(|n| n == col)
                .ok_or_else(|| format!("missing column {col}"))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        let mut values = [0.0; 8];
        for (slot, &col) in values.iter_mut().zip(&index) {
            let raw = fields
                .get(col)
                .ok_or_else(|| format!("line {}: too few fields", lineno + 2))?;
            *slot = raw
                .parse()
                .map_err(|e| format!("line {}: bad number {raw:?}: {e}", lineno + 2))?;
        }
        rows.push(DiagnosticsRow::from_values(values));
    }
    Ok(rows)
}

/// Terminal values, fitted rates and bound checks for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub t_final: f64,
    pub terminal: DiagnosticsRow,
    pub centroid_rate: Option<f64>,
    pub rotation_rate: Option<f64>,
    pub predicted_rate: Option<f64>,
    /// Consecutive samples whose energy rose by more than [`ENERGY_SLACK`].
    pub energy_increases: usize,
    /// Samples above the first-order rotation-diameter bound; `None` when it does not apply.
    pub bound_violations: Option<usize>,
    pub max_ortho_drift: f64,
    pub max_rigidity_error: f64,
}

pub fn summarize(rows: &[DiagnosticsRow], model: Option<(Variant, &ModelParams)>) -> Option<Summary> {
    let terminal = *rows.last()?;
    let window = default_fit_window(terminal.t);
    let fit = |f: fn(&DiagnosticsRow) -> f64| {
        let series: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, f(r))).collect();
        fit_decay_rate(&series, window).ok()
    };
    let predicted_rate = match model {
        Some((Variant::Order2, p)) => predicted_rate_order2(p).ok(),
        Some((Variant::Order1, p)) => predicted_rate_order1(p.kappa, p.gamma).ok(),
        _ => None,
    };
    let bound_violations = match model {
        Some((Variant::Order1, p)) if rows[0].diam_rotation < 1.0 => {
            let d0 = rows[0].diam_rotation;
            Some(
                rows.iter()
                    .filter(|r| {
                        lohe_diameter_bound(d0, p.kappa, r.t).is_ok_and(|b| r.diam_rotation > b + BOUND_SLACK)
                    })
                    .count(),
            )
        }
        _ => None,
    };
    Some(Summary {
        samples: rows.len(),
        t_final: terminal.t,
        terminal,
        centroid_rate: fit(|r| r.diam_centroid),
        rotation_rate: fit(|r| r.diam_rotation),
        predicted_rate,
        energy_increases: rows.windows(2).filter(|w| w[1].energy > w[0].energy + ENERGY_SLACK).count(),
        bound_violations,
        max_ortho_drift: rows.iter().map(|r| r.ortho_drift).fold(0.0, f64::max),
        max_rigidity_error: rows.iter().map(|r| r.rigidity_error).fold(0.0, f64::max),
    })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.6}"));
        writeln!(f, "samples                {} (t_final = {})", self.samples, self.t_final)?;
        writeln!(f, "terminal residual      {:.6e}", self.terminal.residual)?;
        writeln!(f, "terminal D(centroids)  {:.6e}", self.terminal.diam_centroid)?;
        writeln!(f, "terminal D(rotations)  {:.6e}", self.terminal.diam_rotation)?;
        writeln!(
            f,
            "fitted rates           centroids {}, rotations {}, predicted {}",
            opt(self.centroid_rate),
            opt(self.rotation_rate),
            opt(self.predicted_rate)
        )?;
        writeln!(f, "energy increases       {}", self.energy_increases)?;
        match self.bound_violations {
            Some(n) => writeln!(f, "bound violations       {n}")?,
            None => writeln!(f, "bound violations       n/a")?,
        }
        writeln!(f, "max orthogonality drift {:.3e}", self.max_ortho_drift)?;
        write!(f, "max rigidity error     {:.3e}", self.max_rigidity_error)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("integration aborted: {0}")]
    Integration(#[from] IntegrateError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Integration(_) => 2,
            _ => 1,
        }
    }
}

pub struct RunOutput {
    pub trajectory: Trajectory,
    pub summary: Summary,
    pub trajectory_path: PathBuf,
    pub diagnostics_path: PathBuf,
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
    let io_err = |source| CliError::Io {
        context: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    body(&mut out).and_then(|_| out.flush()).map_err(io_err)
}

/// Builds the initial state, integrates, and writes both CSV files under `out_dir`.
pub fn run(config: &ScenarioConfig, out_dir: &Path) -> Result<RunOutput, CliError> {
    let initial = build_initial(config)?;
    let params = config.model_params();
    let trajectory = integrate(&initial, &params, config.model, &config.integration)?;
    let rows = trajectory.rows();
    let summary = summarize(&rows, Some((config.model, &params))).expect("trajectory has samples");
    let trajectory_path = out_dir.join(&config.output.trajectory);
    let diagnostics_path = out_dir.join(&config.output.diagnostics);
    write_file(&trajectory_path, |w| write_trajectory(w, &trajectory))?;
    write_file(&diagnostics_path, |w| write_diagnostics(w, &rows))?;
    Ok(RunOutput {
        trajectory,
        summary,
        trajectory_path,
        diagnostics_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Demo {
    CongruentTriangles,
    SimilarTriangles,
    HeteroMix,
}

/// Reference scenarios: five agents per species, m = γ = κ = 1.
pub fn demo_config(demo: Demo) -> ScenarioConfig {
    let triangle = ShapeSpec::RegularPolygon {
        vertices: 3,
        circumradius: 1.0,
    };
    let unit = ParamsConfig {
        m: Some(1.0),
        gamma: Some(1.0),
        kappa: 1.0,
        kappa2: None,
        rest_length: None,
    };
    let base = ScenarioConfig {
        name: None,
        model: Variant::Order2,
        d: 2,
        n: Some(5),
        n1: None,
        n2: None,
        scales: None,
        params: unit.clone(),
        shape: triangle.clone(),
        shape2: None,
        init: InitConfig::with_seed(1),
        integration: IntegrationSettings::default(),
        output: OutputConfig::default(),
    };
    match demo {
        Demo::CongruentTriangles => ScenarioConfig {
            name: Some("congruent-triangles".into()),
            ..base
        },
        Demo::SimilarTriangles => ScenarioConfig {
            name: Some("similar-triangles".into()),
            model: Variant::Similar,
            scales: Some(vec![1.0, 1.5, 0.75, 2.0, 1.25]),
            ..base
        },
        Demo::HeteroMix => ScenarioConfig {
            name: Some("hetero-mix".into()),
            model: Variant::Hetero,
            d: 3,
            n: None,
            n1: Some(5),
            n2: Some(5),
            params: ParamsConfig {
                kappa2: Some(1.0),
                rest_length: Some(2.0),
                ..unit
            },
            shape2: Some(ShapeSpec::RegularSimplex { circumradius: 1.0 }),
            ..base
        },
    }
}

#[derive(Debug, Parser)]
#[command(name = "shapematch", version, about = "Consensus-driven shape matching of rigid polytope ensembles")]
pub struct Cli {
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Overrides the scenario's initial-condition seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppresses the summary.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs a scenario file.
    Simulate { config: PathBuf },
    /// Runs a built-in scenario.
    Demo {
        #[arg(value_enum)]
        name: Demo,
    },
    /// Fits rates and checks bounds on an existing diagnostics file.
    Analyze {
        diagnostics: PathBuf,
        /// Scenario file supplying the model for predicted rates and bounds.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Runs every scenario matching a glob, each into its own subdirectory.
    Sweep { pattern: String },
}

fn simulate(mut config: ScenarioConfig, cli: &Cli, out_dir: &Path) -> Result<(), CliError> {
    if let Some(seed) = cli.seed {
        config.init.seed = seed;
    }
    let out = run(&config, out_dir)?;
    if !cli.quiet {
        let label = config.name.as_deref().unwrap_or("scenario");
        let n: usize = config.counts().iter().sum();
        println!("{label}: {} model, N = {n}, d = {}", config.model, config.d);
        println!("{}", out.summary);
        if out.trajectory.coincident_events > 0 {
            println!("coincident centroid evaluations {}", out.trajectory.coincident_events);
        }
        println!(
            "wrote {} and {}",
            out.trajectory_path.display(),
            out.diagnostics_path.display()
        );
    }
    Ok(())
}

fn analyze(cli: &Cli, diagnostics: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let file = File::open(diagnostics).map_err(|source| CliError::Io {
        context: diagnostics.display().to_string(),
        source,
    })?;
    let rows = read_diagnostics(BufReader::new(file)).map_err(CliError::Input)?;
    let config = config.map(load_config).transpose()?;
    let params = config.as_ref().map(|c| (c.model, c.model_params()));
    let summary = summarize(&rows, params.as_ref().map(|(v, p)| (*v, p)))
        .ok_or_else(|| CliError::Input("diagnostics file has no rows".into()))?;
    if !cli.quiet {
        println!("{summary}");
    }
    Ok(())
}

fn sweep(cli: &Cli, pattern: &str) -> Result<(), CliError> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| CliError::Input(format!("bad pattern {pattern:?}: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Input(e.to_string()))?;
    if paths.is_empty() {
        return Err(CliError::Input(format!("no scenario files match {pattern:?}")));
    }
    let results: Vec<(PathBuf, Result<(), CliError>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .iter()
            .map(|path| {
                scope.spawn(move || {
                    let stem = path.file_stem().unwrap_or_default();
                    let out_dir = cli.out_dir.join(stem);
                    let result = load_config(path).and_then(|c| {
                        let quiet = Cli {
                            out_dir: out_dir.clone(),
                            seed: cli.seed,
                            quiet: true,
                            command: Command::Sweep { pattern: String::new() },
                        };
                        simulate(c, &quiet, &out_dir)
                    });
                    (path.clone(), result)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut worst: Option<CliError> = None;
    for (path, result) in results {
        match result {
            Ok(()) => {
                if !cli.quiet {
                    println!("ok     {}", path.display());
                }
            }
            Err(e) => {
                eprintln!("failed {}: {e}", path.display());
                if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate { config } => simulate(load_config(config)?, cli, &cli.out_dir),
        Command::Demo { name } => simulate(demo_config(*name), cli, &cli.out_dir),
        Command::Analyze { diagnostics, config } => analyze(cli, diagnostics, config.as_deref()),
        Command::Sweep { pattern } => sweep(cli, pattern),
    }
}

/// Parses `args` and runs; exit status 0 on success, 1 on bad input, 2 on integration abort.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
