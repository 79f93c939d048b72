//! Run configuration: a flat `key = value` text format with strict unknown-key
//! rejection, plus the datum and time-target grammars shared by the
//! subcommand flags.  Precedence is defaults, then config file, then flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use vpsphere_core::diagnostics::CasimirSpec;
use vpsphere_core::solver::ProblemConstants;
use vpsphere_core::steady_states::SteadyState;
use vpsphere_core::{
    build_polytrope, read_table_file, DepositScheme, FieldBounds, ForceSign, InitialDatum,
    Kinematics, Method, PolytropeSpec, SolverConfig,
};

use crate::CliError;

type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// grammars
// ---------------------------------------------------------------------------

/// What to evolve, as written in the config (`datum = ...`).
#[derive(Clone, Debug, PartialEq)]
pub enum DatumSpec {
    /// Indicator of the unit ball in position times the unit ball in
    /// velocity.
    IndicatorBall,
    /// The zero distribution.
    Vacuum,
    /// Uniform phase-space density on a ball of radius `r` in position and
    /// `p` in velocity, scaled to total mass `mass`.
    ColdBall { r: f64, p: f64, mass: f64 },
    /// Polytropic equilibrium with exponent `k` and central cutoff-margin
    /// value `central`.
    Polytrope { k: f64, central: f64 },
    /// A plain-text radial table file (columns r w L f with a documented
    /// header, as written by `steady-state` and `perturb`).
    Table(PathBuf),
}

impl std::fmt::Display for DatumSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatumSpec::IndicatorBall => write!(f, "indicator-ball"),
            DatumSpec::Vacuum => write!(f, "vacuum"),
            DatumSpec::ColdBall { r, p, mass } => write!(f, "cold-ball(r={r},p={p},mass={mass})"),
            DatumSpec::Polytrope { k, central } => write!(f, "polytrope(k={k},central={central})"),
            DatumSpec::Table(path) => write!(f, "table:{}", path.display()),
        }
    }
}

/// A time target: absolute, in units of the guaranteed first slab horizon
/// (`<x>d0`), or in units of the datum's dynamical time (`<x>tdyn`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeSpec {
    Absolute(f64),
    Horizons(f64),
    Dynamical(f64),
}

impl std::fmt::Display for TimeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeSpec::Absolute(t) => write!(f, "{t}"),
            TimeSpec::Horizons(x) => write!(f, "{x}d0"),
            TimeSpec::Dynamical(x) => write!(f, "{x}tdyn"),
        }
    }
}

/// A Casimir integrand named in the config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CasimirName {
    Square,
    SLogS,
    Threshold(f64),
}

impl std::fmt::Display for CasimirName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CasimirName::Square => write!(f, "square"),
            CasimirName::SLogS => write!(f, "s-log-s"),
            CasimirName::Threshold(c) => write!(f, "threshold:{c}"),
        }
    }
}

impl CasimirName {
    pub fn to_spec(self) -> CliResult<CasimirSpec> {
        match self {
            CasimirName::Square => Ok(CasimirSpec::square()),
            CasimirName::SLogS => Ok(CasimirSpec::s_log_s()),
            CasimirName::Threshold(c) => CasimirSpec::threshold(c)
                .map_err(|e| CliError::Config(format!("key `casimirs`: {e}"))),
        }
    }
}

fn parse_f64(key: &str, value: &str) -> CliResult<f64> {
    let v = match value {
        "inf" | "infinity" => f64::INFINITY,
        other => other
            .parse::<f64>()
            .map_err(|_| CliError::Config(format!("key `{key}`: `{value}` is not a number")))?,
    };
    Ok(v)
}

fn parse_usize(key: &str, value: &str) -> CliResult<usize> {
    value
        .parse::<usize>()
        .map_err(|_| CliError::Config(format!("key `{key}`: `{value}` is not a nonnegative integer")))
}

fn parse_u64(key: &str, value: &str) -> CliResult<u64> {
    value
        .parse::<u64>()
        .map_err(|_| CliError::Config(format!("key `{key}`: `{value}` is not a nonnegative integer")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!(
            "key `{key}`: `{value}` is not `true` or `false`"
        ))),
    }
}

/// Parse `name(k1=v1,k2=v2)` argument lists with a fixed key set.
fn parse_kv_args(spec: &str, inner: &str, keys: &[&str]) -> CliResult<Vec<f64>> {
    let mut out = vec![None; keys.len()];
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (k, v) = part.split_once('=').ok_or_else(|| {
            CliError::Config(format!("datum `{spec}`: expected `key=value`, got `{part}`"))
        })?;
        let k = k.trim();
        let idx = keys.iter().position(|&name| name == k).ok_or_else(|| {
            CliError::Config(format!(
                "datum `{spec}`: unknown argument `{k}` (expected {})",
                keys.join(", ")
            ))
        })?;
        if out[idx].is_some() {
            return Err(CliError::Config(format!(
                "datum `{spec}`: duplicate argument `{k}`"
            )));
        }
        out[idx] = Some(parse_f64(k, v.trim())?);
    }
    out.into_iter()
        .zip(keys)
        .map(|(v, k)| {
            v.ok_or_else(|| CliError::Config(format!("datum `{spec}`: missing argument `{k}`")))
        })
        .collect()
}

pub fn parse_datum(value: &str) -> CliResult<DatumSpec> {
    let value = value.trim();
    if value == "indicator-ball" {
        return Ok(DatumSpec::IndicatorBall);
    }
    if value == "vacuum" {
        return Ok(DatumSpec::Vacuum);
    }
    if let Some(path) = value.strip_prefix("table:") {
        if path.is_empty() {
            return Err(CliError::Config("datum `table:`: missing a file path".into()));
        }
        return Ok(DatumSpec::Table(PathBuf::from(path)));
    }
    if let Some(inner) = value
        .strip_prefix("polytrope(")
        .and_then(|rest| rest.strip_suffix(')'))
    {
        let args = parse_kv_args(value, inner, &["k", "central"])?;
        return Ok(DatumSpec::Polytrope {
            k: args[0],
            central: args[1],
        });
    }
    if let Some(inner) = value
        .strip_prefix("cold-ball(")
        .and_then(|rest| rest.strip_suffix(')'))
    {
        let args = parse_kv_args(value, inner, &["r", "p", "mass"])?;
        return Ok(DatumSpec::ColdBall {
            r: args[0],
            p: args[1],
            mass: args[2],
        });
    }
    Err(CliError::Config(format!(
        "key `datum`: `{value}` is not one of indicator-ball, vacuum, \
         cold-ball(r=..,p=..,mass=..), polytrope(k=..,central=..), table:PATH"
    )))
}

pub fn parse_time(value: &str) -> CliResult<TimeSpec> {
    let value = value.trim();
    let build = |raw: &str, wrap: fn(f64) -> TimeSpec| -> CliResult<TimeSpec> {
        let x = parse_f64("t_target", raw)?;
        if !(x > 0.0) {
            return Err(CliError::Config(format!(
                "key `t_target`: `{value}` must be positive"
            )));
        }
        Ok(wrap(x))
    };
    if let Some(prefix) = value.strip_suffix("tdyn") {
        return build(prefix, TimeSpec::Dynamical);
    }
    if let Some(prefix) = value.strip_suffix("d0") {
        return build(prefix, TimeSpec::Horizons);
    }
    let t = build(value, TimeSpec::Absolute)?;
    if let TimeSpec::Absolute(x) = t {
        if !x.is_finite() {
            return Err(CliError::Config(
                "key `t_target`: the target time must be finite".into(),
            ));
        }
    }
    Ok(t)
}

pub fn parse_sign(value: &str) -> CliResult<ForceSign> {
    match value {
        "attractive" => Ok(ForceSign::Attractive),
        "repulsive" => Ok(ForceSign::Repulsive),
        _ => Err(CliError::Config(format!(
            "key `sign`: `{value}` is not `attractive` or `repulsive`"
        ))),
    }
}

pub fn parse_kinematics(value: &str) -> CliResult<Kinematics> {
    value
        .parse::<Kinematics>()
        .map_err(|e| CliError::Config(format!("key `kinematics`: {e}")))
}

fn parse_deposit(value: &str) -> CliResult<DepositScheme> {
    match value {
        "cloud-in-cell" | "cic" => Ok(DepositScheme::CloudInCell),
        "nearest-node" | "ngp" => Ok(DepositScheme::NearestNode),
        _ => Err(CliError::Config(format!(
            "key `deposit`: `{value}` is not `cloud-in-cell` (cic) or `nearest-node` (ngp)"
        ))),
    }
}

fn parse_method(value: &str) -> CliResult<Method> {
    value
        .parse::<Method>()
        .map_err(|e| CliError::Config(format!("key `method`: {e}")))
}

pub fn parse_casimirs(value: &str) -> CliResult<Vec<CasimirName>> {
    if value == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let name = if part == "square" {
            CasimirName::Square
        } else if part == "s-log-s" {
            CasimirName::SLogS
        } else if let Some(c) = part.strip_prefix("threshold:") {
            CasimirName::Threshold(parse_f64("casimirs", c)?)
        } else {
            return Err(CliError::Config(format!(
                "key `casimirs`: `{part}` is not square, s-log-s, threshold:<c> or none"
            )));
        };
        out.push(name);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

/// Fully resolved run configuration: the solver knobs mirror
/// [`SolverConfig`]; the rest steers datum construction, diagnostics and
/// output.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub datum: Option<DatumSpec>,
    pub kinematics: Kinematics,
    pub sign: ForceSign,
    pub t_target: Option<TimeSpec>,
    pub resolution: usize,
    pub radius_nodes: usize,
    pub steps_per_slab: usize,
    pub table_stride: usize,
    pub tol_factor: f64,
    pub max_iterations: usize,
    pub slab_safety: f64,
    pub max_slab: f64,
    pub warm_start: bool,
    pub deposit: DepositScheme,
    pub method: Method,
    pub guard_p_factor: f64,
    pub guard_delta_factor: f64,
    pub guard_tol: f64,
    pub chunk: usize,
    pub r_margin: f64,
    pub report_stride: usize,
    pub casimirs: Vec<CasimirName>,
    pub write_field: bool,
    pub write_snapshots: bool,
    /// Seed of the probe clouds used by `verify` (simulation results never
    /// depend on it).
    pub seed: u64,
    /// Probe cloud size used by `verify`.
    pub cloud: usize,
    pub out_dir: Option<PathBuf>,
    /// Rayon worker threads; 0 keeps the library default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SolverConfig::default();
        RunConfig {
            datum: None,
            kinematics: Kinematics::NonRelativistic,
            sign: ForceSign::Attractive,
            t_target: None,
            resolution: s.resolution,
            radius_nodes: s.radius_nodes,
            steps_per_slab: s.steps_per_slab,
            table_stride: s.table_stride,
            tol_factor: s.tol_factor,
            max_iterations: s.max_iterations,
            slab_safety: s.slab_safety,
            max_slab: s.max_slab,
            warm_start: s.warm_start,
            deposit: s.deposit,
            method: s.method,
            guard_p_factor: s.guard_p_factor,
            guard_delta_factor: s.guard_delta_factor,
            guard_tol: s.guard_tol,
            chunk: s.chunk,
            r_margin: s.r_margin,
            report_stride: 8,
            casimirs: vec![CasimirName::Square],
            write_field: true,
            write_snapshots: true,
            seed: 7,
            cloud: 48,
            out_dir: None,
            workers: 0,
        }
    }
}

impl RunConfig {
    /// A lighter default for `verify`: the property battery probes every
    /// slab with finite-difference clouds, so it favours quick runs.
    pub fn verify_default() -> Self {
        RunConfig {
            datum: Some(DatumSpec::IndicatorBall),
            t_target: Some(TimeSpec::Horizons(1.0)),
            resolution: 16,
            radius_nodes: 192,
            steps_per_slab: 128,
            ..RunConfig::default()
        }
    }

    /// Set one key from its text value (the config-file entry point; the
    /// flag overrides funnel through here too, so both speak one grammar).
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "datum" => self.datum = Some(parse_datum(value)?),
            "kinematics" => self.kinematics = parse_kinematics(value)?,
            "sign" => self.sign = parse_sign(value)?,
            "t_target" => self.t_target = Some(parse_time(value)?),
            "resolution" => self.resolution = parse_usize(key, value)?,
            "radius_nodes" => self.radius_nodes = parse_usize(key, value)?,
            "steps_per_slab" => self.steps_per_slab = parse_usize(key, value)?,
            "table_stride" => self.table_stride = parse_usize(key, value)?,
            "tol_factor" => self.tol_factor = parse_f64(key, value)?,
            "max_iterations" => self.max_iterations = parse_usize(key, value)?,
            "slab_safety" => self.slab_safety = parse_f64(key, value)?,
            "max_slab" => self.max_slab = parse_f64(key, value)?,
            "warm_start" => self.warm_start = parse_bool(key, value)?,
            "deposit" => self.deposit = parse_deposit(value)?,
            "method" => self.method = parse_method(value)?,
            "guard_p_factor" => self.guard_p_factor = parse_f64(key, value)?,
            "guard_delta_factor" => self.guard_delta_factor = parse_f64(key, value)?,
            "guard_tol" => self.guard_tol = parse_f64(key, value)?,
            "chunk" => self.chunk = parse_usize(key, value)?,
            "r_margin" => self.r_margin = parse_f64(key, value)?,
            "report_stride" => self.report_stride = parse_usize(key, value)?,
            "casimirs" => self.casimirs = parse_casimirs(value)?,
            "write_field" => self.write_field = parse_bool(key, value)?,
            "write_snapshots" => self.write_snapshots = parse_bool(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "cloud" => self.cloud = parse_usize(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "workers" => self.workers = parse_usize(key, value)?,
            _ => {
                return Err(CliError::Config(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    /// Apply a config file: `key = value` lines, `#` comments, strict keys,
    /// duplicates rejected.
    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected `key = value`, got `{}`",
                    path.display(),
                    idx + 1,
                    raw.trim()
                ))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    idx + 1
                )));
            }
            self.set(key, value.trim())
                .map_err(|e| match e {
                    CliError::Config(msg) => {
                        CliError::Config(format!("{}:{}: {msg}", path.display(), idx + 1))
                    }
                    other => other,
                })?;
        }
        Ok(())
    }

    /// The solver view of this configuration.
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            resolution: self.resolution,
            radius_nodes: self.radius_nodes,
            steps_per_slab: self.steps_per_slab,
            table_stride: self.table_stride,
            tol_factor: self.tol_factor,
            max_iterations: self.max_iterations,
            slab_safety: self.slab_safety,
            max_slab: self.max_slab,
            warm_start: self.warm_start,
            deposit: self.deposit,
            method: self.method,
            guard_p_factor: self.guard_p_factor,
            guard_delta_factor: self.guard_delta_factor,
            chunk: self.chunk,
            r_margin: self.r_margin,
            guard_tol: self.guard_tol,
        }
    }

    /// Build the initial datum (and the equilibrium behind it, when there
    /// is one).  Table files carry their own kinematics and force sign,
    /// which then override the configured ones.
    pub fn build_datum(&self) -> CliResult<(InitialDatum, Option<SteadyState>)> {
        let spec = self
            .datum
            .as_ref()
            .ok_or_else(|| CliError::Config("missing required key `datum`".into()))?;
        match spec {
            DatumSpec::IndicatorBall => Ok((
                InitialDatum::indicator_ball(self.kinematics, self.sign),
                None,
            )),
            DatumSpec::Vacuum => Ok((InitialDatum::vacuum(self.kinematics, self.sign), None)),
            DatumSpec::ColdBall { r, p, mass } => {
                let datum = InitialDatum::cold_ball(*r, *p, *mass, self.kinematics, self.sign)
                    .map_err(|e| CliError::Config(format!("key `datum`: {e}")))?;
                Ok((datum, None))
            }
            DatumSpec::Polytrope { k, central } => {
                if self.sign == ForceSign::Repulsive {
                    return Err(CliError::Config(
                        "key `datum`: polytropic equilibria exist for the attractive sign only"
                            .into(),
                    ));
                }
                let pspec = PolytropeSpec::new(*k, *central, self.kinematics)
                    .map_err(|e| CliError::Config(format!("key `datum`: {e}")))?;
                let state = build_polytrope(&pspec, pspec.default_step())
                    .map_err(|e| CliError::Config(format!("key `datum`: {e}")))?;
                Ok((state.datum(), Some(state)))
            }
            DatumSpec::Table(path) => {
                let datum = read_table_file(path)
                    .map_err(|e| CliError::Config(format!("key `datum`: {e}")))?;
                Ok((datum, None))
            }
        }
    }

    /// Resolve the time target against the datum's guaranteed horizon or
    /// dynamical time.
    pub fn resolve_time(
        &self,
        datum: &InitialDatum,
        state: Option<&SteadyState>,
    ) -> CliResult<f64> {
        let spec = self
            .t_target
            .ok_or_else(|| CliError::Config("missing required key `t_target`".into()))?;
        let t = match spec {
            TimeSpec::Absolute(t) => t,
            TimeSpec::Horizons(x) => {
                let consts = ProblemConstants::for_datum(datum);
                let horizon = FieldBounds::new(consts.p_declared, consts.growth)
                    .map_err(|e| CliError::Config(format!("key `t_target`: {e}")))?
                    .horizon();
                if !horizon.is_finite() {
                    return Err(CliError::Config(
                        "key `t_target`: the guaranteed horizon of this datum is infinite; \
                         give an absolute target time"
                            .into(),
                    ));
                }
                x * horizon
            }
            TimeSpec::Dynamical(x) => match state {
                Some(st) => x * st.dynamical_time(),
                None => {
                    if !(datum.mass > 0.0) {
                        return Err(CliError::Config(
                            "key `t_target`: dynamical-time units need a datum with positive \
                             mass"
                                .into(),
                        ));
                    }
                    x * (datum.r_support.powi(3) / datum.mass).sqrt()
                }
            },
        };
        if !(t > 0.0) || !t.is_finite() {
            return Err(CliError::Config(format!(
                "key `t_target`: resolved target time {t} is not positive and finite"
            )));
        }
        Ok(t)
    }

    /// Casimir specs for the diagnostics report.
    pub fn casimir_specs(&self) -> CliResult<Vec<CasimirSpec>> {
        self.casimirs.iter().map(|c| c.to_spec()).collect()
    }

    /// The resolved configuration as sorted `key = value` metadata lines.
    pub fn metadata_entries(&self) -> Vec<(String, String)> {
        let datum = self
            .datum
            .as_ref()
            .map(|d| d.to_string())
            .unwrap_or_else(|| "(none)".into());
        let t_target = self
            .t_target
            .map(|t| t.to_string())
            .unwrap_or_else(|| "(none)".into());
        let casimirs = if self.casimirs.is_empty() {
            "none".to_string()
        } else {
            self.casimirs
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut entries: Vec<(String, String)> = vec![
            ("datum".into(), datum),
            ("kinematics".into(), self.kinematics.to_string()),
            ("sign".into(), self.sign.to_string()),
            ("t_target".into(), t_target),
            ("resolution".into(), self.resolution.to_string()),
            ("radius_nodes".into(), self.radius_nodes.to_string()),
            ("steps_per_slab".into(), self.steps_per_slab.to_string()),
            ("table_stride".into(), self.table_stride.to_string()),
            ("tol_factor".into(), self.tol_factor.to_string()),
            ("max_iterations".into(), self.max_iterations.to_string()),
            ("slab_safety".into(), self.slab_safety.to_string()),
            ("max_slab".into(), self.max_slab.to_string()),
            ("warm_start".into(), self.warm_start.to_string()),
            ("deposit".into(), deposit_name(self.deposit).into()),
            ("method".into(), self.method.to_string()),
            ("guard_p_factor".into(), self.guard_p_factor.to_string()),
            (
                "guard_delta_factor".into(),
                self.guard_delta_factor.to_string(),
            ),
            ("guard_tol".into(), self.guard_tol.to_string()),
            ("chunk".into(), self.chunk.to_string()),
            ("r_margin".into(), self.r_margin.to_string()),
            ("report_stride".into(), self.report_stride.to_string()),
            ("casimirs".into(), casimirs),
            ("write_field".into(), self.write_field.to_string()),
            ("write_snapshots".into(), self.write_snapshots.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("cloud".into(), self.cloud.to_string()),
            ("workers".into(), self.workers.to_string()),
        ];
        entries.sort();
        entries
    }
}

pub fn deposit_name(scheme: DepositScheme) -> &'static str {
    match scheme {
        DepositScheme::CloudInCell => "cloud-in-cell",
        DepositScheme::NearestNode => "nearest-node",
    }
}
