//! `vpsphere` — command-line front end for the spherically symmetric
//! Vlasov-Poisson solver.
//!
//! Subcommands:
//!   simulate      solve an initial datum forward in time, write run artifacts
//!   steady-state  build an isotropic polytropic equilibrium
//!   perturb       write a perturbed equilibrium as a datum table
//!   verify        run the built-in property battery
//!   diagnose      recompute diagnostics from a snapshot file
//!
//! Exit codes: 0 success, 1 generic/property failure, 2 configuration error,
//! 3 non-convergence of the field iteration, 4 continuation-guard stop.

mod config;
mod outputs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vpsphere_core::diagnostics::{
    casimir_reconstructed, casimir_transported, conservation_report, kinetic_energy,
    potential_energy_profile, reconstructed_sup,
};
use vpsphere_core::verification::{first_failure, format_table, run_battery, BatteryOptions};
use vpsphere_core::{
    build_polytrope, continue_solution, sample_ensemble, write_table_file, CumulativeMass,
    Ensemble, FieldBounds, Perturbation, PolytropeSpec, RadiusGrid, SamplingGrid,
};

use config::{parse_casimirs, parse_kinematics, parse_sign, RunConfig};

// ---------------------------------------------------------------------------
// errors and exit codes
// ---------------------------------------------------------------------------

/// CLI-level error, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad or missing configuration (exit 2).
    Config(String),
    /// The field iteration failed to converge (exit 3).
    NonConvergence(String),
    /// The continuation guard stopped the run (exit 4); the trace holds the
    /// measured momentum-support history up to the stop.
    BlowUp { message: String, trace: Vec<(f64, f64)> },
    /// A verification property failed (exit 1).
    Property(String),
    /// Any other runtime failure (exit 1).
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::BlowUp { .. } => 4,
            CliError::Property(_) | CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::NonConvergence(m)
            | CliError::Property(m)
            | CliError::Run(m) => f.write_str(m),
            CliError::BlowUp { message, .. } => f.write_str(message),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Map a core error onto the CLI error that owns its exit code.
fn map_core(e: vpsphere_core::Error) -> CliError {
    use vpsphere_core::Error as E;
    match e {
        E::NonConvergence {
            iterations,
            last,
            tol,
            ..
        } => CliError::NonConvergence(format!(
            "field iteration did not converge within {iterations} iterations \
             (last distance {last:e}, tolerance {tol:e}); \
             reduce slab_safety or raise max_iterations"
        )),
        E::BlowUp {
            t,
            reason,
            momentum_trace,
        } => CliError::BlowUp {
            message: format!("solution cannot be continued past t = {t}: {reason}"),
            trace: momentum_trace,
        },
        E::InvalidArgument(m) => CliError::Config(format!("invalid argument: {m}")),
        other => CliError::Run(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// command-line surface
// ---------------------------------------------------------------------------

/// Spherically symmetric Vlasov-Poisson simulator.
#[derive(Parser)]
#[command(name = "vpsphere", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an initial datum forward in time and write run artifacts.
    Simulate(SimArgs),
    /// Build an isotropic polytropic steady state; write its profile and a
    /// datum table usable as `--datum table:PATH`.
    #[command(name = "steady-state")]
    SteadyState(SteadyArgs),
    /// Build a steady state, apply a perturbation, and write the perturbed
    /// datum table.
    Perturb(PerturbArgs),
    /// Run the built-in property battery on a solved run (defaults to a
    /// quick indicator-ball problem) and report pass/fail per property.
    Verify(SimArgs),
    /// Recompute mass, energies, supports and Casimirs from a snapshot file.
    Diagnose(DiagnoseArgs),
}

/// Flags shared by `simulate` and `verify`.  Every flag mirrors a config-file
/// key; precedence is defaults, then `--config`, then flags.
#[derive(Args)]
struct SimArgs {
    /// Configuration file of `key = value` lines (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial datum: indicator-ball | vacuum | cold-ball(r=..,p=..,mass=..)
    /// | polytrope(k=..,central=..) | table:PATH.
    #[arg(long)]
    datum: Option<String>,
    /// non-relativistic | relativistic.
    #[arg(long)]
    kinematics: Option<String>,
    /// attractive | repulsive.
    #[arg(long)]
    sign: Option<String>,
    /// Target time: a plain number, `<x>d0` (units of the guaranteed first
    /// slab horizon), or `<x>tdyn` (units of the dynamical time).
    #[arg(long = "t-target", visible_alias = "T")]
    t_target: Option<String>,
    /// Sampling cells per phase-space axis.
    #[arg(long)]
    resolution: Option<String>,
    /// Radial nodes of the field tables.
    #[arg(long = "radius-nodes")]
    radius_nodes: Option<String>,
    /// Characteristic integrator steps per slab.
    #[arg(long = "steps-per-slab")]
    steps_per_slab: Option<String>,
    /// Steps between stored field rows.
    #[arg(long = "table-stride")]
    table_stride: Option<String>,
    /// Fixed-point tolerance factor (scaled by the field magnitude).
    #[arg(long = "tol-factor")]
    tol_factor: Option<String>,
    /// Fixed-point iteration cap per slab.
    #[arg(long = "max-iterations")]
    max_iterations: Option<String>,
    /// Fraction of the guaranteed horizon used per slab (0, 1).
    #[arg(long = "slab-safety")]
    slab_safety: Option<String>,
    /// Absolute cap on the slab length.
    #[arg(long = "max-slab")]
    max_slab: Option<String>,
    /// Seed each slab's iteration with the previous field (true/false).
    #[arg(long = "warm-start")]
    warm_start: Option<String>,
    /// Mass deposit scheme: cloud-in-cell | nearest-node.
    #[arg(long)]
    deposit: Option<String>,
    /// Characteristic integrator: rk4 | leapfrog.
    #[arg(long)]
    method: Option<String>,
    /// Momentum-guard multiple of the slab's a-priori bound.
    #[arg(long = "guard-p-factor")]
    guard_p_factor: Option<String>,
    /// Slab-shrink factor for the step-collapse guard.
    #[arg(long = "guard-delta-factor")]
    guard_delta_factor: Option<String>,
    /// Curvature tolerance of the adaptive substep guard.
    #[arg(long = "guard-tol")]
    guard_tol: Option<String>,
    /// Samples per parallel transport chunk.
    #[arg(long)]
    chunk: Option<String>,
    /// Relative radial margin of the field grid.
    #[arg(long = "r-margin")]
    r_margin: Option<String>,
    /// Stored rows between diagnostic evaluations.
    #[arg(long = "report-stride")]
    report_stride: Option<String>,
    /// Comma-separated Casimir integrands: square, s-log-s, threshold:<c>,
    /// or none.
    #[arg(long)]
    casimirs: Option<String>,
    /// Write field.csv (true/false).
    #[arg(long = "write-field")]
    write_field: Option<String>,
    /// Write snapshot_initial.csv / snapshot_final.csv (true/false).
    #[arg(long = "write-snapshots")]
    write_snapshots: Option<String>,
    /// Seed of the probe clouds used by verify.
    #[arg(long)]
    seed: Option<String>,
    /// Probe cloud size used by verify.
    #[arg(long)]
    cloud: Option<String>,
    /// Output directory (required for simulate).
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
    /// Rayon worker threads; 0 keeps the library default.
    #[arg(long)]
    workers: Option<String>,
}

impl SimArgs {
    /// Flag overrides in fixed order, as (config key, value) pairs.
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let mut v: Vec<(&'static str, &str)> = Vec::new();
        macro_rules! take {
            ($key:literal, $field:ident) => {
                if let Some(val) = &self.$field {
                    v.push(($key, val.as_str()));
                }
            };
        }
        take!("datum", datum);
        take!("kinematics", kinematics);
        take!("sign", sign);
        take!("t_target", t_target);
        take!("resolution", resolution);
        take!("radius_nodes", radius_nodes);
        take!("steps_per_slab", steps_per_slab);
        take!("table_stride", table_stride);
        take!("tol_factor", tol_factor);
        take!("max_iterations", max_iterations);
        take!("slab_safety", slab_safety);
        take!("max_slab", max_slab);
        take!("warm_start", warm_start);
        take!("deposit", deposit);
        take!("method", method);
        take!("guard_p_factor", guard_p_factor);
        take!("guard_delta_factor", guard_delta_factor);
        take!("guard_tol", guard_tol);
        take!("chunk", chunk);
        take!("r_margin", r_margin);
        take!("report_stride", report_stride);
        take!("casimirs", casimirs);
        take!("write_field", write_field);
        take!("write_snapshots", write_snapshots);
        take!("seed", seed);
        take!("cloud", cloud);
        take!("out_dir", out_dir);
        take!("workers", workers);
        v
    }

    /// defaults -> config file -> flags.
    fn resolve(&self, base: RunConfig) -> CliResult<RunConfig> {
        let mut rc = base;
        if let Some(path) = &self.config {
            rc.apply_file(path)?;
        }
        for (key, value) in self.overrides() {
            rc.set(key, value)?;
        }
        Ok(rc)
    }
}

#[derive(Args)]
struct SteadyArgs {
    /// Polytropic exponent k of the margin ansatz.
    #[arg(long)]
    k: f64,
    /// Central value of the energy margin.
    #[arg(long = "central-value")]
    central_value: f64,
    /// non-relativistic | relativistic.
    #[arg(long, default_value = "non-relativistic")]
    kinematics: String,
    /// Output directory.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Nodes per axis of the written datum table.
    #[arg(long = "table-nodes", default_value_t = 65)]
    table_nodes: usize,
    /// Rows of the written radial profile.
    #[arg(long = "profile-nodes", default_value_t = 513)]
    profile_nodes: usize,
    /// Radial step of the shooting integration (defaults to a value scaled
    /// to the state).
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Args)]
struct PerturbArgs {
    /// Polytropic exponent k of the base equilibrium.
    #[arg(long)]
    k: f64,
    /// Central value of the energy margin.
    #[arg(long = "central-value")]
    central_value: f64,
    /// non-relativistic | relativistic.
    #[arg(long, default_value = "non-relativistic")]
    kinematics: String,
    /// Perturbation mode: radial-kick | phase-shear.
    #[arg(long)]
    mode: String,
    /// Dimensionless perturbation amplitude.
    #[arg(long)]
    amplitude: f64,
    /// Output directory.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Nodes per axis of the written datum table.
    #[arg(long = "table-nodes", default_value_t = 65)]
    table_nodes: usize,
    /// Radial step of the shooting integration.
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Snapshot CSV (header r,w,l,weight,f0) to analyse.
    #[arg(long)]
    snapshot: PathBuf,
    /// non-relativistic | relativistic.
    #[arg(long, default_value = "non-relativistic")]
    kinematics: String,
    /// attractive | repulsive.
    #[arg(long, default_value = "attractive")]
    sign: String,
    /// Bins per axis of the reconstruction grid.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Nodes of the deposit grid backing the potential energy.
    #[arg(long = "radius-nodes", default_value_t = 512)]
    radius_nodes: usize,
    /// Comma-separated Casimir integrands: square, s-log-s, threshold:<c>,
    /// or none.
    #[arg(long, default_value = "square")]
    casimirs: String,
    /// Also write the printed report as diagnose.txt in this directory.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::BlowUp { trace, .. } = &e {
                if !trace.is_empty() {
                    eprintln!("momentum-support trace (t, P):");
                    for (t, p) in trace {
                        eprintln!("  {t} {p}");
                    }
                }
            }
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(args) => {
            let rc = args.resolve(RunConfig::default())?;
            init_workers(&rc)?;
            simulate(&rc)
        }
        Command::Verify(args) => {
            let rc = args.resolve(RunConfig::verify_default())?;
            init_workers(&rc)?;
            verify(&rc)
        }
        Command::SteadyState(args) => steady_state(&args),
        Command::Perturb(args) => perturb_cmd(&args),
        Command::Diagnose(args) => diagnose(&args),
    }
}

fn init_workers(rc: &RunConfig) -> CliResult<()> {
    if rc.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(rc.workers)
            .build_global()
            .map_err(|e| CliError::Run(format!("cannot configure {} workers: {e}", rc.workers)))?;
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn simulate(rc: &RunConfig) -> CliResult<()> {
    let out_dir = rc
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Config("missing required key `out_dir`".into()))?;
    let (datum, state) = rc.build_datum()?;
    let t_target = rc.resolve_time(&datum, state.as_ref())?;
    let cfg = rc.solver_config();
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let phis = rc.casimir_specs()?;

    let sol = continue_solution(&datum, &cfg, t_target).map_err(map_core)?;
    let report = conservation_report(&sol, rc.report_stride, &phis).map_err(map_core)?;

    ensure_dir(&out_dir)?;

    // metadata: the resolved configuration plus the run's derived constants.
    let mut entries = rc.metadata_entries();
    let consts = &sol.constants;
    let delta0 = FieldBounds::new(consts.p_declared, consts.growth)
        .map_err(map_core)?
        .horizon();
    let push = |entries: &mut Vec<(String, String)>, k: &str, v: String| {
        entries.push((k.to_string(), v));
    };
    push(&mut entries, "derived.mass", format!("{}", datum.mass));
    push(&mut entries, "derived.sup_norm", format!("{}", datum.sup_norm));
    push(&mut entries, "derived.r_support", format!("{}", datum.r_support));
    push(&mut entries, "derived.p_support", format!("{}", datum.p_support));
    push(&mut entries, "derived.growth_constant", format!("{}", consts.growth));
    push(&mut entries, "derived.delta0", format!("{delta0}"));
    push(&mut entries, "derived.t_target_resolved", format!("{t_target}"));
    push(&mut entries, "derived.t_end", format!("{}", sol.t_end()));
    push(&mut entries, "derived.slabs", format!("{}", sol.slabs.len()));
    push(&mut entries, "derived.p_star", format!("{}", sol.p_star));
    push(
        &mut entries,
        "derived.samples",
        format!("{}", sol.final_ensemble.samples.len()),
    );
    outputs::write_metadata(&out_dir.join("metadata.txt"), &entries)?;

    outputs::write_convergence(&out_dir.join("convergence.csv"), &sol)?;
    outputs::write_conservation(&out_dir.join("conservation.csv"), &report)?;
    if rc.write_field {
        outputs::write_field_csv(&out_dir.join("field.csv"), &sol, rc.report_stride)?;
    }
    if rc.write_snapshots {
        let initial = sample_ensemble(&datum, cfg.resolution).map_err(map_core)?;
        outputs::write_snapshot(&out_dir.join("snapshot_initial.csv"), &initial)?;
        outputs::write_snapshot(&out_dir.join("snapshot_final.csv"), &sol.final_ensemble)?;
    }

    println!(
        "solved to t = {} in {} slab(s); final momentum support {}",
        sol.t_end(),
        sol.slabs.len(),
        sol.p_star
    );
    println!(
        "energy drift {:e}, mass drift {:e}",
        report.e_total_drift,
        report.mass_drift()
    );
    for (name, drift) in report.casimir_names.iter().zip(&report.casimir_drifts) {
        println!("casimir {name} drift {drift:e}");
    }
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// steady-state / perturb
// ---------------------------------------------------------------------------

fn build_state(
    k: f64,
    central_value: f64,
    kinematics: &str,
    step: Option<f64>,
) -> CliResult<vpsphere_core::SteadyState> {
    let kin = parse_kinematics(kinematics)?;
    let spec = PolytropeSpec::new(k, central_value, kin)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let step = match step {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => {
            return Err(CliError::Config(format!(
                "key `step`: must be positive and finite, got {s}"
            )))
        }
        None => spec.default_step(),
    };
    build_polytrope(&spec, step).map_err(map_core)
}

fn steady_state(args: &SteadyArgs) -> CliResult<()> {
    if args.profile_nodes < 2 {
        return Err(CliError::Config(
            "key `profile_nodes`: need at least 2 rows".into(),
        ));
    }
    let state = build_state(args.k, args.central_value, &args.kinematics, args.step)?;
    ensure_dir(&args.out_dir)?;

    let e_kin = state.kinetic_energy();
    let e_pot = state.potential_energy();
    let entries: Vec<(String, String)> = [
        ("k", format!("{}", state.k)),
        ("central_value", format!("{}", state.central_value)),
        ("kinematics", format!("{}", state.kinematics)),
        ("e0", format!("{}", state.e0)),
        ("r_star", format!("{}", state.r_star)),
        ("m_star", format!("{}", state.m_star)),
        ("momentum_cutoff", format!("{}", state.momentum_cutoff())),
        ("dynamical_time", format!("{}", state.dynamical_time())),
        ("e_kin", format!("{e_kin}")),
        ("e_pot", format!("{e_pot}")),
        ("virial_residual", format!("{}", 2.0 * e_kin + e_pot)),
        ("shooting_step", format!("{}", state.dr)),
        ("table_nodes", format!("{}", args.table_nodes)),
        ("profile_nodes", format!("{}", args.profile_nodes)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    outputs::write_metadata(&args.out_dir.join("metadata.txt"), &entries)?;

    write_profile(&args.out_dir.join("profile.csv"), &state, args.profile_nodes)?;

    let table_path = args.out_dir.join("datum.table");
    write_table_file(&state.datum(), &table_path, args.table_nodes).map_err(map_core)?;

    println!(
        "steady state: r_star = {}, m_star = {}, virial residual {:e}",
        state.r_star,
        state.m_star,
        2.0 * e_kin + e_pot
    );
    println!("artifacts written to {}", args.out_dir.display());
    Ok(())
}

/// Radial profile rows `r,margin,mass,field` on a uniform grid up to the
/// star's edge.
fn write_profile(
    path: &Path,
    state: &vpsphere_core::SteadyState,
    nodes: usize,
) -> CliResult<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| CliError::Run(format!("cannot write {}: {e}", path.display()));
    writeln!(out, "r,margin,mass,field").map_err(io_err)?;
    for i in 0..nodes {
        let r = state.r_star * i as f64 / (nodes - 1) as f64;
        let m = state.enclosed_mass(r);
        let g = if r > 0.0 { m / (r * r) } else { 0.0 };
        writeln!(out, "{r},{},{m},{g}", state.margin_value(r)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn perturb_cmd(args: &PerturbArgs) -> CliResult<()> {
    let mode = match args.mode.as_str() {
        "radial-kick" => Perturbation::RadialKick(args.amplitude),
        "phase-shear" => Perturbation::PhaseShear(args.amplitude),
        other => {
            return Err(CliError::Config(format!(
                "key `mode`: expected `radial-kick` or `phase-shear`, got `{other}`"
            )))
        }
    };
    let state = build_state(args.k, args.central_value, &args.kinematics, args.step)?;
    let datum =
        vpsphere_core::perturb(&state, mode).map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(&args.out_dir)?;

    let entries: Vec<(String, String)> = [
        ("k", format!("{}", state.k)),
        ("central_value", format!("{}", state.central_value)),
        ("kinematics", format!("{}", state.kinematics)),
        ("mode", args.mode.clone()),
        ("amplitude", format!("{}", args.amplitude)),
        ("mass", format!("{}", datum.mass)),
        ("sup_norm", format!("{}", datum.sup_norm)),
        ("r_support", format!("{}", datum.r_support)),
        ("p_support", format!("{}", datum.p_support)),
        ("table_nodes", format!("{}", args.table_nodes)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    outputs::write_metadata(&args.out_dir.join("metadata.txt"), &entries)?;

    let table_path = args.out_dir.join("datum.table");
    write_table_file(&datum, &table_path, args.table_nodes).map_err(map_core)?;
    println!("perturbed datum written to {}", table_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn verify(rc: &RunConfig) -> CliResult<()> {
    let (datum, state) = rc.build_datum()?;
    let t_target = rc.resolve_time(&datum, state.as_ref())?;
    let cfg = rc.solver_config();
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let opts = BatteryOptions {
        cloud: rc.cloud,
        seed: rc.seed,
        report_stride: rc.report_stride,
        ..BatteryOptions::default()
    };
    let reports = run_battery(&datum, &cfg, t_target, &opts).map_err(map_core)?;
    print!("{}", format_table(&reports));
    match first_failure(&reports) {
        Some(f) => Err(CliError::Property(format!(
            "property `{}` failed: measured {:e} against bound {:e} ({})",
            f.name, f.measured, f.threshold, f.detail
        ))),
        None => {
            println!("all {} properties passed", reports.len());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

fn diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    let kin = parse_kinematics(&args.kinematics)?;
    let sign = parse_sign(&args.sign)?;
    let names = parse_casimirs(&args.casimirs)?;
    if args.radius_nodes < 2 {
        return Err(CliError::Config(
            "key `radius_nodes`: need at least 2 nodes".into(),
        ));
    }
    let samples = outputs::read_snapshot(&args.snapshot)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!(
            "snapshot {} holds no samples",
            args.snapshot.display()
        )));
    }

    let mut r_sup = 0.0_f64;
    let mut p_sup = 0.0_f64;
    for s in &samples {
        r_sup = r_sup.max(s.coord.r);
        let q2 = s.coord.w * s.coord.w
            + if s.coord.r > 0.0 {
                (s.coord.l / s.coord.r).powi(2)
            } else {
                0.0
            };
        p_sup = p_sup.max(q2.sqrt());
    }
    let grid = SamplingGrid::new(
        (r_sup * 1.05).max(1e-12),
        (p_sup * 1.05).max(1e-12),
        args.resolution,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let ens = Ensemble { samples, grid };

    let mass = ens.total_weight();
    let e_kin = kinetic_energy(&ens, kin);
    let deposit_grid = RadiusGrid::new((r_sup * 1.05).max(1e-12), args.radius_nodes)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cm = CumulativeMass::deposit(
        &ens.samples,
        deposit_grid,
        vpsphere_core::DepositScheme::CloudInCell,
    );
    let e_pot = potential_energy_profile(&cm.m, &deposit_grid, sign);

    let mut lines: Vec<(String, String)> = vec![
        ("mass".into(), format!("{mass}")),
        ("r_support".into(), format!("{}", ens.radial_support())),
        ("p_support".into(), format!("{}", ens.momentum_support())),
        ("e_kin".into(), format!("{e_kin}")),
        ("e_pot".into(), format!("{e_pot}")),
        ("e_total".into(), format!("{}", e_kin + e_pot)),
        (
            "linf_reconstructed".into(),
            format!("{}", reconstructed_sup(&ens)),
        ),
        ("samples".into(), format!("{}", ens.samples.len())),
    ];
    for name in &names {
        let spec = name.to_spec()?;
        lines.push((
            format!("casimir.{name}.transported"),
            format!("{}", casimir_transported(&ens, &spec)),
        ));
        lines.push((
            format!("casimir.{name}.reconstructed"),
            format!("{}", casimir_reconstructed(&ens, &spec)),
        ));
    }
    lines.sort();
    let mut text = String::new();
    for (k, v) in &lines {
        text.push_str(&format!("{k} = {v}\n"));
    }
    print!("{text}");

    if let Some(dir) = &args.out_dir {
        ensure_dir(dir)?;
        let path = dir.join("diagnose.txt");
        std::fs::write(&path, &text)
            .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}
