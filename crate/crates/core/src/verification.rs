//! The property battery: measurable invariants of the flow, the slab solver
//! and the diagnostics, each checked against a pinned threshold and reported
//! as one pass/fail row.  The battery is what the command-line `verify`
//! subcommand prints, and it is deliberately built from the same public
//! operations a simulation run uses — a failing row names the measured
//! figure so regressions are actionable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{conservation_report, CasimirSpec};
use crate::error::Result;
use crate::flow::{
    flow_inverse_residual, leapfrog_area_det, volume_ratio, FieldSource, FlowSpec, Method,
};
use crate::phase_space::{lift, reduce, FullCoord, InitialDatum, ReducedCoord, Vec3};
use crate::solver::{continue_solution, GlobalSolution, SolverConfig};

/// One measured property: its figure of merit and the threshold it must
/// stay within.
#[derive(Clone, Debug)]
pub struct PropertyReport {
    pub name: &'static str,
    pub pass: bool,
    /// The measured figure of merit (a residual, a drift, a ratio...).
    pub measured: f64,
    /// The pinned bound `measured` is compared against.
    pub threshold: f64,
    /// One human-readable line of context (worst state, row, slab).
    pub detail: String,
}

impl PropertyReport {
    fn judge(
        name: &'static str,
        measured: f64,
        threshold: f64,
        detail: String,
    ) -> PropertyReport {
        PropertyReport {
            name,
            pass: measured.is_finite() && measured <= threshold,
            measured,
            threshold,
            detail,
        }
    }
}

/// Knobs of the battery: probe-cloud size and seed, finite-difference
/// offset, and the pinned thresholds.
#[derive(Clone, Debug)]
pub struct BatteryOptions {
    /// Number of probe states per flow property.
    pub cloud: usize,
    /// Seed of the probe-state generator (probe clouds are the only random
    /// element anywhere; everything else is deterministic).
    pub seed: u64,
    /// Centered finite-difference offset of the phase-volume Jacobian.
    pub fd_step: f64,
    /// Forward-then-backward integration defect bound.
    pub flow_inverse_tol: f64,
    /// Bound on |det - 1| of the 6-d finite-difference flow Jacobian.
    pub volume_tol: f64,
    /// Bound on |det - 1| of the analytic kick-drift-kick tangent map.
    pub area_tol: f64,
    /// Bound on the reduce-lift-rotate round-trip defect.
    pub roundtrip_tol: f64,
    /// Bound on measured fixed-point contraction factors (after the first
    /// iteration gap, which only reflects the quality of the seed).
    pub contraction_tol: f64,
    /// Bound on invariants that transport preserves exactly (mass, values
    /// of the composed distribution): rounding level.
    pub exact_tol: f64,
    /// Bound on the total-energy drift of the run (resolution dependent).
    pub energy_tol: f64,
    /// Evaluate conservation diagnostics at every `report_stride`-th row.
    pub report_stride: usize,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        BatteryOptions {
            cloud: 48,
            seed: 7,
            fd_step: 1e-5,
            flow_inverse_tol: 1e-8,
            volume_tol: 1e-3,
            area_tol: 1e-12,
            roundtrip_tol: 1e-9,
            contraction_tol: 0.9,
            exact_tol: 1e-12,
            energy_tol: 1e-2,
            report_stride: 8,
        }
    }
}

/// Did every row pass?
pub fn battery_passes(reports: &[PropertyReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

/// First failing row, if any.
pub fn first_failure(reports: &[PropertyReport]) -> Option<&PropertyReport> {
    reports.iter().find(|r| !r.pass)
}

/// Render the battery as an aligned pass/fail table.
pub fn format_table(reports: &[PropertyReport]) -> String {
    let name_w = reports
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(8)
        .max("property".len());
    let mut out = String::new();
    out.push_str(&format!(
        "{:<name_w$}  {:<6}  {:>12}  {:>12}  detail\n",
        "property", "status", "measured", "threshold"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<name_w$}  {:<6}  {:>12.5e}  {:>12.5e}  {}\n",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.measured,
            r.threshold,
            r.detail
        ));
    }
    out
}

/// Run the full battery on a datum: solve to `t_target` with the given
/// configuration, then measure every property on that solution.  Returns
/// the report rows in a fixed order.
pub fn run_battery(
    datum: &InitialDatum,
    cfg: &SolverConfig,
    t_target: f64,
    opts: &BatteryOptions,
) -> Result<Vec<PropertyReport>> {
    let sol = continue_solution(datum, cfg, t_target)?;
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let cloud = reduced_cloud(&mut rng, datum, opts.cloud);
    let slab0 = &sol.slabs[0];
    let spec = slab0.flow_spec(&sol.constants, &sol.config);
    let t0 = slab0.t0;
    let t1 = slab0.t_end();

    reports.push(flow_inverse_row(&spec, &cloud, t0, t1, opts));
    reports.push(volume_row(&spec, &cloud, t0, t1, opts));
    reports.push(leapfrog_row(&spec, &cloud, t0, opts));
    reports.push(roundtrip_row(&mut rng, &cloud, opts));
    reports.push(momentum_bound_row(&sol));
    reports.push(contraction_row(&sol, opts));

    let report = conservation_report(&sol, opts.report_stride, &[CasimirSpec::square()])?;
    let mass_drift = report.mass_drift();
    reports.push(PropertyReport::judge(
        "mass-conservation",
        mass_drift,
        opts.exact_tol,
        format!("{} report rows", report.rows.len()),
    ));
    let casimir_drift = report
        .rows
        .iter()
        .map(|r| r.casimirs[0].0)
        .fold((f64::NEG_INFINITY, f64::INFINITY, 0.0_f64), |acc, v| {
            (acc.0.max(v), acc.1.min(v), v)
        });
    let casimir_spread = {
        let (hi, lo, _) = casimir_drift;
        let scale = hi.abs().max(1.0);
        if hi >= lo {
            (hi - lo) / scale
        } else {
            0.0 // no rows carried a value
        }
    };
    reports.push(PropertyReport::judge(
        "casimir-constancy",
        casimir_spread,
        opts.exact_tol,
        "transported integral of f^2 across rows".into(),
    ));
    reports.push(PropertyReport::judge(
        "energy-drift",
        report.e_total_drift,
        opts.energy_tol,
        format!("kinetic + potential across {} rows", report.rows.len()),
    ));
    Ok(reports)
}

/// Probe states spread over the datum's support box; every fourth state has
/// exactly zero angular momentum to exercise the signed-line flow.
fn reduced_cloud(rng: &mut ChaCha8Rng, datum: &InitialDatum, n: usize) -> Vec<ReducedCoord> {
    let r_cap = datum.r_support;
    let p_cap = datum.p_support;
    (0..n.max(1))
        .map(|i| {
            let r = r_cap * (0.05 + 0.95 * rng.gen::<f64>());
            let w = 0.9 * p_cap * (2.0 * rng.gen::<f64>() - 1.0);
            let l = if i % 4 == 0 {
                0.0
            } else {
                0.8 * r * p_cap * rng.gen::<f64>()
            };
            ReducedCoord::new(r, w, l)
        })
        .collect()
}

fn flow_inverse_row(
    spec: &FlowSpec,
    cloud: &[ReducedCoord],
    t0: f64,
    t1: f64,
    opts: &BatteryOptions,
) -> PropertyReport {
    let mut worst = 0.0_f64;
    let mut worst_state = cloud[0];
    let mut detail_err = None;
    for &z in cloud {
        match flow_inverse_residual(spec, z, t0, t1) {
            Ok(res) => {
                if res > worst {
                    worst = res;
                    worst_state = z;
                }
            }
            Err(e) => {
                detail_err = Some(e.to_string());
                worst = f64::INFINITY;
                worst_state = z;
                break;
            }
        }
    }
    let detail = match detail_err {
        Some(e) => format!("integration failed at {worst_state:?}: {e}"),
        None => format!(
            "worst probe (r, w, L) = ({:.4}, {:.4}, {:.4}) over one slab",
            worst_state.r, worst_state.w, worst_state.l
        ),
    };
    PropertyReport::judge("flow-inverse", worst, opts.flow_inverse_tol, detail)
}

fn volume_row(
    spec: &FlowSpec,
    cloud: &[ReducedCoord],
    t0: f64,
    t1: f64,
    opts: &BatteryOptions,
) -> PropertyReport {
    let mut worst = 0.0_f64;
    let mut worst_state = cloud[0];
    let mut detail_err = None;
    for &z in cloud {
        let full = match lift(z) {
            Ok(f) => f,
            Err(e) => {
                detail_err = Some(e.to_string());
                worst = f64::INFINITY;
                break;
            }
        };
        match volume_ratio(spec, full, t0, t1, opts.fd_step) {
            Ok(det) => {
                let defect = (det - 1.0).abs();
                if defect > worst {
                    worst = defect;
                    worst_state = z;
                }
            }
            Err(e) => {
                detail_err = Some(e.to_string());
                worst = f64::INFINITY;
                break;
            }
        }
    }
    let detail = match detail_err {
        Some(e) => format!("probe failed: {e}"),
        None => format!(
            "|det - 1| of the 6-d difference Jacobian, worst at r = {:.4}",
            worst_state.r
        ),
    };
    PropertyReport::judge("volume-ratio", worst, opts.volume_tol, detail)
}

fn leapfrog_row(
    spec: &FlowSpec,
    cloud: &[ReducedCoord],
    t0: f64,
    opts: &BatteryOptions,
) -> PropertyReport {
    let area_spec = spec.clone().with_method(Method::Leapfrog);
    let mut worst = 0.0_f64;
    let mut detail_err = None;
    for &z in cloud {
        match leapfrog_area_det(&area_spec, z, t0) {
            Ok(det) => worst = worst.max((det - 1.0).abs()),
            Err(e) => {
                detail_err = Some(e.to_string());
                worst = f64::INFINITY;
                break;
            }
        }
    }
    let detail = match detail_err {
        Some(e) => format!("probe failed: {e}"),
        None => "analytic tangent determinant of one kick-drift-kick step".into(),
    };
    PropertyReport::judge("leapfrog-area", worst, opts.area_tol, detail)
}

/// Lift each probe to a full state, rotate position and velocity by a
/// common random rotation, and reduce again: the invariants (r, w, L) must
/// survive to rounding accuracy.
fn roundtrip_row(
    rng: &mut ChaCha8Rng,
    cloud: &[ReducedCoord],
    opts: &BatteryOptions,
) -> PropertyReport {
    let mut worst = 0.0_f64;
    let mut detail_err = None;
    for &z in cloud {
        let full = match lift(z) {
            Ok(f) => f,
            Err(e) => {
                detail_err = Some(e.to_string());
                worst = f64::INFINITY;
                break;
            }
        };
        let rot = random_rotation(rng);
        let turned = FullCoord::new(apply(&rot, full.x), apply(&rot, full.v));
        let back = reduce(turned);
        let scale = 1.0 + z.r.abs() + z.w.abs() + z.l.abs();
        let defect = ((back.r - z.r).abs() + (back.w - z.w).abs() + (back.l - z.l).abs()) / scale;
        worst = worst.max(defect);
    }
    let detail = match detail_err {
        Some(e) => format!("lift failed: {e}"),
        None => "reduce(rotate(lift(z))) against z".into(),
    };
    PropertyReport::judge("reduction-roundtrip", worst, opts.roundtrip_tol, detail)
}

fn momentum_bound_row(sol: &GlobalSolution) -> PropertyReport {
    let growth = sol.constants.growth;
    let mut worst = 0.0_f64;
    let mut worst_at = (0usize, 0usize);
    for (si, slab) in sol.slabs.iter().enumerate() {
        let bounds = slab.momentum_majorant(growth);
        for (ri, (&p, t)) in slab.p_rows.iter().zip(slab.row_times()).enumerate() {
            let q = bounds.momentum_bound(t - slab.t0);
            if q.is_finite() && q > 0.0 {
                let ratio = p / q;
                if ratio > worst {
                    worst = ratio;
                    worst_at = (si, ri);
                }
            }
        }
    }
    PropertyReport::judge(
        "momentum-bound",
        worst,
        1.0 + 1e-9,
        format!(
            "max P(t)/Q(t) across rows, worst at slab {} row {}",
            worst_at.0, worst_at.1
        ),
    )
}

fn contraction_row(sol: &GlobalSolution, opts: &BatteryOptions) -> PropertyReport {
    let mut worst = 0.0_f64;
    let mut measured_any = false;
    let mut worst_slab = 0usize;
    for (si, slab) in sol.slabs.iter().enumerate() {
        let ratios = slab.contraction_ratios();
        // drop the first gap: it measures the seed, not the map
        for &rho in ratios.iter().skip(1) {
            measured_any = true;
            if rho > worst {
                worst = rho;
                worst_slab = si;
            }
        }
    }
    let detail = if measured_any {
        format!("max distance ratio after the seed gap, worst in slab {worst_slab}")
    } else {
        "iterations converged too fast to measure a ratio".into()
    };
    PropertyReport::judge("contraction", worst, opts.contraction_tol, detail)
}

fn apply(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    Vec3::new(
        m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
        m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
        m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
    )
}

/// Rotation by a uniform angle about a random axis (Rodrigues form).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let axis = loop {
        let v = Vec3::new(
            2.0 * rng.gen::<f64>() - 1.0,
            2.0 * rng.gen::<f64>() - 1.0,
            2.0 * rng.gen::<f64>() - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v.scale(1.0 / n);
        }
    };
    let angle = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let (x, y, z) = (axis.x, axis.y, axis.z);
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Build a one-off flow spec over a slab table — used by callers that want
/// to probe a field without a full solution (kept here so the command-line
/// layer does not need to assemble specs by hand).
pub fn probe_spec(
    table: std::sync::Arc<crate::field::RadialFieldTable>,
    sign: crate::phase_space::ForceSign,
    kinematics: crate::flow::Kinematics,
    step: f64,
) -> Result<FlowSpec> {
    FlowSpec::new(FieldSource::Table(table), sign, kinematics, step)
}
