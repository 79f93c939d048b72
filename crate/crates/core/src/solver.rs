//! Fixed-point construction of the self-consistent field over time slabs.
//!
//! The solution is built slab by slab.  On a slab [t0, t0 + delta] whose
//! length is chosen from the a-priori momentum bound (a fixed fraction of
//! the guaranteed-existence horizon 1/(P growth)), the self-consistent
//! radial field is the fixed point of the map
//!
//! ```text
//!     field table  ->  transport the ensemble through it
//!                  ->  deposit mass profiles at the stored row times
//!                  ->  new field table,
//! ```
//!
//! iterated from the zero field until the sup-distance between successive
//! field tables falls below a tolerance tied to the natural field scale
//! M/R^2.  The transported ensemble at t0 + delta then restarts the next
//! slab, whose length is recomputed from the measured momentum support.
//! Norms of the initial datum are transport invariants, so the growth
//! constant never needs updating — only the support radius does.
//!
//! Everything is deterministic: ensembles are processed in fixed-size chunks
//! whose partial sums are merged in chunk order, independent of the worker
//! count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{
    deposit_weight, momentum_growth_constant, CumulativeMass, DepositScheme, FieldBounds,
    RadialFieldTable, RadiusGrid,
};
use crate::flow::{advance_observed, FieldSource, FlowSpec, Kinematics, Method, StepStats};
use crate::phase_space::{Ensemble, ForceSign, InitialDatum, Sample};

/// Tuning knobs of the slab solver.  The defaults are sized so that the
/// bundled verification runs finish in minutes on a single core while
/// meeting their accuracy gates.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Ensemble sampling resolution (cells per phase-space axis).
    pub resolution: usize,
    /// Nodes of the radius grid the field is deposited onto.
    pub radius_nodes: usize,
    /// Characteristic ODE steps per slab.
    pub steps_per_slab: usize,
    /// Field rows are stored every this many ODE steps (must divide
    /// `steps_per_slab`).
    pub table_stride: usize,
    /// Convergence tolerance factor: iteration stops when the field distance
    /// drops below `tol_factor * max(1, M / R^2)`.
    pub tol_factor: f64,
    /// Iteration limit per slab before giving up.
    pub max_iterations: usize,
    /// Slab length as a fraction of the guaranteed horizon (0, 1).
    pub slab_safety: f64,
    /// Hard cap on the slab length (useful for vacuum-like data whose
    /// horizon is infinite).
    pub max_slab: f64,
    /// Seed each slab's iteration with the field frozen at the slab start
    /// instead of the zero field.
    pub warm_start: bool,
    pub deposit: DepositScheme,
    /// Time-stepping scheme for the characteristic flow.
    pub method: Method,
    /// Blow-up guard: abort when the measured momentum support exceeds this
    /// multiple of the support the running slab was sized with.
    pub guard_p_factor: f64,
    /// Blow-up guard: abort when a slab would be shorter than this fraction
    /// of the first slab (the horizon has effectively collapsed).
    pub guard_delta_factor: f64,
    /// Samples per parallel work chunk.  Partial deposits are merged in
    /// chunk order, so for a fixed chunk size the output is bit-identical
    /// across reruns and worker counts (changing the chunk size regroups
    /// floating-point sums and may move last bits).
    pub chunk: usize,
    /// Relative headroom of each slab's radius grid beyond the largest
    /// radius the momentum bound allows the ensemble to reach.
    pub r_margin: f64,
    /// Accuracy-guard threshold of the characteristic integrator.
    pub guard_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            resolution: 32,
            radius_nodes: 512,
            steps_per_slab: 256,
            table_stride: 4,
            tol_factor: 1e-6,
            max_iterations: 25,
            slab_safety: 0.5,
            max_slab: f64::INFINITY,
            warm_start: false,
            deposit: DepositScheme::CloudInCell,
            method: Method::Rk4,
            guard_p_factor: 1e3,
            guard_delta_factor: 1e-6,
            chunk: 1024,
            r_margin: 0.1,
            guard_tol: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 1 {
            return Err(Error::InvalidArgument("resolution must be >= 1".into()));
        }
        if self.radius_nodes < 2 {
            return Err(Error::InvalidArgument("radius_nodes must be >= 2".into()));
        }
        if self.steps_per_slab < 1 || self.table_stride < 1 {
            return Err(Error::InvalidArgument(
                "steps_per_slab and table_stride must be >= 1".into(),
            ));
        }
        if self.steps_per_slab % self.table_stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "table_stride {} must divide steps_per_slab {}",
                self.table_stride, self.steps_per_slab
            )));
        }
        if !(self.tol_factor > 0.0) {
            return Err(Error::InvalidArgument("tol_factor must be positive".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.slab_safety > 0.0 && self.slab_safety < 1.0) {
            return Err(Error::InvalidArgument(
                "slab_safety must lie strictly between 0 and 1".into(),
            ));
        }
        if !(self.max_slab > 0.0) {
            return Err(Error::InvalidArgument("max_slab must be positive".into()));
        }
        if !(self.guard_p_factor > 1.0) {
            return Err(Error::InvalidArgument(
                "guard_p_factor must exceed 1".into(),
            ));
        }
        if !(self.guard_delta_factor > 0.0) {
            return Err(Error::InvalidArgument(
                "guard_delta_factor must be positive".into(),
            ));
        }
        if self.chunk < 1 {
            return Err(Error::InvalidArgument("chunk must be >= 1".into()));
        }
        if !(self.r_margin >= 0.0) {
            return Err(Error::InvalidArgument("r_margin must be >= 0".into()));
        }
        if !(self.guard_tol > 0.0) {
            return Err(Error::InvalidArgument("guard_tol must be positive".into()));
        }
        Ok(())
    }

    /// Stored field rows per slab (including the row at the slab start).
    pub fn rows_per_slab(&self) -> usize {
        self.steps_per_slab / self.table_stride + 1
    }
}

/// Transport-invariant data of the problem: everything the slab machinery
/// needs to know about the initial datum besides the evolving ensemble.
#[derive(Clone, Copy, Debug)]
pub struct ProblemConstants {
    /// Total mass of the datum.
    pub mass: f64,
    /// Momentum growth constant built from the datum's invariant norms.
    pub growth: f64,
    /// Initial spatial support radius (sets the field scale and the guard
    /// radius of the integrator).
    pub r_reference: f64,
    /// Declared initial momentum support radius.
    pub p_declared: f64,
    pub sign: ForceSign,
    pub kinematics: Kinematics,
}

impl ProblemConstants {
    pub fn for_datum(datum: &InitialDatum) -> Self {
        ProblemConstants {
            mass: datum.mass,
            growth: momentum_growth_constant(datum.mass, datum.sup_norm),
            r_reference: datum.r_support,
            p_declared: datum.p_support,
            sign: datum.sign,
            kinematics: datum.kinematics,
        }
    }

    /// Field-distance tolerance used by the fixed-point iteration.
    pub fn field_tolerance(&self, cfg: &SolverConfig) -> f64 {
        let scale = self.mass / (self.r_reference * self.r_reference);
        cfg.tol_factor * scale.max(1.0)
    }

    /// Guard radius handed to the characteristic integrator.
    pub fn r_floor(&self) -> f64 {
        1e-9 * self.r_reference
    }
}

/// The solved field on one time slab, together with the certificates the
/// construction produces along the way.
#[derive(Clone)]
pub struct SlabSolution {
    pub t0: f64,
    /// Slab length.
    pub delta: f64,
    /// The solved field on [t0, t0 + delta].  This is the field the slab's
    /// characteristics were transported through: re-integrating the start
    /// ensemble through it reproduces the transported ensemble bit for bit,
    /// and the field deposited by that transport agrees with it within
    /// `tol` (the certified fixed-point defect).
    pub table: Arc<RadialFieldTable>,
    /// Momentum support radius the slab was sized with (Q(0) of the bound).
    pub p_used: f64,
    /// Slab length the a-priori bound would have allowed (before capping by
    /// the remaining simulation time or `max_slab`).
    pub delta_allowed: f64,
    /// Measured momentum support at each stored row time.
    pub p_rows: Vec<f64>,
    /// Sup field distance between successive iterates, one entry per
    /// fixed-point iteration (the last entry is below tolerance).
    pub iteration_history: Vec<f64>,
    /// Convergence tolerance the distances were compared against.
    pub tol: f64,
    /// Accuracy/radius guard activations of the final transport pass.
    pub guard_hits: u64,
    /// ODE steps per slab (the step size is `delta / steps`).
    pub steps: usize,
    /// ODE steps between stored field rows.
    pub stride: usize,
}

impl SlabSolution {
    /// Characteristic step size.
    pub fn step(&self) -> f64 {
        self.delta / self.steps as f64
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.delta
    }

    /// Times of the stored field rows.
    pub fn row_times(&self) -> Vec<f64> {
        (0..self.table.n_rows()).map(|k| self.table.row_time(k)).collect()
    }

    /// The a-priori momentum majorant of this slab.
    pub fn momentum_majorant(&self, growth: f64) -> FieldBounds {
        FieldBounds { p0: self.p_used, growth }
    }

    /// Ratios of successive iteration distances (the measured contraction
    /// factors of the fixed-point map).
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.iteration_history
            .windows(2)
            .map(|w| w[1] / w[0])
            .collect()
    }

    /// Flow spec that integrates characteristics through this slab exactly
    /// as the solver's final transport pass did.
    pub fn flow_spec(&self, consts: &ProblemConstants, cfg: &SolverConfig) -> FlowSpec {
        FlowSpec {
            field: FieldSource::Table(self.table.clone()),
            sign: consts.sign,
            kinematics: consts.kinematics,
            step: self.step(),
            method: cfg.method,
            r_floor: consts.r_floor(),
            guard_tol: cfg.guard_tol,
        }
    }
}

/// Output of one transport pass of a whole ensemble through a candidate
/// field over one slab.
struct TransportPass {
    /// Deposited node weights at rows 1..=n_segments (row 0 never changes).
    row_weights: Vec<Vec<f64>>,
    /// Transported coordinates, in input order.
    finals: Vec<Sample>,
    /// Max sample speed at rows 1..=n_segments.
    p_rows: Vec<f64>,
    guard_hits: u64,
}

/// Transport every sample through `spec`'s field from t0 over n_steps of
/// size h, depositing at every stride-th step.  Chunked deterministically:
/// chunk results are merged in chunk order whatever the worker count.
fn transport_pass(
    samples: &[Sample],
    spec: &FlowSpec,
    t0: f64,
    h: f64,
    n_steps: usize,
    stride: usize,
    grid: RadiusGrid,
    scheme: DepositScheme,
    chunk: usize,
) -> Result<TransportPass> {
    let n_segments = n_steps / stride;
    let nodes = grid.nodes;
    let ranges: Vec<(usize, usize)> = (0..samples.len())
        .step_by(chunk.max(1))
        .map(|a| (a, (a + chunk).min(samples.len())))
        .collect();

    struct ChunkOut {
        rows: Vec<Vec<f64>>,
        finals: Vec<Sample>,
        p_rows: Vec<f64>,
        guard_hits: u64,
    }

    let chunk_results: Vec<ChunkOut> = ranges
        .par_iter()
        .map(|&(a, b)| -> Result<ChunkOut> {
            let mut rows = vec![vec![0.0_f64; nodes]; n_segments];
            let mut p_rows = vec![0.0_f64; n_segments];
            let mut finals = Vec::with_capacity(b - a);
            let mut guard_hits = 0_u64;
            for s in &samples[a..b] {
                let (end, stats) =
                    advance_observed(spec, s.coord, t0, h, n_steps, |k, c| {
                        if k % stride == 0 {
                            let seg = k / stride - 1;
                            deposit_weight(&mut rows[seg], &grid, scheme, c.r, s.weight);
                            p_rows[seg] = p_rows[seg].max(c.speed());
                        }
                    })?;
                guard_hits += stats.guard_hits as u64;
                finals.push(Sample {
                    coord: end,
                    weight: s.weight,
                    f0: s.f0,
                });
            }
            Ok(ChunkOut {
                rows,
                finals,
                p_rows,
                guard_hits,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // merge in chunk order: identical output for any worker count
    let mut row_weights = vec![vec![0.0_f64; nodes]; n_segments];
    let mut p_rows = vec![0.0_f64; n_segments];
    let mut finals = Vec::with_capacity(samples.len());
    let mut guard_hits = 0_u64;
    for out in chunk_results {
        for (acc, part) in row_weights.iter_mut().zip(&out.rows) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        for (acc, part) in p_rows.iter_mut().zip(&out.p_rows) {
            *acc = acc.max(*part);
        }
        finals.extend_from_slice(&out.finals);
        guard_hits += out.guard_hits;
    }
    Ok(TransportPass {
        row_weights,
        finals,
        p_rows,
        guard_hits,
    })
}

/// Solve one slab [t0, t0 + delta] by fixed-point iteration on the field,
/// starting from the given ensemble (the state at t0).
///
/// `p_used` is the momentum support radius the slab was sized with;
/// `delta_allowed` the uncapped length the bound permits (= delta when the
/// caller did not cap it).  `grid_override` pins the radius grid, e.g. to
/// compare restarted solutions on identical grids.
///
/// Returns the solved slab and the transported ensemble at t0 + delta.
#[allow(clippy::too_many_arguments)]
pub fn picard_slab(
    ensemble: &Ensemble,
    consts: &ProblemConstants,
    t0: f64,
    delta: f64,
    delta_allowed: f64,
    p_used: f64,
    cfg: &SolverConfig,
    grid_override: Option<RadiusGrid>,
) -> Result<(SlabSolution, Ensemble)> {
    cfg.validate()?;
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "slab length must be positive and finite, got {delta}"
        )));
    }
    let bounds = FieldBounds::new(p_used.max(0.0), consts.growth)?;
    if delta >= bounds.horizon() {
        return Err(Error::InvalidArgument(format!(
            "slab length {delta} is not below the guaranteed horizon {}",
            bounds.horizon()
        )));
    }
    let tol = consts.field_tolerance(cfg);
    let h = delta / cfg.steps_per_slab as f64;
    let n_segments = cfg.steps_per_slab / cfg.table_stride;
    let dt_rows = h * cfg.table_stride as f64;

    let grid = match grid_override {
        Some(g) => g,
        None => {
            let reach = ensemble.radial_support()
                + bounds.momentum_bound(delta).min(1e6 * bounds.p0.max(1.0)) * delta;
            let r_max = (reach * (1.0 + cfg.r_margin)).max(consts.r_reference * 1e-6);
            RadiusGrid::new(r_max, cfg.radius_nodes)?
        }
    };

    // the slab-start profile never changes across iterations
    let row0 = CumulativeMass::deposit(&ensemble.samples, grid, cfg.deposit);
    let p_row0 = ensemble.momentum_support();

    let assemble = |rows: &[Vec<f64>]| -> Result<Arc<RadialFieldTable>> {
        let mut profiles = Vec::with_capacity(n_segments + 1);
        profiles.push(row0.clone());
        for w in rows {
            profiles.push(CumulativeMass::from_node_weights(grid, w));
        }
        Ok(Arc::new(RadialFieldTable::from_profiles(t0, dt_rows, profiles)?))
    };

    // iteration seed: the zero field, or the slab-start field frozen in time
    let mut current: Arc<RadialFieldTable> = if cfg.warm_start {
        let rows = vec![node_weights_of(&row0); n_segments];
        assemble(&rows)?
    } else {
        let zeros = vec![vec![0.0_f64; grid.nodes]; n_segments];
        assemble(&zeros)?
    };

    let mut history: Vec<f64> = Vec::new();
    for _iter in 0..cfg.max_iterations {
        let spec = FlowSpec {
            field: FieldSource::Table(current.clone()),
            sign: consts.sign,
            kinematics: consts.kinematics,
            step: h,
            method: cfg.method,
            r_floor: consts.r_floor(),
            guard_tol: cfg.guard_tol,
        };
        let pass = transport_pass(
            &ensemble.samples,
            &spec,
            t0,
            h,
            cfg.steps_per_slab,
            cfg.table_stride,
            grid,
            cfg.deposit,
            cfg.chunk,
        )?;
        let candidate = assemble(&pass.row_weights)?;
        let dist = candidate.sup_g_difference(&current)?;
        history.push(dist);

        // blow-up guard on the measured support
        let p_max_pass = pass.p_rows.iter().cloned().fold(p_row0, f64::max);
        if p_max_pass > cfg.guard_p_factor * p_used.max(consts.p_declared) {
            let mut trace = vec![(t0, p_row0)];
            for (k, p) in pass.p_rows.iter().enumerate() {
                trace.push((t0 + dt_rows * (k + 1) as f64, *p));
            }
            return Err(Error::BlowUp {
                t: t0 + delta,
                reason: format!(
                    "momentum support {} exceeded {} times the slab's sizing support {}",
                    p_max_pass, cfg.guard_p_factor, p_used
                ),
                momentum_trace: trace,
            });
        }

        if dist <= tol {
            // keep the field the final pass actually flowed through (not
            // the deposit it produced): the stored (field, ensemble) pair
            // is then exactly reproducible, and its fixed-point defect is
            // the certified `dist`
            let mut p_rows = Vec::with_capacity(n_segments + 1);
            p_rows.push(p_row0);
            p_rows.extend_from_slice(&pass.p_rows);
            let slab = SlabSolution {
                t0,
                delta,
                table: current,
                p_used,
                delta_allowed,
                p_rows,
                iteration_history: history,
                tol,
                guard_hits: pass.guard_hits,
                steps: cfg.steps_per_slab,
                stride: cfg.table_stride,
            };
            let out = Ensemble {
                samples: pass.finals,
                grid: ensemble.grid,
            };
            return Ok((slab, out));
        }
        current = candidate;
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iterations,
        last: history.last().copied().unwrap_or(f64::NAN),
        tol,
        history,
    })
}

/// Node weights that reproduce a cumulative profile when re-accumulated
/// (weight of node 0 is the profile's own folded-in origin mass: zero).
fn node_weights_of(profile: &CumulativeMass) -> Vec<f64> {
    let mut w = vec![0.0_f64; profile.m.len()];
    for j in 1..profile.m.len() {
        w[j] = profile.m[j] - profile.m[j - 1];
    }
    w
}

/// A solution continued across many slabs up to a target time.
pub struct GlobalSolution {
    pub datum: InitialDatum,
    pub config: SolverConfig,
    pub constants: ProblemConstants,
    pub slabs: Vec<SlabSolution>,
    /// The transported ensemble at the final time.
    pub final_ensemble: Ensemble,
    /// Measured momentum support at the final time.
    pub p_star: f64,
}

impl GlobalSolution {
    pub fn t_end(&self) -> f64 {
        self.slabs.last().map(|s| s.t_end()).unwrap_or(0.0)
    }

    /// Index of the slab covering time t (slab starts win ties, so row
    /// times shared by two slabs resolve to the later slab).
    pub fn slab_index_for(&self, t: f64) -> Result<usize> {
        if self.slabs.is_empty() {
            return Err(Error::TimeOutsideTable { t, t0: 0.0, t1: 0.0 });
        }
        let t_end = self.t_end();
        let slack = 1e-9 * t_end.abs().max(1.0);
        if t < -slack || t > t_end + slack {
            return Err(Error::TimeOutsideTable { t, t0: 0.0, t1: t_end });
        }
        // last slab whose start is <= t
        let mut idx = 0;
        for (i, s) in self.slabs.iter().enumerate() {
            if s.t0 <= t {
                idx = i;
            } else {
                break;
            }
        }
        Ok(idx)
    }

    /// Field amplitude G(t, r) of the solved field.
    pub fn field_at(&self, t: f64, r: f64) -> Result<f64> {
        let idx = self.slab_index_for(t)?;
        self.slabs[idx].table.field_value(t, r)
    }

    /// Replay the ensemble to a step-aligned time t by re-running the exact
    /// transport stepping through the stored slab fields.  Bit-identical to
    /// the states the solver itself visited.
    pub fn ensemble_at(&self, t: f64) -> Result<Ensemble> {
        let mut ens = crate::phase_space::sample_ensemble(&self.datum, self.config.resolution)?;
        if t == 0.0 {
            return Ok(ens);
        }
        let idx = self.slab_index_for(t)?;
        for slab in &self.slabs[..idx] {
            ens = self.replay_slab(slab, &ens, slab.steps)?;
        }
        let slab = &self.slabs[idx];
        let h = slab.step();
        let k_float = (t - slab.t0) / h;
        let k = k_float.round();
        if (k_float - k).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "time {t} is not aligned with the step grid of slab {idx} (offset {})",
                (k_float - k).abs()
            )));
        }
        ens = self.replay_slab(slab, &ens, k as usize)?;
        Ok(ens)
    }

    fn replay_slab(&self, slab: &SlabSolution, ens: &Ensemble, n_steps: usize) -> Result<Ensemble> {
        if n_steps == 0 {
            return Ok(ens.clone());
        }
        let spec = slab.flow_spec(&self.constants, &self.config);
        let finals: Vec<Sample> = ens
            .samples
            .par_chunks(self.config.chunk.max(1))
            .map(|chunk| -> Result<Vec<Sample>> {
                let mut out = Vec::with_capacity(chunk.len());
                for s in chunk {
                    let (end, _) = advance_observed(
                        &spec,
                        s.coord,
                        slab.t0,
                        slab.step(),
                        n_steps,
                        |_, _| {},
                    )?;
                    out.push(Sample {
                        coord: end,
                        weight: s.weight,
                        f0: s.f0,
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(Ensemble {
            samples: finals,
            grid: ens.grid,
        })
    }

    /// Re-transport the initial ensemble through the stored slab fields
    /// once, visiting the ensemble at every `stride`-th stored row (plus the
    /// initial row and each slab's final row).  The visitor receives
    /// (slab index, row index, row time, ensemble); visited states are
    /// bit-identical to the ones the solver itself produced.  Costs one full
    /// transport of the solution regardless of how many rows are visited.
    pub fn walk_rows(
        &self,
        stride: usize,
        mut visit: impl FnMut(usize, usize, f64, &Ensemble) -> Result<()>,
    ) -> Result<()> {
        if stride < 1 {
            return Err(Error::InvalidArgument("row stride must be >= 1".into()));
        }
        let mut ens = crate::phase_space::sample_ensemble(&self.datum, self.config.resolution)?;
        if self.slabs.is_empty() {
            return Ok(());
        }
        visit(0, 0, self.slabs[0].t0, &ens)?;
        for (si, slab) in self.slabs.iter().enumerate() {
            let last_row = slab.table.n_rows() - 1;
            let mut sel_rows: Vec<usize> =
                (1..=last_row).filter(|j| j % stride == 0).collect();
            if sel_rows.last() != Some(&last_row) {
                sel_rows.push(last_row);
            }
            let sel_steps: Vec<usize> = sel_rows.iter().map(|j| j * slab.stride).collect();
            let spec = slab.flow_spec(&self.constants, &self.config);
            let h = slab.step();

            let parts: Vec<Vec<Vec<Sample>>> = ens
                .samples
                .par_chunks(self.config.chunk.max(1))
                .map(|part| -> Result<Vec<Vec<Sample>>> {
                    let mut bufs: Vec<Vec<Sample>> =
                        vec![Vec::with_capacity(part.len()); sel_steps.len()];
                    for s in part {
                        let mut pos = 0usize;
                        advance_observed(&spec, s.coord, slab.t0, h, slab.steps, |k, c| {
                            if pos < sel_steps.len() && k == sel_steps[pos] {
                                bufs[pos].push(Sample {
                                    coord: c,
                                    weight: s.weight,
                                    f0: s.f0,
                                });
                                pos += 1;
                            }
                        })?;
                    }
                    Ok(bufs)
                })
                .collect::<Result<Vec<_>>>()?;

            for (sel_idx, &row_j) in sel_rows.iter().enumerate() {
                let mut samples = Vec::with_capacity(ens.samples.len());
                for part in &parts {
                    samples.extend_from_slice(&part[sel_idx]);
                }
                let at_row = Ensemble {
                    samples,
                    grid: ens.grid,
                };
                visit(si, row_j, slab.table.row_time(row_j), &at_row)?;
                if row_j == last_row {
                    ens = at_row;
                }
            }
        }
        Ok(())
    }

    /// All (row time, measured momentum support) pairs across the slabs.
    pub fn momentum_history(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for slab in &self.slabs {
            let times = slab.row_times();
            for (t, p) in times.iter().zip(&slab.p_rows) {
                out.push((*t, *p));
            }
        }
        out
    }
}

/// Build the solution on [0, t_target] slab by slab.
pub fn continue_solution(
    datum: &InitialDatum,
    cfg: &SolverConfig,
    t_target: f64,
) -> Result<GlobalSolution> {
    cfg.validate()?;
    if !(t_target >= 0.0) || !t_target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target time must be nonnegative and finite, got {t_target}"
        )));
    }
    let consts = ProblemConstants::for_datum(datum);
    let mut ensemble = crate::phase_space::sample_ensemble(datum, cfg.resolution)?;
    let mut slabs: Vec<SlabSolution> = Vec::new();
    let mut t = 0.0_f64;
    let mut first_allowed: Option<f64> = None;

    let time_slack = 1e-12 * t_target.max(1.0);
    while t < t_target - time_slack {
        let p_measured = ensemble.momentum_support();
        let p_used = if slabs.is_empty() {
            consts.p_declared.max(p_measured)
        } else {
            p_measured
        };
        let bounds = FieldBounds::new(p_used, consts.growth)?;
        let delta_allowed = (cfg.slab_safety * bounds.horizon()).min(cfg.max_slab);
        if !(delta_allowed > 0.0) {
            return Err(Error::BlowUp {
                t,
                reason: "the guaranteed slab length vanished".into(),
                momentum_trace: vec![(t, p_measured)],
            });
        }
        if let Some(first) = first_allowed {
            if delta_allowed < cfg.guard_delta_factor * first {
                return Err(Error::BlowUp {
                    t,
                    reason: format!(
                        "guaranteed slab length {delta_allowed} fell below {} times the initial slab length {first}",
                        cfg.guard_delta_factor
                    ),
                    momentum_trace: vec![(t, p_measured)],
                });
            }
        } else {
            first_allowed = Some(delta_allowed);
        }
        let delta = delta_allowed.min(t_target - t);
        let (slab, next) = picard_slab(
            &ensemble, &consts, t, delta, delta_allowed, p_used, cfg, None,
        )?;
        t = slab.t_end();
        slabs.push(slab);
        ensemble = next;
    }

    let p_star = ensemble.momentum_support();
    Ok(GlobalSolution {
        datum: datum.clone(),
        config: cfg.clone(),
        constants: consts,
        slabs,
        final_ensemble: ensemble,
        p_star,
    })
}

/// Advance an ensemble through an externally prescribed field (no
/// self-consistency iteration): every sample integrates n steps of size h.
pub fn advance_ensemble(
    ens: &Ensemble,
    spec: &FlowSpec,
    t0: f64,
    h: f64,
    n: usize,
    chunk: usize,
) -> Result<(Ensemble, StepStats)> {
    let results: Vec<(Vec<Sample>, StepStats)> = ens
        .samples
        .par_chunks(chunk.max(1))
        .map(|part| -> Result<(Vec<Sample>, StepStats)> {
            let mut out = Vec::with_capacity(part.len());
            let mut stats = StepStats::default();
            for s in part {
                let (end, st) = advance_observed(spec, s.coord, t0, h, n, |_, _| {})?;
                stats = stats.merge(st);
                out.push(Sample {
                    coord: end,
                    weight: s.weight,
                    f0: s.f0,
                });
            }
            Ok((out, stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(ens.samples.len());
    let mut stats = StepStats::default();
    for (part, st) in results {
        samples.extend_from_slice(&part);
        stats = stats.merge(st);
    }
    Ok((
        Ensemble {
            samples,
            grid: ens.grid,
        },
        stats,
    ))
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cfg() -> SolverConfig {
        SolverConfig {
            resolution: 16,
            radius_nodes: 128,
            steps_per_slab: 64,
            table_stride: 4,
            ..SolverConfig::default()
        }
    }

    fn indicator() -> InitialDatum {
        InitialDatum::indicator_ball(Kinematics::NonRelativistic, ForceSign::Attractive)
    }

    #[test]
    fn config_validation_catches_bad_knobs() {
        let mut cfg = SolverConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.table_stride = 3; // does not divide 256
        assert!(cfg.validate().is_err());
        cfg = SolverConfig::default();
        cfg.slab_safety = 1.0;
        assert!(cfg.validate().is_err());
        cfg = SolverConfig::default();
        cfg.tol_factor = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vacuum_solution_has_zero_field_and_constant_support() {
        let datum = InitialDatum::vacuum(Kinematics::NonRelativistic, ForceSign::Attractive);
        let cfg = SolverConfig {
            max_slab: 0.5,
            ..small_cfg()
        };
        let sol = continue_solution(&datum, &cfg, 1.0).unwrap();
        assert_eq!(sol.slabs.len(), 2);
        assert_eq!(sol.p_star, 0.0);
        for slab in &sol.slabs {
            assert_eq!(slab.table.total_mass(), 0.0);
            assert_eq!(slab.iteration_history.len(), 1);
            assert_eq!(slab.iteration_history[0], 0.0);
        }
        assert_eq!(sol.field_at(0.7, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn single_slab_iteration_contracts_and_certifies_the_bound() {
        let datum = indicator();
        let cfg = small_cfg();
        let sol = continue_solution(&datum, &cfg, 0.0055).unwrap();
        assert_eq!(sol.slabs.len(), 1, "horizon/2 = 0.00725 covers the target");
        let slab = &sol.slabs[0];
        // the first slab is sized from the declared support: horizon/2
        assert_relative_eq!(slab.p_used, 1.0);
        assert_relative_eq!(
            slab.delta_allowed,
            0.5 * 0.014497975248468218,
            max_relative = 1e-12
        );
        // iteration converged within the allowed budget, distances decayed
        let h = &slab.iteration_history;
        assert!(h.len() >= 2 && h.len() <= 10, "iterations: {h:?}");
        assert!(*h.last().unwrap() <= slab.tol);
        for pair in h.windows(2) {
            assert!(pair[1] < pair[0], "distances must decrease: {h:?}");
        }
        // measured support stays below the a-priori majorant at every row
        let bounds = slab.momentum_majorant(sol.constants.growth);
        for (k, (t, p)) in slab.row_times().iter().zip(&slab.p_rows).enumerate() {
            let q = bounds.momentum_bound(t - slab.t0);
            assert!(
                *p <= q + 1e-12,
                "row {k}: measured support {p} above majorant {q}"
            );
        }
        // mass is conserved exactly by the clamped deposit
        assert_relative_eq!(
            slab.table.total_mass(),
            sol.final_ensemble.total_weight(),
            max_relative = 1e-13
        );
    }

    #[test]
    fn restart_consistency_on_identical_grids() {
        // solve two consecutive half-length slabs and one full slab with the
        // same radius grid, step size and row spacing: the exact discrete
        // fixed points coincide on the overlap by causality, so the computed
        // fields must agree within a few stopping tolerances
        let datum = indicator();
        let cfg = small_cfg();
        let cfg_half = SolverConfig {
            steps_per_slab: cfg.steps_per_slab / 2,
            ..cfg.clone()
        };
        let consts = ProblemConstants::for_datum(&datum);
        let ens = crate::phase_space::sample_ensemble(&datum, cfg.resolution).unwrap();
        let delta = 0.004;
        let grid = RadiusGrid::new(1.5, cfg.radius_nodes).unwrap();

        let (full, _) = picard_slab(&ens, &consts, 0.0, delta, delta, 1.0, &cfg, Some(grid)).unwrap();
        let (first, mid_ens) = picard_slab(
            &ens,
            &consts,
            0.0,
            delta / 2.0,
            delta,
            1.0,
            &cfg_half,
            Some(grid),
        )
        .unwrap();
        let p_mid = mid_ens.momentum_support();
        let (second, _) = picard_slab(
            &mid_ens,
            &consts,
            delta / 2.0,
            delta / 2.0,
            delta,
            p_mid,
            &cfg_half,
            Some(grid),
        )
        .unwrap();

        let times_lo: Vec<f64> = first.row_times();
        let times_hi: Vec<f64> = second.row_times();
        let d_lo = first.table.sup_g_difference_at(&full.table, &times_lo);
        let d_hi = second.table.sup_g_difference_at(&full.table, &times_hi);
        let tol = consts.field_tolerance(&cfg);
        assert!(d_lo <= 10.0 * tol, "first-half field mismatch {d_lo} vs tol {tol}");
        assert!(d_hi <= 10.0 * tol, "second-half field mismatch {d_hi} vs tol {tol}");
    }

    #[test]
    fn non_convergence_is_reported_with_history() {
        let datum = indicator();
        let cfg = SolverConfig {
            max_iterations: 1,
            ..small_cfg()
        };
        let err = match continue_solution(&datum, &cfg, 0.005) {
            Err(e) => e,
            Ok(_) => panic!("expected non-convergence"),
        };
        match err {
            Error::NonConvergence {
                iterations,
                history,
                last,
                tol,
            } => {
                assert_eq!(iterations, 1);
                assert_eq!(history.len(), 1);
                assert!(last > tol);
            }
            other => panic!("expected non-convergence, got {other}"),
        }
    }

    #[test]
    fn slab_length_guard_trips_when_asked_to() {
        let datum = indicator();
        let cfg = SolverConfig {
            // a second slab shorter than 2x the first trips the guard; the
            // support can only grow, so this always fires at the restart
            guard_delta_factor: 2.0,
            ..small_cfg()
        };
        let err = match continue_solution(&datum, &cfg, 0.05) {
            Err(e) => e,
            Ok(_) => panic!("expected the slab-length guard to fire"),
        };
        match err {
            Error::BlowUp { reason, .. } => {
                assert!(reason.contains("slab length"), "reason: {reason}");
            }
            other => panic!("expected blow-up guard, got {other}"),
        }
    }

    #[test]
    fn replay_reproduces_the_final_ensemble_bit_for_bit() {
        let datum = indicator();
        let cfg = small_cfg();
        let sol = continue_solution(&datum, &cfg, 0.012).unwrap();
        assert!(sol.slabs.len() >= 2);
        let replayed = sol.ensemble_at(sol.t_end()).unwrap();
        assert_eq!(replayed.len(), sol.final_ensemble.len());
        for (a, b) in replayed.samples.iter().zip(&sol.final_ensemble.samples) {
            assert_eq!(a.coord.r.to_bits(), b.coord.r.to_bits());
            assert_eq!(a.coord.w.to_bits(), b.coord.w.to_bits());
            assert_eq!(a.coord.l.to_bits(), b.coord.l.to_bits());
        }
        // a mid-slab row time is step-aligned and replayable
        let slab = &sol.slabs[1];
        let t_mid = slab.table.row_time(slab.table.n_rows() / 2);
        let mid = sol.ensemble_at(t_mid).unwrap();
        assert_eq!(mid.len(), sol.final_ensemble.len());
        // a wildly unaligned time is rejected
        assert!(sol.ensemble_at(t_mid + 0.37 * slab.step()).is_err());
    }

    #[test]
    fn reruns_are_bit_identical_and_chunking_only_regroups_rounding() {
        let datum = indicator();
        let cfg = SolverConfig { chunk: 64, ..small_cfg() };
        let sol_a = continue_solution(&datum, &cfg, 0.006).unwrap();
        let sol_b = continue_solution(&datum, &cfg, 0.006).unwrap();
        assert_eq!(sol_a.slabs.len(), sol_b.slabs.len());
        for (sa, sb) in sol_a.slabs.iter().zip(&sol_b.slabs) {
            assert_eq!(sa.table.n_rows(), sb.table.n_rows());
            for k in 0..sa.table.n_rows() {
                for (ga, gb) in sa.table.g_row(k).iter().zip(sb.table.g_row(k)) {
                    assert_eq!(ga.to_bits(), gb.to_bits(), "row {k} differs");
                }
            }
        }
        for (a, b) in sol_a
            .final_ensemble
            .samples
            .iter()
            .zip(&sol_b.final_ensemble.samples)
        {
            assert_eq!(a.coord.r.to_bits(), b.coord.r.to_bits());
            assert_eq!(a.coord.w.to_bits(), b.coord.w.to_bits());
        }

        // a different chunk size regroups the deposit sums: the results may
        // move in the last bits but nowhere near the physical tolerances
        let cfg_c = SolverConfig { chunk: 7, ..small_cfg() };
        let sol_c = continue_solution(&datum, &cfg_c, 0.006).unwrap();
        assert_eq!(sol_a.slabs.len(), sol_c.slabs.len());
        for (sa, sc) in sol_a.slabs.iter().zip(&sol_c.slabs) {
            let times = sa.row_times();
            let d = sa.table.sup_g_difference_at(&sc.table, &times);
            assert!(d <= 1e-9, "chunk regrouping moved the field by {d}");
        }
    }

    #[test]
    fn repulsive_coupling_pushes_the_support_outward_more_slowly_than_the_bound() {
        let datum = InitialDatum::indicator_ball(Kinematics::NonRelativistic, ForceSign::Repulsive);
        let cfg = small_cfg();
        let sol = continue_solution(&datum, &cfg, 0.01).unwrap();
        // repulsion accelerates particles outward: support must grow, but
        // stay under the majorant (which is sign-agnostic)
        assert!(sol.p_star > 1.0);
        for slab in &sol.slabs {
            let bounds = slab.momentum_majorant(sol.constants.growth);
            for (t, p) in slab.row_times().iter().zip(&slab.p_rows) {
                assert!(*p <= bounds.momentum_bound(t - slab.t0));
            }
        }
    }
}
