//! Simulator for the spherically symmetric Vlasov-Poisson system, in both
//! non-relativistic and relativistic kinematics, built around the
//! characteristic (Lagrangian) picture:
//!
//! * [`phase_space`] — reduction of (x, v) to the invariants (r, w, L),
//!   initial data with declared support and norms, deterministic quadrature
//!   ensembles, and phase-space table files.
//! * [`field`] — radial mass profiles m(t, r) and field amplitudes
//!   G(t, r) = m(t, r)/r^2 deposited from ensembles onto radius grids, plus
//!   the a-priori field bounds that drive the time-slab machinery.
//! * [`flow`] — the characteristic ODE in (r, w) at fixed L, integrated
//!   pointwise with either a guarded Runge-Kutta scheme or a volume-exact
//!   kick-drift-kick splitting, together with flow-map quality probes
//!   (inverse residual, phase-volume ratio).
//! * [`solver`] — the fixed-point iteration on the radial field over time
//!   slabs of guaranteed length, restarted slab after slab into a global
//!   solution with a momentum-support certificate.
//! * [`diagnostics`] — conserved-quantity reports along a solution: mass,
//!   energy, Casimir functionals, momentum support, stationarity residuals.
//! * [`steady_states`] — polytropic steady states constructed by shooting on
//!   the self-consistency problem, their exact static fields, and
//!   perturbation operators for stability experiments.
//! * [`verification`] — the property battery tying the pieces together.

pub mod diagnostics;
pub mod error;
pub mod field;
pub mod flow;
pub mod phase_space;
pub mod solver;
pub mod steady_states;
pub mod verification;

pub use error::{Error, Result};
pub use field::{CumulativeMass, DepositScheme, FieldBounds, RadialFieldTable, RadiusGrid};
pub use flow::{FieldSource, FlowSpec, Kinematics, Method};
pub use phase_space::{
    lift, lp_norm, read_table_file, reduce, sample_ensemble, write_table_file, Ensemble,
    ForceSign, FullCoord, InitialDatum, ReducedCoord, Sample, SamplingGrid, Vec3,
};
pub use solver::{continue_solution, GlobalSolution, SlabSolution, SolverConfig};
pub use steady_states::{build_polytrope, perturb, Perturbation, PolytropeSpec, SteadyState};
