//! Isotropic polytropic equilibria and measure-preserving perturbations.
//!
//! A polytrope is the steady state whose distribution depends on the particle
//! energy alone through a power-law cutoff, `f = (margin)_+^k`.  Writing
//! `y(r)` for the cutoff margin at zero velocity (`y = E0 - U` with classical
//! kinetic energy, `y = E0 - 1 - U` with relativistic kinetic energy, where
//! `E0` is the cutoff energy and `U` the potential), the spatial density
//! becomes a function `g_k(y)` of the margin alone and the potential solves
//! the radial Poisson equation `(r^2 U')' = 4 pi r^2 g_k(y)`.
//!
//! Shooting outward in the margin variable from `y(0) = central_value`
//! removes the circular dependence between the cutoff energy and the central
//! potential: the ODE for `y` never mentions `E0`, and matching the exterior
//! potential `-M/r` at the support boundary (where `y = 0`) recovers `E0`
//! afterwards.  The builder integrates `y' = -m/r^2`, `m' = 4 pi r^2 g(y)`
//! with a fixed-step fourth-order Runge-Kutta scheme, starts across the
//! first cell with the regular series expansion (the right side is 0/0 at
//! the center), locates the support boundary by Newton refinement of the
//! final partial step, and reports an error if the margin never vanishes
//! within the radius cap.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{CumulativeMass, RadialFieldTable, RadiusGrid};
use crate::flow::{integrate, FieldSource, FlowSpec, Kinematics};
use crate::phase_space::{ForceSign, InitialDatum, ReducedCoord};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

/// Exponents must lie strictly below this value for the equilibrium to have
/// compact support and finite mass.
pub const MAX_EXPONENT: f64 = 3.5;

/// Largest admissible perturbation amplitude.
pub const MAX_PERTURBATION: f64 = 0.5;

// ---------------------------------------------------------------------------
// density of the energy-cutoff ansatz
// ---------------------------------------------------------------------------

/// The constant `c_k = (2 pi)^{3/2} Gamma(k+1) / Gamma(k+5/2)` in the
/// classical-kinematics density `g_k(y) = c_k y_+^{k+3/2}`, obtained by
/// integrating `(y - |v|^2/2)_+^k` over velocity space.
pub fn polytropic_constant(k: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    two_pi.powf(1.5) * libm::tgamma(k + 1.0) / libm::tgamma(k + 2.5)
}

/// Density induced by the cutoff power with classical kinematics.
pub fn classical_density(k: f64, y: f64) -> f64 {
    if y <= 0.0 {
        0.0
    } else {
        polytropic_constant(k) * y.powf(k + 1.5)
    }
}

/// Density induced by the cutoff power with relativistic kinematics,
/// `4 pi * integral of (y + 1 - sqrt(1+u^2))_+^k u^2 du` over the momentum
/// modulus, by composite Simpson quadrature (closed form for k = 0).
pub fn relativistic_density(k: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let u_cap_sq = (1.0 + y) * (1.0 + y) - 1.0;
    if k == 0.0 {
        return FOUR_PI / 3.0 * u_cap_sq.powf(1.5);
    }
    momentum_quadrature(k, y, |_u_sq| 1.0)
}

/// Kinetic-energy density (including rest mass) of the relativistic cutoff
/// power: the same integral weighted by `sqrt(1+u^2)`.
fn relativistic_kinetic_density(k: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    momentum_quadrature(k, y, |u_sq| (1.0 + u_sq).sqrt())
}

/// Composite Simpson quadrature of `weight(u^2) * (y+1-sqrt(1+u^2))^k u^2`
/// over `u` in `[0, u_cap]`; both endpoints contribute zero.
fn momentum_quadrature(k: f64, y: f64, weight: impl Fn(f64) -> f64) -> f64 {
    const INTERVALS: usize = 256;
    let u_cap = ((1.0 + y) * (1.0 + y) - 1.0).sqrt();
    let h = u_cap / INTERVALS as f64;
    let mut acc = 0.0;
    for i in 1..INTERVALS {
        let u = i as f64 * h;
        let u_sq = u * u;
        let a = y + 1.0 - (1.0 + u_sq).sqrt();
        if a <= 0.0 {
            continue;
        }
        let margin_pow = if k == 0.0 { 1.0 } else { a.powf(k) };
        let v = weight(u_sq) * margin_pow * u_sq;
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    FOUR_PI * acc * h / 3.0
}

/// Margin-to-density map used by the shooting loop: a closed form for
/// classical kinematics, a linearly interpolated cache of the momentum
/// quadrature for relativistic kinematics (built once per equilibrium).
#[derive(Clone)]
enum DensityModel {
    Classical { k: f64, c: f64 },
    RelativisticStep,
    RelativisticCached { dy: f64, values: Vec<f64> },
}

impl DensityModel {
    fn new(k: f64, margin_cap: f64, kinematics: Kinematics) -> Self {
        match kinematics {
            Kinematics::NonRelativistic => DensityModel::Classical {
                k,
                c: polytropic_constant(k),
            },
            Kinematics::Relativistic if k == 0.0 => DensityModel::RelativisticStep,
            Kinematics::Relativistic => {
                const NODES: usize = 4097;
                let dy = margin_cap / (NODES - 1) as f64;
                let values = (0..NODES)
                    .map(|i| relativistic_density(k, i as f64 * dy))
                    .collect();
                DensityModel::RelativisticCached { dy, values }
            }
        }
    }

    fn density(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        match self {
            DensityModel::Classical { k, c } => c * y.powf(k + 1.5),
            DensityModel::RelativisticStep => {
                let u_cap_sq = (1.0 + y) * (1.0 + y) - 1.0;
                FOUR_PI / 3.0 * u_cap_sq.powf(1.5)
            }
            DensityModel::RelativisticCached { dy, values } => {
                let x = y / dy;
                let j = (x.floor() as usize).min(values.len() - 2);
                let t = (x - j as f64).clamp(0.0, 1.0);
                values[j] * (1.0 - t) + values[j + 1] * t
            }
        }
    }

    fn kinetic_density(&self, k: f64, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        match self {
            DensityModel::Classical { k, c } => {
                3.0 * c * y.powf(k + 2.5) / (2.0 * k + 5.0)
            }
            DensityModel::RelativisticStep | DensityModel::RelativisticCached { .. } => {
                relativistic_kinetic_density(k, y)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// the equilibrium family
// ---------------------------------------------------------------------------

/// Parameters of a polytropic equilibrium: cutoff exponent, central cutoff
/// margin `y(0) > 0`, and the particle kinematics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolytropeSpec {
    /// Cutoff exponent in `[0, 3.5)`.
    pub k: f64,
    /// Cutoff margin at the center, `y(0) > 0`.
    pub central_value: f64,
    pub kinematics: Kinematics,
}

impl PolytropeSpec {
    pub fn new(k: f64, central_value: f64, kinematics: Kinematics) -> Result<Self> {
        if !k.is_finite() || !(0.0..MAX_EXPONENT).contains(&k) {
            return Err(Error::InvalidArgument(format!(
                "polytropic exponent must lie in [0, {MAX_EXPONENT}), got {k} \
                 (negative exponents give unbounded distributions, larger ones \
                 unbounded support)"
            )));
        }
        if !(central_value > 0.0) || !central_value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "central cutoff margin must be positive and finite, got {central_value}"
            )));
        }
        Ok(PolytropeSpec {
            k,
            central_value,
            kinematics,
        })
    }

    /// Homology length scale `sqrt(y0 / (4 pi g(y0)))` of the equilibrium:
    /// the support radius is this scale times an order-one factor.
    pub fn natural_radius_scale(&self) -> f64 {
        let g0 = match self.kinematics {
            Kinematics::NonRelativistic => classical_density(self.k, self.central_value),
            Kinematics::Relativistic => relativistic_density(self.k, self.central_value),
        };
        (self.central_value / (FOUR_PI * g0)).sqrt()
    }

    /// A shooting step that resolves the profile to well below the accuracy
    /// of the stored tables.
    pub fn default_step(&self) -> f64 {
        self.natural_radius_scale() / 512.0
    }
}

/// A compactly supported equilibrium: cutoff energy, support radius, total
/// mass, and the radial profiles of the cutoff margin and enclosed mass on a
/// uniform grid (node spacing `dr`, nodes `j * dr` strictly inside the
/// support; the boundary values `y = 0`, `m = m_star` at `r_star` are held
/// separately because the boundary rarely falls on a node).
#[derive(Clone)]
pub struct SteadyState {
    pub k: f64,
    pub central_value: f64,
    pub kinematics: Kinematics,
    /// Cutoff energy recovered from the exterior matching: `-M/R` with
    /// classical kinematics, `1 - M/R` with relativistic kinematics.
    pub e0: f64,
    /// Support radius: the first zero of the cutoff margin.
    pub r_star: f64,
    /// Total mass `m(r_star)`.
    pub m_star: f64,
    /// Node spacing of the stored profiles.
    pub dr: f64,
    margin: Arc<Vec<f64>>,
    mass_profile: Arc<Vec<f64>>,
    model: DensityModel,
}

/// Linear interpolation of the margin profile, with the final partial cell
/// interpolating down to zero at the support boundary.
fn margin_interp(dr: f64, nodes: &[f64], r_star: f64, r: f64) -> f64 {
    if r < 0.0 || r >= r_star {
        return 0.0;
    }
    let x = r / dr;
    let j = x.floor() as usize;
    if j + 1 < nodes.len() {
        let t = x - j as f64;
        nodes[j] * (1.0 - t) + nodes[j + 1] * t
    } else {
        let r_last = (nodes.len() - 1) as f64 * dr;
        let den = r_star - r_last;
        if den > 0.0 {
            let last = *nodes.last().expect("profiles are nonempty");
            last * (1.0 - (r - r_last) / den)
        } else {
            0.0
        }
    }
}

impl SteadyState {
    /// Cutoff margin `y(r)` (zero at and beyond the support boundary).
    pub fn margin_value(&self, r: f64) -> f64 {
        margin_interp(self.dr, &self.margin, self.r_star, r)
    }

    /// Enclosed mass `m(r)` (constant `m_star` beyond the boundary).
    pub fn enclosed_mass(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= self.r_star {
            return self.m_star;
        }
        let x = r / self.dr;
        let j = x.floor() as usize;
        let nodes = &self.mass_profile;
        if j + 1 < nodes.len() {
            let t = x - j as f64;
            nodes[j] * (1.0 - t) + nodes[j + 1] * t
        } else {
            let r_last = (nodes.len() - 1) as f64 * self.dr;
            let den = self.r_star - r_last;
            if den > 0.0 {
                let last = *nodes.last().expect("profiles are nonempty");
                let t = (r - r_last) / den;
                last * (1.0 - t) + self.m_star * t
            } else {
                self.m_star
            }
        }
    }

    /// Potential `U(r)`, normalized to vanish at infinity (`-M/r` outside
    /// the support).
    pub fn potential_value(&self, r: f64) -> f64 {
        if r >= self.r_star {
            return -self.m_star / r.max(self.r_star);
        }
        let offset = match self.kinematics {
            Kinematics::NonRelativistic => self.e0,
            Kinematics::Relativistic => self.e0 - 1.0,
        };
        offset - self.margin_value(r)
    }

    /// Spatial density `g_k(y(r))`.
    pub fn density(&self, r: f64) -> f64 {
        self.model.density(self.margin_value(r))
    }

    /// Momentum cutoff: the speed at which the margin closes at the center.
    pub fn momentum_cutoff(&self) -> f64 {
        let y0 = self.central_value;
        match self.kinematics {
            Kinematics::NonRelativistic => (2.0 * y0).sqrt(),
            Kinematics::Relativistic => ((1.0 + y0) * (1.0 + y0) - 1.0).sqrt(),
        }
    }

    /// Gravitational contraction time scale `sqrt(r_star^3 / m_star)`.
    pub fn dynamical_time(&self) -> f64 {
        (self.r_star.powi(3) / self.m_star).sqrt()
    }

    /// Margin profile at the stored nodes (strictly decreasing, positive).
    pub fn margin_nodes(&self) -> &[f64] {
        &self.margin
    }

    /// Enclosed-mass profile at the stored nodes.
    pub fn mass_nodes(&self) -> &[f64] {
        &self.mass_profile
    }

    /// The phase-space distribution of the equilibrium as an initial datum
    /// with exactly known norms: `f(r,w,L) = a_+^k` where `a` is the local
    /// cutoff margin at speed `q = sqrt(w^2 + L^2/r^2)`.
    pub fn datum(&self) -> InitialDatum {
        let k = self.k;
        let kinematics = self.kinematics;
        let dr = self.dr;
        let r_star = self.r_star;
        let margin = Arc::clone(&self.margin);
        let eval = move |r: f64, w: f64, l: f64| -> f64 {
            let y = margin_interp(dr, &margin, r_star, r);
            if y <= 0.0 {
                return 0.0;
            }
            let q = ReducedCoord::new(r, w, l).speed();
            let a = match kinematics {
                Kinematics::NonRelativistic => y - 0.5 * q * q,
                Kinematics::Relativistic => y + 1.0 - (1.0 + q * q).sqrt(),
            };
            if a <= 0.0 {
                0.0
            } else if k == 0.0 {
                1.0
            } else {
                a.powf(k)
            }
        };
        let sup = if self.k == 0.0 {
            1.0
        } else {
            self.central_value.powf(self.k)
        };
        InitialDatum::with_declared_norms(
            Arc::new(eval),
            self.r_star,
            self.momentum_cutoff(),
            sup,
            self.m_star,
            self.kinematics,
            ForceSign::Attractive,
        )
        .expect("equilibrium support radii and norms are positive by construction")
    }

    /// The frozen field of the equilibrium as a single-row table on a
    /// uniform grid over `[0, r_star]` (queries beyond the grid fall back to
    /// the exact exterior `m_star / r^2`).
    pub fn static_field(&self, nodes: usize) -> Result<RadialFieldTable> {
        let grid = RadiusGrid::new(self.r_star, nodes)?;
        let mut m = Vec::with_capacity(nodes);
        for j in 0..nodes {
            m.push(self.enclosed_mass(grid.node(j)));
        }
        let mut g = vec![0.0; nodes];
        for j in 1..nodes {
            let r = grid.node(j);
            g[j] = m[j] / (r * r);
        }
        RadialFieldTable::from_profiles(0.0, 0.0, vec![CumulativeMass { grid, m, g }])
    }

    /// Continuum kinetic energy of the equilibrium (with relativistic
    /// kinematics this includes the rest mass, matching the convention of
    /// the ensemble diagnostics).
    pub fn kinetic_energy(&self) -> f64 {
        let n = self.margin.len();
        let mut vals = Vec::with_capacity(n);
        for (j, &y) in self.margin.iter().enumerate() {
            let r = j as f64 * self.dr;
            vals.push(FOUR_PI * r * r * self.model.kinetic_density(self.k, y));
        }
        let mut e = integrate_uniform(&vals, self.dr);
        // final partial cell: the kinetic density falls to zero at the boundary
        let r_last = (n - 1) as f64 * self.dr;
        e += 0.5 * (self.r_star - r_last) * vals[n - 1];
        e
    }

    /// Continuum potential energy `-1/2 [ int (m/r)^2 dr + m_star^2/r_star ]`
    /// (the exterior tail is exact).
    pub fn potential_energy(&self) -> f64 {
        let n = self.mass_profile.len();
        let mut vals = vec![0.0; n];
        for j in 1..n {
            let r = j as f64 * self.dr;
            let v = self.mass_profile[j] / r;
            vals[j] = v * v;
        }
        let mut integral = integrate_uniform(&vals, self.dr);
        let r_last = (n - 1) as f64 * self.dr;
        let v_star = self.m_star / self.r_star;
        integral += 0.5 * (self.r_star - r_last) * (vals[n - 1] + v_star * v_star);
        integral += self.m_star * self.m_star / self.r_star;
        -0.5 * integral
    }
}

/// Composite Simpson integral of uniformly spaced samples (trapezoid on a
/// trailing odd interval).
fn integrate_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let pairs = (n - 1) / 2;
    let mut acc = 0.0;
    for p in 0..pairs {
        let i = 2 * p;
        acc += h / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
    }
    if (n - 1) % 2 == 1 {
        acc += 0.5 * h * (values[n - 2] + values[n - 1]);
    }
    acc
}

// ---------------------------------------------------------------------------
// the shooting builder
// ---------------------------------------------------------------------------

/// One fourth-order Runge-Kutta step of the shooting system
/// `y' = -m/r^2`, `m' = 4 pi r^2 g(y)` (only evaluated at `r > 0`).
fn rk4_step(model: &DensityModel, r: f64, y: f64, m: f64, h: f64) -> (f64, f64) {
    let f = |r: f64, y: f64, m: f64| (-m / (r * r), FOUR_PI * r * r * model.density(y));
    let (k1y, k1m) = f(r, y, m);
    let (k2y, k2m) = f(r + 0.5 * h, y + 0.5 * h * k1y, m + 0.5 * h * k1m);
    let (k3y, k3m) = f(r + 0.5 * h, y + 0.5 * h * k2y, m + 0.5 * h * k2m);
    let (k4y, k4m) = f(r + h, y + h * k3y, m + h * k3m);
    (
        y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
        m + h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m),
    )
}

/// Newton refinement of the boundary crossing: the margin after a partial
/// step of length `dr` from the last interior node is driven to zero using
/// its exact slope `-m/r^2`.  Returns the boundary radius and the total mass.
fn refine_crossing(model: &DensityModel, r_a: f64, y_a: f64, m_a: f64, h: f64, y_full: f64) -> (f64, f64) {
    let mut dr = (h * y_a / (y_a - y_full)).clamp(1e-9 * h, h);
    for _ in 0..8 {
        let (y_c, m_c) = rk4_step(model, r_a, y_a, m_a, dr);
        let r_c = r_a + dr;
        let slope = -m_c / (r_c * r_c);
        if !(slope < 0.0) {
            break;
        }
        dr = (dr - y_c / slope).clamp(1e-9 * h, h);
    }
    let (_, m_c) = rk4_step(model, r_a, y_a, m_a, dr);
    (r_a + dr, m_c)
}

/// Build a polytropic equilibrium by outward shooting with the given step.
///
/// Errors if the margin never vanishes within 400 natural radius scales:
/// the requested exponent/central value combination then has no compactly
/// supported equilibrium at a resolvable radius.
pub fn build_polytrope(spec: &PolytropeSpec, step: f64) -> Result<SteadyState> {
    let cap = 400.0 * spec.natural_radius_scale();
    build_polytrope_capped(spec, step, cap)
}

fn build_polytrope_capped(spec: &PolytropeSpec, step: f64, r_cap: f64) -> Result<SteadyState> {
    // revalidate: specs can be constructed literally
    let spec = PolytropeSpec::new(spec.k, spec.central_value, spec.kinematics)?;
    let scale = spec.natural_radius_scale();
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "shooting step must be positive and finite, got {step}"
        )));
    }
    if step > scale / 4.0 {
        return Err(Error::InvalidArgument(format!(
            "shooting step {step} is too coarse for the natural radius scale \
             {scale:.6e}; use at most a quarter of it"
        )));
    }
    let y0 = spec.central_value;
    let model = DensityModel::new(spec.k, y0, spec.kinematics);
    let g0 = model.density(y0);
    let h = step;
    let mut margin = vec![y0];
    let mut mass = vec![0.0];
    // series start across the first cell, where the ODE right side is 0/0
    margin.push(y0 - FOUR_PI / 6.0 * g0 * h * h);
    mass.push(FOUR_PI / 3.0 * g0 * h * h * h);
    let mut j = 1usize;
    let (r_star, m_star) = loop {
        let r = j as f64 * h;
        if r > r_cap {
            return Err(Error::Shooting(format!(
                "cutoff margin still positive at radius {r:.3e} (cap \
                 {r_cap:.3e}): exponent {} with central value {} has no \
                 compactly supported equilibrium within the cap",
                spec.k, y0
            )));
        }
        let (y_next, m_next) = rk4_step(&model, r, margin[j], mass[j], h);
        if !y_next.is_finite() || !m_next.is_finite() {
            return Err(Error::Shooting(
                "shooting produced non-finite profile values".into(),
            ));
        }
        if y_next <= 0.0 {
            break refine_crossing(&model, r, margin[j], mass[j], h, y_next);
        }
        margin.push(y_next);
        mass.push(m_next);
        j += 1;
    };
    let e0 = match spec.kinematics {
        Kinematics::NonRelativistic => -m_star / r_star,
        Kinematics::Relativistic => 1.0 - m_star / r_star,
    };
    Ok(SteadyState {
        k: spec.k,
        central_value: y0,
        kinematics: spec.kinematics,
        e0,
        r_star,
        m_star,
        dr: h,
        margin: Arc::new(margin),
        mass_profile: Arc::new(mass),
        model,
    })
}

// ---------------------------------------------------------------------------
// measure-preserving perturbations
// ---------------------------------------------------------------------------

/// An explicit measure-preserving rearrangement applied to an equilibrium.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    /// Shear the radial momentum, `w -> w + eps * r` (unit Jacobian).
    RadialKick(f64),
    /// Precompose with the backward flow of the frozen equilibrium field for
    /// a duration `eps` (flows preserve the phase-space measure).
    PhaseShear(f64),
}

impl Perturbation {
    pub fn amplitude(self) -> f64 {
        match self {
            Perturbation::RadialKick(eps) | Perturbation::PhaseShear(eps) => eps,
        }
    }
}

/// Perturb an equilibrium by a measure-preserving map of amplitude
/// `|eps| <= 0.5`.  Mass, sup norm and all rearrangement invariants of the
/// result equal those of the equilibrium; only the radial-kick widens the
/// declared momentum support (by `|eps| * r_star`).
pub fn perturb(state: &SteadyState, mode: Perturbation) -> Result<InitialDatum> {
    let eps = mode.amplitude();
    if !eps.is_finite() || eps.abs() > MAX_PERTURBATION {
        return Err(Error::InvalidArgument(format!(
            "perturbation amplitude must satisfy |eps| <= {MAX_PERTURBATION}, got {eps}"
        )));
    }
    let base = state.datum();
    if eps == 0.0 {
        return Ok(base);
    }
    match mode {
        Perturbation::RadialKick(_) => {
            let p_support = base.p_support + eps.abs() * base.r_support;
            let inner = base.clone();
            InitialDatum::with_declared_norms(
                Arc::new(move |r, w, l| inner.value(r, w - eps * r, l)),
                base.r_support,
                p_support,
                base.sup_norm,
                base.mass,
                base.kinematics,
                base.sign,
            )
        }
        Perturbation::PhaseShear(_) => {
            let table = Arc::new(state.static_field(4097)?);
            let step = state.dynamical_time() / 512.0;
            let spec = Arc::new(FlowSpec::new(
                FieldSource::Table(table),
                ForceSign::Attractive,
                state.kinematics,
                step,
            )?);
            let inner = base.clone();
            // Backward flight under the frozen field; energy conservation
            // keeps admissible states inside the support box, so the guard
            // fallback (evaluating to zero when a flight cannot be resolved)
            // is never taken for the fields built here.
            let eval = move |r: f64, w: f64, l: f64| -> f64 {
                match integrate(&spec, ReducedCoord::new(r, w, l), 0.0, -eps) {
                    Ok((z, _)) => inner.value(z.r, z.w, z.l),
                    Err(_) => 0.0,
                }
            };
            InitialDatum::with_declared_norms(
                Arc::new(eval),
                base.r_support,
                base.p_support,
                base.sup_norm,
                base.mass,
                base.kinematics,
                base.sign,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{casimir_transported, kinetic_energy, CasimirSpec};
    use crate::phase_space::sample_ensemble;
    use crate::solver::{continue_solution, SolverConfig};
    use approx::assert_relative_eq;

    fn classical_spec(k: f64, y0: f64) -> PolytropeSpec {
        PolytropeSpec::new(k, y0, Kinematics::NonRelativistic).unwrap()
    }

    fn build(spec: &PolytropeSpec) -> SteadyState {
        build_polytrope(spec, spec.default_step()).unwrap()
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        assert!(PolytropeSpec::new(-0.5, 1.0, Kinematics::NonRelativistic).is_err());
        assert!(PolytropeSpec::new(3.5, 1.0, Kinematics::NonRelativistic).is_err());
        assert!(PolytropeSpec::new(1.0, 0.0, Kinematics::NonRelativistic).is_err());
        assert!(PolytropeSpec::new(1.0, -1.0, Kinematics::Relativistic).is_err());
        assert!(PolytropeSpec::new(f64::NAN, 1.0, Kinematics::NonRelativistic).is_err());
        let spec = classical_spec(1.0, 1.0);
        assert!(build_polytrope(&spec, 0.0).is_err());
        assert!(build_polytrope(&spec, spec.natural_radius_scale()).is_err());
    }

    #[test]
    fn velocity_integral_constant_matches_direct_quadrature() {
        // frozen values of (2 pi)^{3/2} Gamma(k+1)/Gamma(k+5/2)
        assert_relative_eq!(polytropic_constant(0.0), 11.847687835088974, max_relative = 1e-12);
        assert_relative_eq!(polytropic_constant(1.0), 4.739075134035591, max_relative = 1e-12);
        assert_relative_eq!(polytropic_constant(1.5), 3.48943209981944, max_relative = 1e-12);
        assert_relative_eq!(polytropic_constant(2.5), 2.1808950623871497, max_relative = 1e-12);

        // independent check: integrate (y - u^2/2)_+^k 4 pi u^2 du directly
        let k = 1.5;
        let y: f64 = 0.7;
        let u_cap = (2.0 * y).sqrt();
        let n = 20_000;
        let h = u_cap / n as f64;
        let mut acc = 0.0;
        for i in 1..n {
            let u = i as f64 * h;
            let a: f64 = y - 0.5 * u * u;
            if a > 0.0 {
                let v = a.powf(k) * u * u;
                acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
        }
        let direct = FOUR_PI * acc * h / 3.0;
        assert_relative_eq!(classical_density(k, y), direct, max_relative = 1e-8);
    }

    #[test]
    fn relativistic_density_matches_frozen_quadrature() {
        // k = 0 closed form: (4 pi / 3) ((1+y)^2 - 1)^{3/2}
        assert_relative_eq!(
            relativistic_density(0.0, 0.3),
            2.400834622356693,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            relativistic_density(1.0, 0.1),
            0.015796860353622846,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            relativistic_density(1.0, 0.3),
            0.2722314373587823,
            max_relative = 1e-9
        );
        assert_eq!(relativistic_density(1.0, 0.0), 0.0);
    }

    #[test]
    fn classical_equilibria_match_frozen_profiles() {
        let s0 = build(&classical_spec(0.0, 1.0));
        assert_relative_eq!(s0.r_star, 0.29944532629131637, max_relative = 1e-6);
        assert_relative_eq!(s0.m_star, 0.22243182756595284, max_relative = 1e-6);
        assert_relative_eq!(s0.e0, -0.7428128210274997, max_relative = 1e-6);

        let s1 = build(&classical_spec(1.0, 1.0));
        assert_relative_eq!(s1.r_star, 0.693953044519111, max_relative = 1e-6);
        assert_relative_eq!(s1.m_star, 0.28342403842340685, max_relative = 1e-6);
        assert_relative_eq!(s1.e0, -0.4084196195432954, max_relative = 1e-6);

        let s_half = build(&classical_spec(1.0, 0.5));
        assert_relative_eq!(s_half.r_star, 1.1670852549810435, max_relative = 1e-6);
        assert_relative_eq!(s_half.m_star, 0.23833025790697385, max_relative = 1e-6);
    }

    #[test]
    fn classical_equilibria_match_the_scaled_boundary_value_problem() {
        // With unit central margin the profile is y(r) = theta(r / alpha)
        // where alpha = (4 pi c_k)^{-1/2} and theta solves the classical
        // normalized boundary value problem with exponent n = k + 3/2:
        // first zero xi1 and mass integral mu = -xi1^2 theta'(xi1) below
        // are frozen from an independent integration of that problem.
        for (k, xi1, mu) in [
            (0.0, 3.6537537362369696, 2.7140551201539505),
            (1.0, 5.355275458965314, 2.187199565500161),
        ] {
            let c = polytropic_constant(k);
            let alpha = 1.0 / (FOUR_PI * c).sqrt();
            let state = build(&classical_spec(k, 1.0));
            assert_relative_eq!(state.r_star, alpha * xi1, max_relative = 1e-6);
            assert_relative_eq!(
                state.m_star,
                FOUR_PI * c * alpha.powi(3) * mu,
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn relativistic_equilibria_match_frozen_profiles() {
        let spec1 = PolytropeSpec::new(1.0, 0.1, Kinematics::Relativistic).unwrap();
        let s1 = build(&spec1);
        assert_relative_eq!(s1.r_star, 3.862110625458287, max_relative = 1e-5);
        assert_relative_eq!(s1.m_star, 0.15483551644543014, max_relative = 1e-5);
        assert_relative_eq!(s1.e0, 0.9599090933789456, max_relative = 1e-5);

        let spec3 = PolytropeSpec::new(1.0, 0.3, Kinematics::Relativistic).unwrap();
        let s3 = build(&spec3);
        assert_relative_eq!(s3.r_star, 1.6608656338714958, max_relative = 1e-5);
        assert_relative_eq!(s3.m_star, 0.19284438448590946, max_relative = 1e-5);
        assert_relative_eq!(s3.e0, 0.8838892318842271, max_relative = 1e-5);
    }

    #[test]
    fn small_central_values_shrink_the_mass_by_the_homology_law() {
        // The shooting map is homogeneous: with exponent n = k + 3/2 the
        // support radius scales as y0^{(1-n)/2} and the mass as y0^{(3-n)/2}.
        // For k = 0 (n = 3/2) a vanishing central margin therefore sends the
        // mass to zero while the radius GROWS like y0^{-1/4}; only exponents
        // with n > 3 shrink both.
        let lo = build(&classical_spec(0.0, 0.1));
        let hi = build(&classical_spec(0.0, 0.4));
        assert!(lo.m_star < hi.m_star);
        assert!(lo.r_star > hi.r_star);
        let ratio = 0.1_f64 / 0.4;
        assert_relative_eq!(
            lo.r_star / hi.r_star,
            ratio.powf(-0.25),
            max_relative = 1e-5
        );
        assert_relative_eq!(
            lo.m_star / hi.m_star,
            ratio.powf(0.75),
            max_relative = 1e-5
        );
    }

    #[test]
    fn profiles_are_monotone_and_vanish_at_the_boundary() {
        let state = build(&classical_spec(1.0, 1.0));
        let margin = state.margin_nodes();
        for j in 1..margin.len() {
            assert!(margin[j] < margin[j - 1], "margin must strictly decrease");
            assert!(margin[j] > 0.0, "interior margin must stay positive");
        }
        // density non-increasing, vanishing at the boundary
        let mut prev = state.density(0.0);
        for j in 1..=64 {
            let r = state.r_star * j as f64 / 64.0;
            let rho = state.density(r);
            assert!(rho <= prev + 1e-12, "density must not increase outward");
            prev = rho;
        }
        assert_eq!(state.density(state.r_star), 0.0);
        assert_eq!(state.margin_value(state.r_star), 0.0);
        // potential increasing, matching -M/r outside
        let mut u_prev = state.potential_value(0.0);
        for j in 1..=64 {
            let r = state.r_star * j as f64 / 64.0;
            let u = state.potential_value(r);
            assert!(u >= u_prev, "potential must be non-decreasing");
            u_prev = u;
        }
        assert_relative_eq!(
            state.potential_value(state.r_star),
            state.e0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            state.potential_value(2.0 * state.r_star),
            -state.m_star / (2.0 * state.r_star),
            max_relative = 1e-12
        );
        // datum support matches the equilibrium radii
        let datum = state.datum();
        assert_eq!(datum.r_support, state.r_star);
        assert_relative_eq!(datum.p_support, (2.0_f64).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn virial_identity_holds_for_the_continuum_energies() {
        let state = build(&classical_spec(1.0, 1.0));
        let e_kin = state.kinetic_energy();
        let e_pot = state.potential_energy();
        assert_relative_eq!(e_kin, 0.06945356255772386, max_relative = 1e-5);
        assert_relative_eq!(e_pot, -0.13890687088765602, max_relative = 1e-5);
        assert!(
            (2.0 * e_kin + e_pot).abs() <= 1e-5 * e_pot.abs(),
            "virial defect too large: 2*{e_kin} + {e_pot}"
        );
    }

    #[test]
    fn unit_exponent_equilibrium_is_continuous_and_zero_exponent_is_a_step() {
        let s0 = build(&classical_spec(0.0, 1.0));
        let datum = s0.datum();
        // values are exactly 0 or 1 across a probe grid
        let mut seen_one = false;
        let mut seen_zero_inside = false;
        for i in 0..20 {
            let r = s0.r_star * (i as f64 + 0.5) / 20.0;
            for j in 0..20 {
                let w = datum.p_support * (2.0 * (j as f64 + 0.5) / 20.0 - 1.0);
                for n in 0..5 {
                    let l = 0.2 * n as f64 * r * datum.p_support;
                    let v = datum.value(r, w, l);
                    assert!(v == 0.0 || v == 1.0, "step datum must take values 0/1");
                    if v == 1.0 {
                        seen_one = true;
                    } else if r < s0.r_star {
                        seen_zero_inside = true;
                    }
                }
            }
        }
        assert!(seen_one && seen_zero_inside, "both levels must occur");
        // discontinuity across the energy surface at the center
        let q_edge = (2.0 * s0.margin_value(1e-3)).sqrt();
        assert_eq!(datum.value(1e-3, q_edge - 1e-6, 0.0), 1.0);
        assert_eq!(datum.value(1e-3, q_edge + 1e-6, 0.0), 0.0);
        // quadrature mass approaches the profile mass
        let ens = sample_ensemble(&datum, 48).unwrap();
        assert_relative_eq!(ens.total_weight(), s0.m_star, max_relative = 2e-2);
    }

    #[test]
    fn static_field_table_reproduces_the_mass_profile() {
        let state = build(&classical_spec(1.0, 1.0));
        let table = state.static_field(2049).unwrap();
        assert_relative_eq!(table.total_mass(), state.m_star, max_relative = 1e-12);
        let g_edge = table.field_value(0.0, state.r_star).unwrap();
        assert_relative_eq!(
            g_edge,
            state.m_star / (state.r_star * state.r_star),
            max_relative = 1e-9
        );
        // exterior queries follow the exact point-mass tail
        let g_out = table.field_value(0.0, 2.0 * state.r_star).unwrap();
        assert_relative_eq!(
            g_out,
            state.m_star / (4.0 * state.r_star * state.r_star),
            max_relative = 1e-12
        );
        // two different linear resamplings of the same profile
        let r = 0.37 * state.r_star;
        assert_relative_eq!(
            table.field_value(0.0, r).unwrap(),
            state.enclosed_mass(r) / (r * r),
            max_relative = 1e-4
        );
    }

    #[test]
    fn relativistic_kinetic_energy_agrees_with_the_sampled_ensemble() {
        let spec = PolytropeSpec::new(1.0, 0.3, Kinematics::Relativistic).unwrap();
        let state = build(&spec);
        let ens = sample_ensemble(&state.datum(), 40).unwrap();
        let sampled = kinetic_energy(&ens, Kinematics::Relativistic);
        assert_relative_eq!(state.kinetic_energy(), sampled, max_relative = 1e-2);
    }

    #[test]
    fn shooting_reports_a_cap_violation() {
        let spec = classical_spec(1.0, 1.0);
        let err = match build_polytrope_capped(&spec, spec.default_step(), 0.1) {
            Err(e) => e,
            Ok(_) => panic!("a cap below the support radius must fail"),
        };
        assert!(err.to_string().contains("cap"), "unexpected error: {err}");
    }

    #[test]
    fn perturbation_amplitude_is_validated_and_zero_is_the_identity() {
        let state = build(&classical_spec(1.0, 1.0));
        assert!(perturb(&state, Perturbation::RadialKick(0.6)).is_err());
        assert!(perturb(&state, Perturbation::PhaseShear(-0.51)).is_err());
        assert!(perturb(&state, Perturbation::RadialKick(f64::NAN)).is_err());
        let datum = state.datum();
        for mode in [Perturbation::RadialKick(0.0), Perturbation::PhaseShear(0.0)] {
            let same = perturb(&state, mode).unwrap();
            for (r, w, l) in [(0.1, 0.3, 0.02), (0.4, -0.9, 0.1), (0.68, 0.0, 0.0)] {
                assert_eq!(same.value(r, w, l), datum.value(r, w, l));
            }
            assert_eq!(same.p_support, datum.p_support);
            assert_eq!(same.mass, datum.mass);
        }
    }

    #[test]
    fn radial_kick_preserves_mass_and_rearrangement_invariants() {
        let state = build(&classical_spec(1.0, 1.0));
        let kicked = perturb(&state, Perturbation::RadialKick(0.3)).unwrap();
        assert_eq!(kicked.mass, state.m_star);
        assert_eq!(kicked.sup_norm, state.datum().sup_norm);
        assert_relative_eq!(
            kicked.p_support,
            state.momentum_cutoff() + 0.3 * state.r_star,
            max_relative = 1e-12
        );
        // the kick moves values around without changing them
        let datum = state.datum();
        assert_eq!(kicked.value(0.3, 0.5 + 0.3 * 0.3, 0.05), datum.value(0.3, 0.5, 0.05));
        // quadrature invariants agree within sampling error
        let base = sample_ensemble(&datum, 32).unwrap();
        let pert = sample_ensemble(&kicked, 32).unwrap();
        assert_relative_eq!(base.total_weight(), pert.total_weight(), max_relative = 1e-2);
        let square = CasimirSpec::square();
        assert_relative_eq!(
            casimir_transported(&base, &square),
            casimir_transported(&pert, &square),
            max_relative = 1e-2
        );
    }

    #[test]
    fn phase_shear_is_a_flow_rearrangement() {
        let state = build(&classical_spec(1.0, 1.0));
        let eps = 0.25;
        let sheared = perturb(&state, Perturbation::PhaseShear(eps)).unwrap();
        // pointwise: the shear evaluates the datum at the backward-flowed
        // state, so flowing a probe forward recovers the original value
        let table = Arc::new(state.static_field(4097).unwrap());
        let spec = FlowSpec::new(
            FieldSource::Table(table),
            ForceSign::Attractive,
            state.kinematics,
            state.dynamical_time() / 512.0,
        )
        .unwrap();
        let datum = state.datum();
        for (r, w, l) in [(0.2, 0.3, 0.01), (0.35, -0.4, 0.06), (0.5, 0.1, 0.0)] {
            let z = ReducedCoord::new(r, w, l);
            let (fwd, _) = integrate(&spec, z, 0.0, eps).unwrap();
            let moved = sheared.value(fwd.r, fwd.w, fwd.l);
            let original = datum.value(r, w, l);
            assert_relative_eq!(moved, original, epsilon = 1e-6);
        }
        // quadrature invariants agree within sampling error
        let base = sample_ensemble(&datum, 32).unwrap();
        let pert = sample_ensemble(&sheared, 32).unwrap();
        assert_relative_eq!(base.total_weight(), pert.total_weight(), max_relative = 1e-2);
        let square = CasimirSpec::square();
        assert_relative_eq!(
            casimir_transported(&base, &square),
            casimir_transported(&pert, &square),
            max_relative = 1e-2
        );
    }

    #[test]
    fn evolved_equilibrium_stays_nearly_stationary() {
        // The sampled equilibrium carries a discretization residual, so the
        // mass profile drifts by a resolution-dependent amount that must
        // shrink as the ensemble is refined (the long-horizon refinement
        // study lives in the acceptance battery).
        let state = build(&classical_spec(1.0, 1.0));
        let t_end = 0.5 * state.dynamical_time();
        let radii: Vec<f64> = (1..=24).map(|j| state.r_star * j as f64 / 16.0).collect();
        let times = [0.5 * t_end, t_end];
        let drift_at = |resolution: usize| -> f64 {
            let cfg = SolverConfig {
                resolution,
                radius_nodes: 256,
                steps_per_slab: 128,
                ..SolverConfig::default()
            };
            let sol = continue_solution(&state.datum(), &cfg, t_end).unwrap();
            crate::diagnostics::mass_profile_drift(&sol, &times, &radii).unwrap()
        };
        let coarse = drift_at(16);
        let fine = drift_at(24);
        assert!(
            fine < 5e-2,
            "stationary profile drifted by {fine} over half a dynamical time"
        );
        assert!(
            fine < coarse,
            "stationarity residual should shrink under refinement: \
             {coarse} (coarse) vs {fine} (fine)"
        );
    }

    #[test]
    fn kicked_equilibrium_pulsates_while_conserving_energy() {
        let state = build(&classical_spec(1.0, 1.0));
        let cfg = SolverConfig {
            resolution: 16,
            radius_nodes: 256,
            steps_per_slab: 128,
            ..SolverConfig::default()
        };
        let t_end = 2.0 * state.dynamical_time();
        let kicked = perturb(&state, Perturbation::RadialKick(0.3)).unwrap();
        let sol_kicked = continue_solution(&kicked, &cfg, t_end).unwrap();

        // relative variation of the enclosed mass inside a probe radius:
        // the kicked configuration breathes visibly
        let probe = 0.45 * state.r_star;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..=40 {
            let t = t_end * j as f64 / 40.0;
            let m = sol_kicked.field_at(t, probe).unwrap() * probe * probe;
            lo = lo.min(m);
            hi = hi.max(m);
        }
        let variation = (hi - lo) / hi.max(1e-300);
        assert!(
            variation > 0.05,
            "kicked equilibrium should pulsate, variation {variation}"
        );

        // total energy along the kicked evolution stays nearly constant
        let report =
            crate::diagnostics::conservation_report(&sol_kicked, 32, &[]).unwrap();
        assert!(
            report.e_total_drift < 5e-2,
            "total-energy drift {} too large",
            report.e_total_drift
        );
    }
}
