//! Radial mean-field machinery.
//!
//! In spherical symmetry the force field of a distribution with spatial
//! density rho is radial with amplitude
//!
//! ```text
//!     G(t, r) = m(t, r) / r^2,      m(t, r) = 4 pi \int_0^r s^2 rho(t, s) ds,
//! ```
//!
//! the mass inside radius r over r squared.  This module deposits transported
//! ensembles onto radius grids to obtain m and G, stores G over a time slab
//! as an interpolation table the characteristic integrator can query, and
//! provides the closed-form a-priori bounds (field amplitude, field Lipschitz
//! constant, momentum-support growth) that determine how long a time slab is
//! guaranteed to stay controlled.

use std::io::Write;

use crate::error::{Error, Result};
use crate::phase_space::Sample;

// ---------------------------------------------------------------------------
// a-priori bounds
// ---------------------------------------------------------------------------

/// Sharp bound on the radial field amplitude in terms of the spatial density:
/// sup_r G <= 3 (2 pi)^(2/3) ||rho||_1^(1/3) ||rho||_inf^(2/3).
pub fn field_amplitude_bound(rho_l1: f64, rho_sup: f64) -> f64 {
    3.0 * (2.0 * std::f64::consts::PI).powf(2.0 / 3.0) * rho_l1.cbrt() * rho_sup.powf(2.0 / 3.0)
}

/// Growth constant of the momentum support, in terms of the phase-space
/// norms of the initial datum:
/// C = 4 * 3^(1/3) * pi^(4/3) * ||f||_1^(1/3) ||f||_inf^(2/3).
///
/// While the momentum support of the evolved state is at most P, its spatial
/// density is at most (4 pi / 3) ||f||_inf P^3, so the field amplitude is at
/// most C P^2 and the support obeys dP/dt <= C P^2.
pub fn momentum_growth_constant(f_l1: f64, f_sup: f64) -> f64 {
    4.0 * 3.0_f64.cbrt() * std::f64::consts::PI.powf(4.0 / 3.0) * f_l1.cbrt()
        * f_sup.powf(2.0 / 3.0)
}

/// Bound on the spatial density of any state transported from a datum with
/// sup-norm `f_sup` while its momentum support is at most `p`:
/// rho <= (4 pi / 3) f_sup p^3.
pub fn spatial_density_bound(f_sup: f64, p: f64) -> f64 {
    4.0 * std::f64::consts::PI / 3.0 * f_sup * p.powi(3)
}

/// Bound on the radial Lipschitz constant of the field amplitude G(t, .)
/// in terms of the spatial density bound: Lip(G) <= (20 pi / 3) ||rho||_inf.
pub fn field_lipschitz_bound(rho_sup: f64) -> f64 {
    20.0 * std::f64::consts::PI / 3.0 * rho_sup
}

/// The a-priori control package of an initial state: momentum support `p0`
/// and growth constant `growth`, giving a guaranteed-existence horizon and a
/// momentum-support majorant on it.
#[derive(Clone, Copy, Debug)]
pub struct FieldBounds {
    /// Momentum support radius at the start of the slab.
    pub p0: f64,
    /// Momentum growth constant of the **initial datum** (norms are
    /// transport invariants, so this constant never needs updating).
    pub growth: f64,
}

impl FieldBounds {
    pub fn new(p0: f64, growth: f64) -> Result<Self> {
        if !(p0 >= 0.0 && growth >= 0.0) {
            return Err(Error::InvalidArgument(
                "support radius and growth constant must be nonnegative".into(),
            ));
        }
        Ok(FieldBounds { p0, growth })
    }

    /// Time horizon on which the momentum majorant stays finite:
    /// 1 / (p0 * growth).  Infinite for vacuum data.
    pub fn horizon(&self) -> f64 {
        let d = self.p0 * self.growth;
        if d > 0.0 {
            1.0 / d
        } else {
            f64::INFINITY
        }
    }

    /// Momentum-support majorant after elapsed time `dt` >= 0:
    /// p0 / (1 - p0 * growth * dt), infinite at and beyond the horizon.
    pub fn momentum_bound(&self, dt: f64) -> f64 {
        let denom = 1.0 - self.p0 * self.growth * dt;
        if denom > 0.0 {
            self.p0 / denom
        } else {
            f64::INFINITY
        }
    }
}

// ---------------------------------------------------------------------------
// radius grids and deposits
// ---------------------------------------------------------------------------

/// A uniform grid of `nodes` radii from 0 to `r_max` inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusGrid {
    pub r_max: f64,
    pub nodes: usize,
}

impl RadiusGrid {
    pub fn new(r_max: f64, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::InvalidArgument(
                "radius grids need at least 2 nodes".into(),
            ));
        }
        if !(r_max > 0.0) {
            return Err(Error::InvalidArgument(
                "radius grids need positive extent".into(),
            ));
        }
        Ok(RadiusGrid { r_max, nodes })
    }

    /// Node spacing.
    pub fn dr(&self) -> f64 {
        self.r_max / (self.nodes - 1) as f64
    }

    /// Radius of node i.
    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.dr()
    }
}

/// How sample mass is assigned to grid nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepositScheme {
    /// Linear (cloud-in-cell) split between the two enclosing nodes.
    CloudInCell,
    /// All mass to the nearest node; exact half distances round up.
    NearestNode,
}

/// The cumulative mass profile m(r) of a deposited ensemble on a radius
/// grid, together with the induced field amplitude G(r) = m(r)/r^2 at the
/// nodes.  By construction m(0) = 0 and G(0) = 0; mass deposited onto node 0
/// (or beyond the last node, which is clamped) is still counted from the
/// first positive node on, so the total is conserved exactly.
#[derive(Clone, Debug)]
pub struct CumulativeMass {
    pub grid: RadiusGrid,
    /// m at the grid nodes; m[0] = 0, m[nodes-1] = total mass.
    pub m: Vec<f64>,
    /// G = m/r^2 at the grid nodes; g[0] = 0.
    pub g: Vec<f64>,
}

/// Add one sample's mass to a node-weight accumulator (samples beyond the
/// last node are clamped onto it, so no mass is ever lost).
pub fn deposit_weight(
    node_w: &mut [f64],
    grid: &RadiusGrid,
    scheme: DepositScheme,
    r: f64,
    weight: f64,
) {
    let n = grid.nodes;
    let u = (r / grid.dr()).clamp(0.0, (n - 1) as f64);
    match scheme {
        DepositScheme::CloudInCell => {
            let i = (u as usize).min(n - 2);
            let frac = u - i as f64;
            node_w[i] += (1.0 - frac) * weight;
            node_w[i + 1] += frac * weight;
        }
        DepositScheme::NearestNode => {
            let i = ((u + 0.5) as usize).min(n - 1);
            node_w[i] += weight;
        }
    }
}

impl CumulativeMass {
    /// Deposit the samples (in their given, fixed order) onto the grid.
    pub fn deposit(samples: &[Sample], grid: RadiusGrid, scheme: DepositScheme) -> Self {
        let mut node_w = vec![0.0_f64; grid.nodes];
        for s in samples {
            deposit_weight(&mut node_w, &grid, scheme, s.coord.r, s.weight);
        }
        Self::from_node_weights(grid, &node_w)
    }

    /// Build the cumulative profile from per-node deposited weights.
    ///
    /// An interior node's own deposit counts half toward the cumulative
    /// mass at that node: the deposit represents mass spread over the
    /// node's cell, which straddles the node, so full inclusion would
    /// inflate every enclosed mass by about half a cell of local density
    /// (first order in the grid spacing), while the half-count is second
    /// order.  The boundary nodes own half-cells that lie entirely to one
    /// side: node 0's cell sits above r = 0, so m(0) = 0 exactly and its
    /// deposit enters from node 1 on; the last node's cell sits entirely
    /// below the grid end, so it counts fully and the profile ends at the
    /// exact total deposited mass.  A genuine point mass at the origin
    /// therefore still yields the exact profile at every node.
    pub fn from_node_weights(grid: RadiusGrid, node_w: &[f64]) -> Self {
        let n = grid.nodes;
        assert_eq!(node_w.len(), n, "node weight vector must match the grid");
        let mut m = vec![0.0_f64; n];
        let mut below = node_w[0];
        for j in 1..n - 1 {
            m[j] = below + 0.5 * node_w[j];
            below += node_w[j];
        }
        m[n - 1] = below + node_w[n - 1];
        let mut g = vec![0.0_f64; n];
        for j in 1..n {
            let r = grid.node(j);
            g[j] = m[j] / (r * r);
        }
        CumulativeMass { grid, m, g }
    }

    /// Exact cumulative profile of a single point mass at the origin.
    pub fn point_mass(grid: RadiusGrid, mass: f64) -> Self {
        let n = grid.nodes;
        let mut node_w = vec![0.0; n];
        node_w[0] = mass;
        Self::from_node_weights(grid, &node_w)
    }

    /// Total deposited mass.
    pub fn total_mass(&self) -> f64 {
        *self.m.last().expect("grids have >= 2 nodes")
    }

    /// Field amplitude at radius r: linear interpolation of the node values
    /// inside the grid, the exact point-mass tail total/r^2 beyond it.
    pub fn g_value(&self, r: f64) -> f64 {
        interp_field(&self.grid, &self.g, self.total_mass(), r)
    }

    /// Enclosed mass at radius r (linear interpolation; constant beyond the
    /// grid).
    pub fn m_value(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= self.grid.r_max {
            return self.total_mass();
        }
        let u = r / self.grid.dr();
        let i = (u as usize).min(self.grid.nodes - 2);
        let frac = u - i as f64;
        self.m[i] * (1.0 - frac) + self.m[i + 1] * frac
    }
}

/// Shared interpolation kernel for node-sampled field amplitudes.
fn interp_field(grid: &RadiusGrid, g: &[f64], total: f64, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    if r >= grid.r_max {
        return total / (r * r);
    }
    let u = r / grid.dr();
    let i = (u as usize).min(grid.nodes - 2);
    let frac = u - i as f64;
    g[i] * (1.0 - frac) + g[i + 1] * frac
}

// ---------------------------------------------------------------------------
// time-dependent field tables
// ---------------------------------------------------------------------------

/// The radial field of a time slab, stored as rows m(t_k, .), G(t_k, .) at
/// equally spaced times t_k = t0 + k dt and interpolated linearly in both
/// time and radius.  A single-row table is static: it represents a
/// time-independent field and accepts every query time.
#[derive(Clone, Debug)]
pub struct RadialFieldTable {
    pub t0: f64,
    /// Spacing between stored rows; 0 for single-row (static) tables.
    pub dt: f64,
    pub grid: RadiusGrid,
    m_rows: Vec<Vec<f64>>,
    g_rows: Vec<Vec<f64>>,
    total_mass: f64,
}

impl RadialFieldTable {
    /// Assemble a table from cumulative profiles at times t0, t0+dt, ...
    pub fn from_profiles(t0: f64, dt: f64, profiles: Vec<CumulativeMass>) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::InvalidArgument(
                "a field table needs at least one row".into(),
            ));
        }
        if profiles.len() > 1 && !(dt > 0.0) {
            return Err(Error::InvalidArgument(
                "multi-row field tables need a positive row spacing".into(),
            ));
        }
        let grid = profiles[0].grid;
        for p in &profiles {
            if p.grid != grid {
                return Err(Error::GridMismatch(
                    "all rows of a field table must share one radius grid".into(),
                ));
            }
        }
        let total_mass = profiles[0].total_mass();
        let mut m_rows = Vec::with_capacity(profiles.len());
        let mut g_rows = Vec::with_capacity(profiles.len());
        for p in profiles {
            m_rows.push(p.m);
            g_rows.push(p.g);
        }
        Ok(RadialFieldTable {
            t0,
            dt: if m_rows.len() > 1 { dt } else { 0.0 },
            grid,
            m_rows,
            g_rows,
            total_mass,
        })
    }

    /// A static (time-independent) table from a single profile.
    pub fn static_profile(profile: CumulativeMass) -> Self {
        Self::from_profiles(0.0, 0.0, vec![profile]).expect("single row is always valid")
    }

    /// The zero field on the given grid (the iteration seed).
    pub fn vacuum(grid: RadiusGrid) -> Self {
        Self::static_profile(CumulativeMass::from_node_weights(
            grid,
            &vec![0.0; grid.nodes],
        ))
    }

    pub fn n_rows(&self) -> usize {
        self.g_rows.len()
    }

    /// Time of the last stored row (equals t0 for static tables).
    pub fn t_end(&self) -> f64 {
        self.t0 + self.dt * (self.n_rows() - 1) as f64
    }

    /// Time of stored row k.
    pub fn row_time(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Is the query time covered (up to a relative slack for roundoff)?
    pub fn covers(&self, t: f64) -> bool {
        if self.n_rows() == 1 {
            return true;
        }
        let span = self.t_end() - self.t0;
        let slack = 1e-9 * span.max(self.t0.abs()).max(1.0);
        t >= self.t0 - slack && t <= self.t_end() + slack
    }

    /// Row-interpolation weights for a query time, clamped into the table.
    fn time_weights(&self, t: f64) -> (usize, f64) {
        if self.n_rows() == 1 {
            return (0, 0.0);
        }
        let u = ((t - self.t0) / self.dt).clamp(0.0, (self.n_rows() - 1) as f64);
        let k = (u as usize).min(self.n_rows() - 2);
        (k, u - k as f64)
    }

    /// Field amplitude G(t, r), clamping t into the covered interval.  This
    /// is the integrator's fast path; use [`field_value`](Self::field_value)
    /// when an out-of-range time must be an error.
    pub fn g_at(&self, t: f64, r: f64) -> f64 {
        let (k, ft) = self.time_weights(t);
        let a = interp_field(&self.grid, &self.g_rows[k], self.total_mass, r);
        if ft == 0.0 {
            return a;
        }
        let b = interp_field(&self.grid, &self.g_rows[k + 1], self.total_mass, r);
        a * (1.0 - ft) + b * ft
    }

    /// Enclosed mass m(t, r), clamping t into the covered interval.
    pub fn m_at(&self, t: f64, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= self.grid.r_max {
            return self.total_mass;
        }
        let (k, ft) = self.time_weights(t);
        let u = r / self.grid.dr();
        let i = (u as usize).min(self.grid.nodes - 2);
        let fr = u - i as f64;
        let row = |row: &Vec<f64>| row[i] * (1.0 - fr) + row[i + 1] * fr;
        let a = row(&self.m_rows[k]);
        if ft == 0.0 {
            return a;
        }
        let b = row(&self.m_rows[k + 1]);
        a * (1.0 - ft) + b * ft
    }

    /// Checked field amplitude: errors when t lies outside the stored rows.
    pub fn field_value(&self, t: f64, r: f64) -> Result<f64> {
        if !self.covers(t) {
            return Err(Error::TimeOutsideTable {
                t,
                t0: self.t0,
                t1: self.t_end(),
            });
        }
        if !(r >= 0.0) {
            return Err(Error::InvalidCoordinate(format!(
                "field query at negative radius {r}"
            )));
        }
        Ok(self.g_at(t, r))
    }

    /// Stored G row k (borrowed).
    pub fn g_row(&self, k: usize) -> &[f64] {
        &self.g_rows[k]
    }

    /// Stored m row k (borrowed).
    pub fn m_row(&self, k: usize) -> &[f64] {
        &self.m_rows[k]
    }

    /// Largest node value of |G| over all rows.
    pub fn sup_g(&self) -> f64 {
        self.g_rows
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Sup over shared rows and nodes of |G_self - G_other|.  Requires the
    /// same row layout and grid: this is the iteration distance between two
    /// candidate fields for the same slab.
    pub fn sup_g_difference(&self, other: &RadialFieldTable) -> Result<f64> {
        if self.grid != other.grid
            || self.n_rows() != other.n_rows()
            || self.t0 != other.t0
            || self.dt != other.dt
        {
            return Err(Error::GridMismatch(
                "field distance needs identical table layouts".into(),
            ));
        }
        let mut sup = 0.0_f64;
        for (ra, rb) in self.g_rows.iter().zip(&other.g_rows) {
            for (a, b) in ra.iter().zip(rb) {
                sup = sup.max((a - b).abs());
            }
        }
        Ok(sup)
    }

    /// Sup over the given times and this table's nodes of the interpolated
    /// difference |G_self(t, r) - G_other(t, r)|.  Works across different
    /// layouts (used to compare overlapping solutions).
    pub fn sup_g_difference_at(&self, other: &RadialFieldTable, times: &[f64]) -> f64 {
        let mut sup = 0.0_f64;
        for &t in times {
            for i in 0..self.grid.nodes {
                let r = self.grid.node(i);
                sup = sup.max((self.g_at(t, r) - other.g_at(t, r)).abs());
            }
        }
        sup
    }

    /// Gravitational-well depth diagnostic: the potential profile U(t, .) at
    /// the grid nodes, integrated inward from the exact far-field value
    /// U(r_max) = -M/r_max with the trapezoid rule on dU/dr = G.
    pub fn potential_profile(&self, t: f64) -> Vec<f64> {
        let n = self.grid.nodes;
        let dr = self.grid.dr();
        let mut u = vec![0.0_f64; n];
        u[n - 1] = -self.total_mass / self.grid.r_max;
        for i in (0..n - 1).rev() {
            let g_hi = self.g_at(t, self.grid.node(i + 1));
            let g_lo = self.g_at(t, self.grid.node(i));
            u[i] = u[i + 1] - 0.5 * (g_hi + g_lo) * dr;
        }
        u
    }

    /// Write the table as CSV rows `t,r,m,g`, one per stored row and node,
    /// in row-major deterministic order.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,r,m,g")?;
        for k in 0..self.n_rows() {
            let t = self.row_time(k);
            for i in 0..self.grid.nodes {
                writeln!(
                    out,
                    "{},{},{},{}",
                    t,
                    self.grid.node(i),
                    self.m_rows[k][i],
                    self.g_rows[k][i]
                )?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
