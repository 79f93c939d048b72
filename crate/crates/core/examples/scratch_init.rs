//! Scratch: t=0 deposited mass-profile error of the sampled polytrope
//! against the analytic steady-state profile.
use vpsphere_core::*;

fn main() {
    let spec = PolytropeSpec::new(1.0, 1.0, Kinematics::NonRelativistic).unwrap();
    let state = build_polytrope(&spec, spec.default_step()).unwrap();
    let datum = state.datum();
    for res in [32usize, 64] {
        let nodes = 512 * res / 32;
        let ens = sample_ensemble(&datum, res).unwrap();
        let grid = RadiusGrid::new(ens.grid.r_max, nodes).unwrap();
        let cm = CumulativeMass::deposit(&ens.samples, grid, DepositScheme::CloudInCell);
        let mut sup: f64 = 0.0;
        for i in 1..=48 {
            let r = 1.2 * state.r_star * i as f64 / 48.0;
            sup = sup.max((cm.m_value(r) - state.enclosed_mass(r)).abs());
        }
        println!(
            "res {res:2}/{nodes}: sup |m_dep - m_exact| / M* = {:.4e}  (ens mass err {:+.2e})",
            sup / state.m_star,
            ens.total_weight() / state.m_star - 1.0
        );
    }
}
