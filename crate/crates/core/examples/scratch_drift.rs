//! Scratch: polytrope-run drift measurements with per-row time series.
use vpsphere_core::diagnostics::*;
use vpsphere_core::*;

fn main() {
    let t0 = std::time::Instant::now();
    let spec = PolytropeSpec::new(1.0, 1.0, Kinematics::NonRelativistic).unwrap();
    let state = build_polytrope(&spec, spec.default_step()).unwrap();
    let datum = state.datum();
    let t_dyn = state.dynamical_time();

    let args: Vec<String> = std::env::args().collect();
    let res: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(32);
    let nodes: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(512);

    let mut cfg = SolverConfig::default();
    cfg.resolution = res;
    cfg.radius_nodes = nodes;
    let sol = continue_solution(&datum, &cfg, 5.0 * t_dyn).unwrap();
    eprintln!("solve {:.1?} ({} slabs)", t0.elapsed(), sol.slabs.len());

    let times: Vec<f64> = (1..=10).map(|i| 0.5 * t_dyn * i as f64).collect();
    let radii: Vec<f64> = (1..=24).map(|i| 1.2 * state.r_star * i as f64 / 24.0).collect();
    println!("res {res}/{nodes}");
    println!("mass profile drift: {:.4e}", mass_profile_drift(&sol, &times, &radii).unwrap());

    let phi = CasimirSpec::square();
    let bins_list = [4usize, 6, 8, 12, 16];
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); bins_list.len()];
    let mut series_cic: Vec<Vec<f64>> = vec![Vec::new(); bins_list.len()];
    let mut e_series: Vec<f64> = Vec::new();
    let mut m_half: Vec<f64> = Vec::new();
    let mut m_edge: Vec<f64> = Vec::new();
    let mut ts: Vec<f64> = Vec::new();
    let r_half = 0.5 * state.r_star;
    let r_edge = 0.9 * state.r_star;
    sol.walk_rows(16, |slab_idx, row_idx, t, ens| {
        let table = &sol.slabs[slab_idx].table;
        let e_kin = kinetic_energy(ens, sol.constants.kinematics);
        let e_pot = potential_energy_profile(table.m_row(row_idx), &table.grid, sol.constants.sign);
        e_series.push(e_kin + e_pot);
        ts.push(t / t_dyn);
        let m = |r: f64| -> f64 {
            ens.samples
                .iter()
                .filter(|s| s.coord.r <= r)
                .map(|s| s.weight)
                .sum::<f64>()
        };
        m_half.push(m(r_half));
        m_edge.push(m(r_edge));
        for (bi, b) in bins_list.iter().enumerate() {
            series[bi].push(ReconstructedDensity::bin_on(ens, *b).casimir(&phi));
            series_cic[bi].push(ReconstructedDensity::bin_linear_on(ens, *b).casimir(&phi));
        }
        Ok(())
    })
    .unwrap();
    let drift_of = |v: &[f64]| -> f64 {
        let f0 = v[0];
        v.iter().map(|x| (x - f0).abs() / f0.abs()).fold(0.0, f64::max)
    };
    // late-late variation: max deviation from the value at the first row with t >= 2 t_dyn
    let late_of = |v: &[f64]| -> f64 {
        let i0 = ts.iter().position(|&t| t >= 2.0).unwrap_or(0);
        let f0 = v[i0];
        v[i0..].iter().map(|x| (x - f0).abs() / f0.abs()).fold(0.0, f64::max)
    };
    println!("energy drift: {:.4e}", drift_of(&e_series));
    println!("m(0.5 r*) drift {:.4e}  late-late {:.4e}", drift_of(&m_half), late_of(&m_half));
    println!("m(0.9 r*) drift {:.4e}  late-late {:.4e}", drift_of(&m_edge), late_of(&m_edge));
    for (bi, b) in bins_list.iter().enumerate() {
        println!(
            "casimir s^2 at {b:2} bins: ngp drift {:.4e} late {:.4e} | cic drift {:.4e} late {:.4e}",
            drift_of(&series[bi]),
            late_of(&series[bi]),
            drift_of(&series_cic[bi]),
            late_of(&series_cic[bi])
        );
    }
    // print the s^2 series at 8 bins (ngp, cic) and m(0.5 r*) vs time, subsampled
    let idx8 = 2usize;
    println!("t/t_dyn, s2_8bins ngp rel dev, cic rel dev, m_half rel dev:");
    for i in (0..ts.len()).step_by(4) {
        println!(
            "  {:5.2}  {:+.3e}  {:+.3e}  {:+.3e}",
            ts[i],
            series[idx8][i] / series[idx8][0] - 1.0,
            series_cic[idx8][i] / series_cic[idx8][0] - 1.0,
            m_half[i] / m_half[0] - 1.0
        );
    }
    eprintln!("total {:.1?}", t0.elapsed());
}
