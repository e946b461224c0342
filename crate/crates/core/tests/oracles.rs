//! Cross-module and dual-route checks of frequencies and scaling laws.

use std::f64::consts::PI;

use cnls_core::birkhoff::{normal_frequency, tangential_frequency};
use cnls_core::lattice::{Site, TangentialSet};
use cnls_core::simulate::{
    build_ansatz, fit_frequencies, fit_phase, predicted_frequencies, run, run_from, verify_quasiperiodic, SimConfig,
};
use cnls_core::Complex64;

fn pm() -> TangentialSet {
    TangentialSet::new(vec![Site::new(1, 0), Site::new(-1, 0)]).unwrap()
}

fn short(cfg: &mut SimConfig, t_final: f64) {
    cfg.n_grid = 32;
    cfg.dt = 2e-3;
    cfg.t_final = t_final;
    cfg.stride = 25;
}

#[test]
fn affine_and_simulated_frequency_formulas_agree() {
    let cfg = SimConfig::new(2, pm(), vec![1e-3, 5e-4, 1.5e-3, 8e-4]);
    let predicted = predicted_frequencies(&cfg);
    for h in 0..2 {
        for a in 0..2 {
            let w = tangential_frequency(&pm(), h, a).eval(&cfg.xi, 2, 1.0);
            assert!((w - predicted[h * 2 + a]).abs() < 1e-15);
        }
    }
}

#[test]
fn single_component_fit_matches_first_order_value() {
    let mut cfg = SimConfig::new(1, pm(), vec![8e-4, 6e-4]);
    short(&mut cfg, 100.0);
    let fits = fit_frequencies(&run(&cfg).unwrap()).unwrap();
    let expected = 1.0 + 8e-4 / (4.0 * PI * PI) + 6e-4 / (2.0 * PI * PI);
    assert!((expected - 1.0000507).abs() < 1e-7);
    let w = fits.iter().find(|f| f.n == Site::new(1, 0)).unwrap().omega;
    // second-order remainder: |ξ|²-level
    assert!((w - expected).abs() < 1e-8, "{w} vs {expected}");
}

#[test]
fn seeded_normal_mode_rotates_at_the_normal_frequency() {
    let mut cfg = SimConfig::new(2, pm(), vec![1e-3, 5e-4, 1.5e-3, 8e-4]);
    short(&mut cfg, 50.0);
    let probe = Site::new(2, 3);
    cfg.extra_modes = vec![probe];
    let mut init = build_ansatz(&cfg).unwrap();
    for h in 0..2 {
        init.set(h, probe, Complex64::new(1e-9, 0.0));
    }
    let trace = run_from(&cfg, init).unwrap();
    for h in 0..2 {
        let m = trace.modes.iter().find(|m| m.h == h && m.n == probe).unwrap();
        let (w, _) = fit_phase(&trace.times, &m.values, probe.norm_sq() as f64).unwrap();
        let expected = normal_frequency(2, h, probe).eval(&cfg.xi, 2, 1.0);
        assert!((w - expected).abs() < 1e-7, "h={h}: {w} vs {expected}");
    }
}

#[test]
fn normal_sector_follows_three_halves_law() {
    let base = vec![1e-3, 5e-4, 1.5e-3, 8e-4];
    let mut sups = Vec::new();
    for k in [1.0 / 16.0, 0.25, 1.0, 4.0] {
        let mut cfg = SimConfig::new(2, pm(), base.iter().map(|x| x * k).collect());
        short(&mut cfg, 20.0);
        sups.push((k, verify_quasiperiodic(&run(&cfg).unwrap(), &cfg).normal_sup));
    }
    let n = sups.len() as f64;
    let (mx, my) = sups.iter().fold((0.0, 0.0), |acc, (k, s)| (acc.0 + k.ln() / n, acc.1 + s.ln() / n));
    let sxy: f64 = sups.iter().map(|(k, s)| (k.ln() - mx) * (s.ln() - my)).sum();
    let sxx: f64 = sups.iter().map(|(k, _)| (k.ln() - mx).powi(2)).sum();
    let slope = sxy / sxx;
    assert!((slope - 1.5).abs() < 0.2, "exponent {slope}");
    let ratio = sups[3].1 / sups[2].1;
    assert!((ratio - 8.0).abs() < 1.0, "×4 ratio {ratio}");
}
