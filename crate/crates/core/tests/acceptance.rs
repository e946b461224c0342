//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero on any failure.

mod common;

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cnls_core::birkhoff::{frequencies, normal_form_pipeline, verify_nondegeneracy};
use cnls_core::lattice::{
    check_admissible, enumerate_first_type, enumerate_second_type, sites_in_disk, Site, SiteAtlas, TangentialSet,
};
use cnls_core::melnikov::{mel14_box_margin, scan_measure, MelnikovConfig, ParameterBox};
use cnls_core::polyvf::{
    build_cubic_p0, build_linear, check_momentum, check_reversible, cubic_coupling, seq_norm, toeplitz_lipschitz_check,
    ModeState, TlConfig,
};
use cnls_core::simulate::{residual_norm, rhs, run, verify_quasiperiodic, CouplingPoly, FieldState, SimConfig};
use cnls_core::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_first_type, brute_second_type, small_sets, twist_det, PairTable};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pm() -> TangentialSet {
    TangentialSet::new(vec![Site::new(1, 0), Site::new(-1, 0)]).unwrap()
}

fn resonance_oracle() -> Outcome {
    let start = Instant::now();
    let radius = 12;
    let first_table = PairTable::differences(radius);
    // |n|² + |m|² = |i|² + |j|² ≤ 32 keeps second-type sites inside |n| ≤ 6.
    let second_table = PairTable::sums(6);
    let sets = small_sets(3, 4);
    let (mut l1, mut l2) = (0usize, 0usize);
    for set in &sets {
        let got1: BTreeSet<_> = enumerate_first_type(set, radius).into_iter().collect();
        let got2: BTreeSet<_> = enumerate_second_type(set).into_iter().collect();
        if got1 != brute_first_type(&first_table, set) {
            return Err(format!("L1 mismatch for {:?}", set.sites()));
        }
        if got2 != brute_second_type(&second_table, set) {
            return Err(format!("L2 mismatch for {:?}", set.sites()));
        }
        l1 += got1.len();
        l2 += got2.len();
    }
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(60),
        format!("{} sets, {l1} L1 and {l2} L2 pairs equal, {:.1}s", sets.len(), elapsed.as_secs_f64()),
    )
}

fn second_type_example() -> Outcome {
    let pairs = enumerate_second_type(&pm());
    let ends: Vec<BTreeSet<Site>> = pairs.iter().map(|p| [p.n, p.m].into_iter().collect()).collect();
    let expected: BTreeSet<Site> = [Site::new(0, 1), Site::new(0, -1)].into_iter().collect();
    let verdict = check_admissible(&pm(), 20);
    ensure(
        ends == vec![expected] && verdict.admissible,
        format!("L2 = {ends:?}, admissible at R=20: {}", verdict.admissible),
    )
}

fn normal_form_fidelity() -> Outcome {
    let start = Instant::now();
    let c1 = Complex64::new(0.0, 1.0 / (4.0 * PI * PI));
    let c2 = Complex64::new(0.0, 1.0 / (2.0 * PI * PI));
    let mut details = Vec::new();
    for d in [1, 2] {
        for radius in [3, 5] {
            let nf = normal_form_pipeline(d, &pm(), radius).map_err(|e| e.to_string())?;
            let r = &nf.report;
            let mut worst = 0.0f64;
            for e in &r.resonant_table {
                if (e.expected - c1).norm() > 0.0 && (e.expected - c2).norm() > 0.0 {
                    return Err(format!("unexpected resonant value {} for {}", e.expected, e.monomial));
                }
                worst = worst.max((e.found - e.expected).norm() / e.expected.norm());
            }
            if !(r.residual_nonresonant < 1e-12 && worst < 1e-12 && r.missing.is_empty() && !r.resonant_table.is_empty())
            {
                return Err(format!(
                    "d={d} R={radius}: residual {:.2e}, rel err {worst:.2e}, missing {}",
                    r.residual_nonresonant,
                    r.missing.len()
                ));
            }
            details.push(format!("d={d} R={radius} res {:.1e} err {worst:.1e}", r.residual_nonresonant));
        }
    }
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(60),
        format!("{}; {:.1}s", details.join(", "), elapsed.as_secs_f64()),
    )
}

fn structural_identities() -> Outcome {
    let p0 = build_cubic_p0(2, 5);
    let transformed = normal_form_pipeline(2, &pm(), 5).map_err(|e| e.to_string())?.transformed;
    let mut flags = Vec::new();
    for (name, x) in [("P0", &p0), ("transformed", &transformed)] {
        let ok = check_reversible(x) && check_momentum(x, 1) && check_momentum(x, 2);
        flags.push(format!("{name} reversible+momentum {ok}"));
        if !ok {
            return Err(flags.join(", "));
        }
    }
    let tl = toeplitz_lipschitz_check(&build_cubic_p0(1, 6), &TlConfig::default()).map_err(|e| e.to_string())?;
    ensure(
        tl.limits_exist && tl.max_lipschitz_defect == 0.0,
        format!(
            "{}; TL limits {} defect {:e} over {} samples",
            flags.join(", "),
            tl.limits_exist,
            tl.max_lipschitz_defect,
            tl.samples.len()
        ),
    )
}

fn regularity_constant() -> Outcome {
    let p0 = build_cubic_p0(2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut violations = 0;
    let mut worst = 0.0f64;
    let mut count = 0;
    for rho in [0.1, 0.5] {
        for k in 0..100 {
            let q = ModeState::random_sparse(2, 3, 3 + k % 10, 1.0, &mut rng);
            let lhs = seq_norm(&p0.apply(&q), rho);
            let bound = cubic_coupling() * seq_norm(&q, rho).powi(3);
            worst = worst.max(lhs / bound);
            violations += usize::from(lhs > bound);
            count += 1;
        }
    }
    ensure(
        violations == 0,
        format!("{count} states, {violations} violations, max ratio {worst:.4}"),
    )
}

fn nondegeneracy_and_gap() -> Outcome {
    for b in 1..=8 {
        let nd = verify_nondegeneracy(b);
        let oracle = twist_det(b).round() as i128;
        if nd.det_units != nd.closed_form || nd.det_units != oracle {
            return Err(format!("b={b}: det {} closed {} oracle {oracle}", nd.det_units, nd.closed_form));
        }
    }
    let mut margins = Vec::new();
    for sites in [vec![Site::new(1, 0)], vec![Site::new(1, 0), Site::new(-1, 0)]] {
        let set = TangentialSet::new(sites).unwrap();
        let b = set.len();
        for d in [2, 3] {
            let freq = frequencies(&SiteAtlas::build(&set, 8).unwrap(), d);
            let margin = mel14_box_margin(&freq, &ParameterBox::new(d, b));
            let floor = b as f64 / (4.0 * PI * PI) - 1e-12;
            if margin < floor {
                return Err(format!("d={d} b={b}: margin {margin:e} below {floor:e}"));
            }
            margins.push(format!("d={d} b={b} {margin:.4e}"));
        }
    }
    Ok(format!("det = (−1)^(b−1)(2b−1) for b ≤ 8; Mel14 margins {}", margins.join(", ")))
}

fn measure_scan() -> Outcome {
    let start = Instant::now();
    let freq = frequencies(&SiteAtlas::build(&pm(), 15).unwrap(), 2);
    let cfg = MelnikovConfig {
        eps: 0.1,
        tau: 7.0,
        k_max: 15,
    };
    let gammas = [1e-2, 1e-3, 1e-4, 1e-5];
    let table = scan_measure(&freq, &ParameterBox::new(2, 2), &gammas, cfg, 10_000, 2024).map_err(|e| e.to_string())?;
    let f: Vec<f64> = table.rows.iter().map(|r| r.excluded_fraction).collect();
    let monotone = f.windows(2).all(|w| w[1] <= w[0]);
    let elapsed = start.elapsed();
    ensure(
        monotone && f[3] < f[0] / 3.0 && elapsed < Duration::from_secs(600),
        format!(
            "fractions {:?}, slope {:?}, {:.1}s",
            f,
            table.slope.map(|s| (s * 1000.0).round() / 1000.0),
            elapsed.as_secs_f64()
        ),
    )
}

fn default_scenario() -> SimConfig {
    let mut cfg = SimConfig::new(2, pm(), vec![1.0e-3, 5.0e-4, 1.5e-3, 8.0e-4]);
    cfg.n_grid = 32;
    cfg.dt = 2e-3;
    cfg.t_final = 200.0;
    cfg.stride = 50;
    cfg
}

fn scaled(cfg: &SimConfig, k: f64) -> SimConfig {
    SimConfig {
        xi: cfg.xi.iter().map(|x| x * k).collect(),
        ..cfg.clone()
    }
}

fn simulation_validation() -> Outcome {
    let start = Instant::now();
    let cfg = default_scenario();
    let v = verify_quasiperiodic(&run(&cfg).map_err(|e| e.to_string())?, &cfg);
    let half = scaled(&cfg, 0.5);
    let vh = verify_quasiperiodic(&run(&half).map_err(|e| e.to_string())?, &half);
    let xmax = cfg.xi.iter().copied().fold(0.0, f64::max);
    let ratio = v.max_freq_error / vh.max_freq_error;
    let elapsed = start.elapsed();
    let ok = v.max_amplitude_drift < 0.01
        && v.normal_sup < 10.0 * xmax.powf(1.5)
        && v.mass_drift < 1e-10
        && v.modes.iter().all(|m| m.fitted.is_some())
        && (3.0..=5.0).contains(&ratio)
        && elapsed < Duration::from_secs(300);
    ensure(
        ok,
        format!(
            "drift {:.1e}, normal sup {:.2e} < {:.2e}, mass {:.1e}, freq err {:.2e} → {:.2e} (ratio {ratio:.2}), {:.1}s",
            v.max_amplitude_drift,
            v.normal_sup,
            10.0 * xmax.powf(1.5),
            v.mass_drift,
            v.max_freq_error,
            vh.max_freq_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn residual_power_law() -> Outcome {
    let cfg = default_scenario();
    let mut ratios = Vec::new();
    for k in [1.0, 0.5, 0.25] {
        let c = scaled(&cfg, k);
        ratios.push(residual_norm(&c, 16) / residual_norm(&scaled(&c, 0.25), 16));
    }
    ensure(
        ratios.iter().all(|r| (6.0..=10.0).contains(r)),
        format!("ratios {:?}", ratios.iter().map(|r| (r * 1e4).round() / 1e4).collect::<Vec<_>>()),
    )
}

fn cross_module_oracle() -> Outcome {
    let radius = 4;
    let field = build_linear(2, radius).add(&build_cubic_p0(2, radius)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let q = ModeState::random_sparse(2, radius, 2 + k % 9, 0.5, &mut rng);
        let spectral = rhs(&FieldState::from_modes(2, 32, &q), &CouplingPoly::zero(2)).to_modes();
        let symbolic = field.apply(&q);
        for h in 0..2 {
            for n in sites_in_disk(radius) {
                worst = worst.max((spectral.get(h, n) - symbolic.get(h, n)).norm());
            }
        }
    }
    ensure(worst < 1e-10, format!("50 states, max |Δ| = {worst:.2e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("resonance oracle equivalence", resonance_oracle),
        ("L2 example and admissibility", second_type_example),
        ("normal-form fidelity", normal_form_fidelity),
        ("structural identities", structural_identities),
        ("regularity constant", regularity_constant),
        ("non-degeneracy and gap", nondegeneracy_and_gap),
        ("measure scan", measure_scan),
        ("simulation validation", simulation_validation),
        ("residual power law", residual_power_law),
        ("cross-module oracle", cross_module_oracle),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
