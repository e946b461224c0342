use anyhow::Result;
use cnls_core::birkhoff::{f_terms, frequencies, normal_form_pipeline, verify_nondegeneracy};
use cnls_core::lattice::{check_admissible, SiteAtlas};
use cnls_core::melnikov::{
    check_conditions, check_nondegeneracy, mel14_box_margin, scan_measure, MelnikovConfig, ParameterBox,
};
use cnls_core::simulate::{fit_frequencies, residual_norm, run, verify_quasiperiodic, ModeTrace, QPVerdict, SimConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::{LatticeRun, MelnikovRun, SimulateRun};
use crate::output::OutputDir;

/// Accepted window for the error ratio when `ξ` is halved (second order → 4).
pub const FREQ_RATIO_BAND: (f64, f64) = (3.0, 5.0);
/// Accepted window for `residual(ξ)/residual(ξ/4)` (3/2 power law → 8).
pub const RESIDUAL_RATIO_BAND: (f64, f64) = (6.0, 10.0);

pub fn lattice(job: &LatticeRun, out: &mut OutputDir) -> Result<bool> {
    let tangential = job.common.tangential()?;
    let verdict = check_admissible(&tangential, job.radius);
    let atlas = SiteAtlas::build(&tangential, job.radius);
    let rows: Vec<Vec<String>> = match &atlas {
        Ok(a) => a.csv_rows().into_iter().map(|r| r.to_vec()).collect(),
        Err(_) => Vec::new(),
    };
    out.json(
        "lattice.json",
        &json!({
            "radius": job.radius,
            "tangential": tangential,
            "verdict": verdict,
            "atlas_error": atlas.as_ref().err().map(|e| e.to_string()),
        }),
    )?;
    let header = ["site", "class", "partner", "i", "j"].map(String::from);
    out.csv("lattice_sites.csv", &header, &rows)?;
    Ok(verdict.admissible)
}

pub fn normalform(job: &LatticeRun, out: &mut OutputDir) -> Result<bool> {
    let tangential = job.common.tangential()?;
    let d = job.common.d;
    let nf = normal_form_pipeline(d, &tangential, job.radius)?;
    let atlas = SiteAtlas::build(&tangential, job.radius)?;
    let freq = frequencies(&atlas, d);
    let nondeg = verify_nondegeneracy(tangential.len());
    out.json(
        "normalform.json",
        &json!({
            "report": nf.report,
            "frequencies": freq,
            "nondegeneracy": nondeg,
        }),
    )?;
    let header = ["h", "target", "monomial", "divisor", "coeff_re", "coeff_im"].map(String::from);
    let rows: Vec<Vec<String>> = f_terms(&nf.f)
        .into_iter()
        .map(|t| {
            vec![
                (t.h + 1).to_string(),
                t.target,
                t.monomial,
                t.divisor.to_string(),
                t.coeff_re.to_string(),
                t.coeff_im.to_string(),
            ]
        })
        .collect();
    out.csv("f_terms.csv", &header, &rows)?;
    Ok(nf.report.pass)
}

pub fn melnikov(job: &MelnikovRun, out: &mut OutputDir) -> Result<bool> {
    let tangential = job.common.tangential()?;
    let d = job.common.d;
    let atlas = SiteAtlas::build(&tangential, job.radius)?;
    let freq = frequencies(&atlas, d);
    let pbox = ParameterBox::new(d, tangential.len());
    let cfg = MelnikovConfig {
        eps: job.eps,
        tau: job.tau,
        k_max: job.k_max,
    };
    let point = match &job.xi {
        Some(xi) => Some(check_conditions(xi, job.gamma, cfg, &freq)?),
        None => None,
    };
    let scan = if job.samples > 0 {
        Some(scan_measure(&freq, &pbox, &job.gammas, cfg, job.samples, job.common.seed)?)
    } else {
        None
    };
    let nondeg = check_nondegeneracy(&freq);
    let mel14 = if d > 1 { Some(mel14_box_margin(&freq, &pbox)) } else { None };
    out.json(
        "melnikov.json",
        &json!({
            "box": pbox,
            "point": point,
            "scan": scan,
            "nondegeneracy": nondeg,
            "mel14_box_margin": mel14,
        }),
    )?;
    if let Some(scan) = &scan {
        let header = ["gamma", "excluded", "excluded_fraction", "ci_low", "ci_high"].map(String::from);
        let rows: Vec<Vec<String>> = scan
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.gamma.to_string(),
                    r.excluded.to_string(),
                    r.excluded_fraction.to_string(),
                    r.ci_low.to_string(),
                    r.ci_high.to_string(),
                ]
            })
            .collect();
        out.csv("melnikov_scan.csv", &header, &rows)?;
    }
    let point_ok = point.as_ref().is_none_or(|p| p.pass);
    let scan_ok = scan.as_ref().is_none_or(|s| s.monotone);
    Ok(point_ok && scan_ok)
}

fn trace_csv(trace: &ModeTrace, out: &mut OutputDir) -> Result<()> {
    let d = trace.mass.len();
    let mut header = vec!["t".to_string()];
    for m in &trace.modes {
        let tag = format!("q{}_{}_{}", m.h + 1, m.n.n1, m.n.n2);
        header.push(format!("re_{tag}"));
        header.push(format!("im_{tag}"));
    }
    header.extend((1..=d).map(|h| format!("mass_{h}")));
    header.extend((1..=d).map(|h| format!("normal_sup_{h}")));
    let rows: Vec<Vec<String>> = (0..trace.times.len())
        .map(|k| {
            let mut row = vec![trace.times[k].to_string()];
            for m in &trace.modes {
                row.push(m.values[k].re.to_string());
                row.push(m.values[k].im.to_string());
            }
            row.extend(trace.mass.iter().map(|s| s[k].to_string()));
            row.extend(trace.normal_sup.iter().map(|s| s[k].to_string()));
            row
        })
        .collect();
    out.csv("trace.csv", &header, &rows)
}

pub fn simulate(job: &SimulateRun, out: &mut OutputDir) -> Result<bool> {
    let cfg = job.sim_config()?;
    let trace = run(&cfg)?;
    let verdict = verify_quasiperiodic(&trace, &cfg);
    trace_csv(&trace, out)?;
    out.json("verdict.json", &verdict)?;
    Ok(verdict.pass)
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub verdict: QPVerdict,
    pub halved_verdict: QPVerdict,
    /// Frequency error at `ξ` over the error at `ξ/2`.
    pub freq_error_ratio: f64,
    pub freq_ratio_band: (f64, f64),
    pub freq_ratio_ok: bool,
    pub residual: f64,
    pub residual_quarter: f64,
    pub residual_ratio: f64,
    pub residual_ratio_band: (f64, f64),
    pub residual_ratio_ok: bool,
    pub pass: bool,
}

fn scaled(cfg: &SimConfig, k: f64) -> SimConfig {
    SimConfig {
        xi: cfg.xi.iter().map(|x| x * k).collect(),
        ..cfg.clone()
    }
}

/// Ansatz validation at `ξ` plus the `ξ/2` frequency and `ξ/4` residual
/// scaling checks.
pub fn verify(job: &SimulateRun, out: &mut OutputDir) -> Result<bool> {
    let cfg = job.sim_config()?;
    let trace = run(&cfg)?;
    fit_frequencies(&trace)?;
    let verdict = verify_quasiperiodic(&trace, &cfg);
    let half = scaled(&cfg, 0.5);
    let halved_verdict = verify_quasiperiodic(&run(&half)?, &half);
    let freq_error_ratio = verdict.max_freq_error / halved_verdict.max_freq_error;
    let residual = residual_norm(&cfg, 16);
    let residual_quarter = residual_norm(&scaled(&cfg, 0.25), 16);
    let residual_ratio = residual / residual_quarter;
    let within = |x: f64, (lo, hi): (f64, f64)| x >= lo && x <= hi;
    let freq_ratio_ok = within(freq_error_ratio, FREQ_RATIO_BAND);
    let residual_ratio_ok = within(residual_ratio, RESIDUAL_RATIO_BAND);
    let report = VerifyReport {
        pass: verdict.pass && halved_verdict.pass && freq_ratio_ok && residual_ratio_ok,
        verdict,
        halved_verdict,
        freq_error_ratio,
        freq_ratio_band: FREQ_RATIO_BAND,
        freq_ratio_ok,
        residual,
        residual_quarter,
        residual_ratio,
        residual_ratio_band: RESIDUAL_RATIO_BAND,
        residual_ratio_ok,
    };
    trace_csv(&trace, out)?;
    out.json("verify.json", &report)?;
    Ok(report.pass)
}
