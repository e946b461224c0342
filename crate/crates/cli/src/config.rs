//! Declarative run configuration: a TOML file whose keys are all optional,
//! resolved against per-subcommand defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cnls_core::lattice::{Site, TangentialSet};
use cnls_core::simulate::{CouplingPoly, CouplingTerm, SimConfig, Tolerances};
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub d: Option<usize>,
    pub b: Option<usize>,
    pub sites: Option<Vec<[i64; 2]>>,
    pub xi: Option<Vec<f64>>,
    pub radius: Option<i64>,
    pub seed: Option<u64>,
    #[serde(rename = "N")]
    pub n_grid: Option<usize>,
    pub dt: Option<f64>,
    #[serde(rename = "T")]
    pub t_final: Option<f64>,
    pub stride: Option<usize>,
    /// Coefficient of the default coupling when `G` is absent.
    pub c: Option<f64>,
    #[serde(rename = "G")]
    pub coupling: Option<Vec<RawCouplingTerm>>,
    pub tolerances: Option<RawTolerances>,
    pub modes: Option<Vec<[i64; 2]>>,
    pub gamma: Option<f64>,
    pub gammas: Option<Vec<f64>>,
    pub tau: Option<f64>,
    pub eps: Option<f64>,
    pub k_max: Option<i32>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCouplingTerm {
    /// 1-based component.
    pub h: usize,
    pub coeff: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTolerances {
    pub amp_drift: Option<f64>,
    pub normal_coeff: Option<f64>,
    pub mass_drift: Option<f64>,
    pub freq: Option<f64>,
    pub blowup: Option<f64>,
}

pub fn parse_str(text: &str) -> Result<RawConfig> {
    toml::from_str(text).map_err(|e| anyhow::anyhow!("config error: {e}"))
}

pub fn parse_file(path: &Path) -> Result<(RawConfig, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let text = String::from_utf8(bytes.clone()).context("config is not UTF-8")?;
    let raw = parse_str(&text).with_context(|| format!("in {}", path.display()))?;
    Ok((raw, bytes))
}

/// Defaults of the end-to-end verification scenario.
pub fn verify_defaults() -> RawConfig {
    RawConfig {
        d: Some(2),
        sites: Some(vec![[1, 0], [-1, 0]]),
        xi: Some(vec![1.0e-3, 5.0e-4, 1.5e-3, 8.0e-4]),
        n_grid: Some(32),
        dt: Some(2e-3),
        t_final: Some(200.0),
        stride: Some(50),
        ..RawConfig::default()
    }
}

impl RawConfig {
    /// Keys set in `self` win over `base`.
    pub fn over(self, base: RawConfig) -> RawConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RawConfig { $($f: self.$f.or(base.$f)),* } };
        }
        pick!(
            d, b, sites, xi, radius, seed, n_grid, dt, t_final, stride, c, coupling, tolerances, modes, gamma,
            gammas, tau, eps, k_max, samples
        )
    }
}

/// Data shared by every subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct Common {
    pub d: usize,
    pub sites: Vec<[i64; 2]>,
    pub seed: u64,
}

impl Common {
    pub fn tangential(&self) -> Result<TangentialSet> {
        Ok(TangentialSet::new(self.sites.iter().map(|s| Site::new(s[0], s[1])).collect())?)
    }

    pub fn b(&self) -> usize {
        self.sites.len()
    }
}

pub fn resolve_common(raw: &RawConfig) -> Result<Common> {
    let d = raw.d.unwrap_or(2);
    if d == 0 {
        bail!("config error: key `d` must be positive");
    }
    let sites = raw.sites.clone().unwrap_or_else(|| vec![[1, 0], [-1, 0]]);
    if let Some(b) = raw.b {
        if b != sites.len() {
            bail!("config error: key `b` = {b} but `sites` lists {} sites", sites.len());
        }
    }
    Ok(Common {
        d,
        sites,
        seed: raw.seed.unwrap_or(0),
    })
}

fn check_xi(xi: &[f64], d: usize, b: usize) -> Result<()> {
    if xi.len() != d * b {
        bail!("config error: key `xi` needs d·b = {} entries, got {}", d * b, xi.len());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct LatticeRun {
    #[serde(flatten)]
    pub common: Common,
    pub radius: i64,
}

pub fn resolve_lattice(raw: &RawConfig, default_radius: i64) -> Result<LatticeRun> {
    let radius = raw.radius.unwrap_or(default_radius);
    if radius < 1 {
        bail!("config error: key `radius` must be ≥ 1");
    }
    Ok(LatticeRun {
        common: resolve_common(raw)?,
        radius,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MelnikovRun {
    #[serde(flatten)]
    pub common: Common,
    pub radius: i64,
    pub xi: Option<Vec<f64>>,
    pub gamma: f64,
    pub gammas: Vec<f64>,
    pub tau: f64,
    pub eps: f64,
    pub k_max: i32,
    pub samples: usize,
}

pub fn resolve_melnikov(raw: &RawConfig) -> Result<MelnikovRun> {
    let common = resolve_common(raw)?;
    let b = common.b();
    if let Some(xi) = &raw.xi {
        check_xi(xi, common.d, b)?;
    }
    let k_max = raw.k_max.unwrap_or(15);
    if k_max < 1 {
        bail!("config error: key `k_max` must be ≥ 1");
    }
    Ok(MelnikovRun {
        radius: raw.radius.unwrap_or(15),
        xi: raw.xi.clone(),
        gamma: raw.gamma.unwrap_or(1e-3),
        gammas: raw.gammas.clone().unwrap_or_else(|| vec![1e-2, 1e-3, 1e-4, 1e-5]),
        tau: raw.tau.unwrap_or((2 * b + 3) as f64),
        eps: raw.eps.unwrap_or(0.1),
        k_max,
        samples: raw.samples.unwrap_or(1000),
        common,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateRun {
    #[serde(flatten)]
    pub common: Common,
    #[serde(rename = "N")]
    pub n_grid: usize,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub stride: usize,
    pub xi: Vec<f64>,
    #[serde(rename = "G")]
    pub coupling: Vec<RawCouplingTerm>,
    pub tolerances: Tolerances,
    pub modes: Vec<[i64; 2]>,
}

pub fn resolve_simulate(raw: &RawConfig) -> Result<SimulateRun> {
    let common = resolve_common(raw)?;
    let d = common.d;
    let Some(xi) = raw.xi.clone() else {
        bail!("config error: key `xi` is required for simulation");
    };
    check_xi(&xi, d, common.b())?;
    if let Some(bad) = xi.iter().find(|x| !(**x > 0.0 && **x <= 1e-2)) {
        bail!("config error: key `xi` entry {bad} is outside (0, 1e-2]");
    }
    let coupling = match &raw.coupling {
        Some(terms) => terms.clone(),
        None => {
            let c = raw.c.unwrap_or(1.0);
            CouplingPoly::default_for(d, c)
                .per_component
                .iter()
                .enumerate()
                .flat_map(|(h, ts)| {
                    ts.iter().map(move |t| RawCouplingTerm {
                        h: h + 1,
                        coeff: t.coeff,
                        powers: t.powers.clone(),
                    })
                })
                .collect()
        }
    };
    let base = Tolerances::default();
    let t = raw.tolerances.clone().unwrap_or_default();
    let run = SimulateRun {
        n_grid: raw.n_grid.unwrap_or(64),
        dt: raw.dt.unwrap_or(1e-3),
        t_final: raw.t_final.unwrap_or(10.0),
        stride: raw.stride.unwrap_or(10),
        xi,
        coupling,
        tolerances: Tolerances {
            amp_drift: t.amp_drift.unwrap_or(base.amp_drift),
            normal_coeff: t.normal_coeff.unwrap_or(base.normal_coeff),
            mass_drift: t.mass_drift.unwrap_or(base.mass_drift),
            freq: t.freq.unwrap_or(base.freq),
            blowup: t.blowup.unwrap_or(base.blowup),
        },
        modes: raw.modes.clone().unwrap_or_default(),
        common,
    };
    run.sim_config()?.validate().map_err(|e| anyhow::anyhow!("config error: {e}"))?;
    Ok(run)
}

impl SimulateRun {
    pub fn sim_config(&self) -> Result<SimConfig> {
        let d = self.common.d;
        let mut coupling = CouplingPoly::zero(d);
        for t in &self.coupling {
            if t.h == 0 || t.h > d {
                bail!("config error: coupling term names component {} outside 1..={d}", t.h);
            }
            coupling.per_component[t.h - 1].push(CouplingTerm {
                coeff: t.coeff,
                powers: t.powers.clone(),
            });
        }
        let mut cfg = SimConfig::new(d, self.common.tangential()?, self.xi.clone());
        cfg.n_grid = self.n_grid;
        cfg.dt = self.dt;
        cfg.t_final = self.t_final;
        cfg.stride = self.stride;
        cfg.seed = self.common.seed;
        cfg.coupling = coupling;
        cfg.tolerances = self.tolerances.clone();
        cfg.extra_modes = self.modes.iter().map(|s| Site::new(s[0], s[1])).collect();
        Ok(cfg)
    }
}
